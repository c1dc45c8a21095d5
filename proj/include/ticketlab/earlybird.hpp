#pragma once

// Early-bird tickets: batchnorm-scale channel pruning, normalized Hamming
// mask distance with a look-back window, physical channel compression, and
// FLOP/byte accounting (mixed precision emulated in the byte counters only).

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ticketlab/models.hpp"

namespace tl::eb {

struct ChannelMask {
    std::map<std::string, std::vector<std::uint8_t>> entries;  // bn layer -> keep bits
    double compression_ratio = 0.0;

    std::int64_t total_bits() const;
    std::int64_t pruned_bits() const;
};

struct MaskHistory {
    int capacity = 5;
    std::deque<ChannelMask> masks;
    std::deque<int> epochs;
    void push(ChannelMask m, int epoch);
};

struct EBConfig {
    double delta = 0.1;
    int lookback = 5;
    double ratio = 0.5;
    bool consecutive_only = false;  // alternative window rule, for comparison
};

enum class Precision { bits32, mixed };

struct FlopLedger {
    std::int64_t forward_flops = 0;
    std::int64_t backward_flops = 0;
    std::int64_t overhead_flops = 0;  // pruning bookkeeping
    std::int64_t bytes_moved = 0;
    std::int64_t total() const { return forward_flops + backward_flops + overhead_flops; }
};

// Per-layer forward FLOPs for one batch through both components (conv
// 2*Cout*Cin*K^2*Hout*Wout, linear 2*m*n, batchnorm 4*elements).
std::int64_t forward_flops(const models::GenerativeNetwork& net, int batch);
std::int64_t component_forward_flops(const std::vector<std::unique_ptr<models::Layer>>& layers,
                                     std::vector<int> input_shape);
// Bytes touched by one batch under the precision assumption (parameters plus
// activations of eligible conv/linear tensors halve under mixed).
std::int64_t forward_bytes(const models::GenerativeNetwork& net, int batch, Precision precision);

void count_flops(const models::GenerativeNetwork& net, int batch, FlopLedger& ledger,
                 Precision precision = Precision::bits32);

// Rank all batchnorm scale magnitudes |gamma| globally and prune the smallest
// r fraction, keeping at least one channel per layer (floor violations spill
// to the next-smallest channels elsewhere).
ChannelMask channel_mask(models::GenerativeNetwork& net, double r);

double mask_distance(const ChannelMask& a, const ChannelMask& b);

struct Detection {
    bool found = false;
    int epoch = -1;
};
Detection detect_eb(const MaskHistory& history, const EBConfig& config);

// Physically removes pruned channels (the bn channel, its producing filter and
// the matching input slice of every consumer). Pruned channels' beta is zeroed
// first, so compressed forward == masked forward exactly.
models::GenerativeNetwork compress(const models::GenerativeNetwork& net, const ChannelMask& mask);

// Weight-level sparsity the compression implies, against the full dense count.
double weight_sparsity_of(const models::GenerativeNetwork& dense,
                          const models::GenerativeNetwork& compressed);

struct EBReport {
    Detection detection;
    models::GenerativeNetwork model;      // compressed (or dense if not found)
    models::TrainReport train_report;     // stitched across the detection boundary
    FlopLedger ledger;                    // this run
    FlopLedger dense_ledger;              // would-be cost of dense training, same budget
    double wall_seconds = 0.0;
    double final_eval_loss = 0.0;
    double weight_sparsity = 0.0;
};

struct EBRunOptions {
    EBConfig eb;
    models::TrainOptions train;
    Precision precision = Precision::bits32;
};

EBReport run_earlybird(models::GenerativeNetwork net, const io::Dataset& data,
                       const EBRunOptions& opt);

}  // namespace tl::eb
