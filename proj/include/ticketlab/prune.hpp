#pragma once

// Lottery-ticket machinery: global magnitude masks, iterative magnitude
// pruning with late rewinding, one-shot pruning, random-ticket controls,
// ticket transfer across architectures, and SNIP/GraSP pruning-at-init.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ticketlab/models.hpp"

namespace tl::prune {

enum class Scope { both_components, component_a_only, component_b_only };

std::string scope_name(Scope s);
Scope scope_from_name(const std::string& s);

struct Mask {
    models::MaskMap entries;  // prunable parameter name -> keep bits
    Scope scope = Scope::both_components;
    std::vector<std::string> warnings;  // e.g. fully-pruned layers

    std::int64_t total() const;
    std::int64_t kept() const;
    double sparsity() const;  // 1 - kept/total over in-scope entries
};

// All-ones mask over every prunable parameter in scope (conv kernels and
// linear weights; biases and batchnorm parameters are never masked here).
Mask full_mask(models::GenerativeNetwork& net, Scope scope);

// Sparsity of `mask` measured against the FULL network's prunable weights,
// regardless of mask scope (single-component plots use this basis).
double full_network_sparsity(models::GenerativeNetwork& net, const Mask& mask);

// Among weights surviving in `current`, newly zero the floor(p * surviving)
// smallest by |w|; previously pruned entries stay pruned. Ties break by
// parameter name then flat index.
Mask global_magnitude_prune(models::GenerativeNetwork& net, const Mask& current, double p);
// Same ranking, but cut straight to the requested total sparsity.
Mask prune_to_sparsity(models::GenerativeNetwork& net, const Mask& current,
                       double target_sparsity);

struct TicketState {
    Mask mask;
    models::NamedWeights rewind_weights;
    std::int64_t rewind_iteration = 0;
    int round = 0;
    double sparsity = 0.0;
};

struct PruneSchedule {
    double per_round_fraction = 0.2;
    int rounds = 20;
    std::int64_t rewind_iteration = -1;  // -1: end of epoch 1
    enum class Strategy { iterative, one_shot } strategy = Strategy::iterative;
};

struct ImpOptions {
    PruneSchedule schedule;
    int epochs = 10;
    int batch_size = 32;
    std::uint64_t seed = 0;
    Scope scope = Scope::both_components;
};

struct ImpRound {
    TicketState ticket;
    models::TrainReport report;
    models::NamedWeights final_weights;  // trained weights of this round
    double eval_loss = 0.0;
};

// Round 0 trains dense and snapshots theta_i; each later round prunes p of
// the survivors, rewinds to (theta_i, m_k) and retrains.
std::vector<ImpRound> run_imp(models::GenerativeNetwork& net, const io::Dataset& train_data,
                              const io::Dataset& test_data, const ImpOptions& opt);

// Train once, cut to the target in one shot, rewind, retrain once.
ImpRound one_shot_prune(models::GenerativeNetwork& net, const io::Dataset& train_data,
                        const io::Dataset& test_data, const ImpOptions& opt,
                        double target_sparsity);

// Same mask, fresh initializer draw, rewind_iteration 0.
TicketState random_ticket(const TicketState& ticket, const models::ModelConfig& cfg,
                          std::uint64_t rng_seed);

struct TransferTicket {
    Mask mask;                            // scoped to the target component only
    models::NamedWeights rewind_weights;  // target-component names; empty if mask-only
};

// Copies a component's mask (and, by default, its rewind weights) onto a
// structurally identical component of another network.
TransferTicket transfer_mask(const TicketState& source, char source_component,
                             models::GenerativeNetwork& target_net, char target_component,
                             bool carry_init = true);

// Retrain a ticket from its rewind point; returns the per-round record.
ImpRound train_ticket(models::GenerativeNetwork& net, const TicketState& ticket,
                      const io::Dataset& train_data, const io::Dataset& test_data,
                      const ImpOptions& opt);

// ---- pruning at initialization ----

using LossFn = std::function<TensorPtr(Tape&)>;

// One backward pass; gradients returned per parameter in order.
std::vector<std::vector<double>> gradients_of(std::vector<Parameter*>& params,
                                              const LossFn& loss_fn);
// Finite-difference Hessian-gradient product: Hg ~ [g(w + h g) - g(w)] / h,
// h = h_rel * ||w|| / ||g||.
std::vector<std::vector<double>> hessian_grad_product(std::vector<Parameter*>& params,
                                                      const LossFn& loss_fn,
                                                      double h_rel = 1e-4);

// keep the top (1 - sparsity) weights by |g * w| from one loss evaluation
Mask snip_prune(models::GenerativeNetwork& net, const TensorPtr& batch, double target_sparsity,
                Scope scope = Scope::both_components, std::uint64_t seed = 0);
// prune the highest -w * (Hg) scores (preserve gradient flow)
Mask grasp_prune(models::GenerativeNetwork& net, const TensorPtr& batch, double target_sparsity,
                 Scope scope = Scope::both_components, std::uint64_t seed = 0);

// per-layer kept/total text summary
std::string mask_summary(const Mask& mask);

}  // namespace tl::prune
