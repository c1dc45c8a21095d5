#pragma once

// Experiment orchestration: flat key=value configs, multi-seed sweeps over
// IMP / early-bird runs and their baselines, CSV + SVG emission with error
// bars, and the training-cost comparison table.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ticketlab/earlybird.hpp"
#include "ticketlab/metrics.hpp"
#include "ticketlab/prune.hpp"

namespace tl::harness {

struct ExperimentConfig {
    enum class Mode { imp, earlybird, transfer, baselines } mode = Mode::imp;
    models::ModelConfig model;
    io::DatasetSpec dataset;
    prune::PruneSchedule schedule;
    eb::EBConfig eb;
    eb::Precision precision = eb::Precision::bits32;
    std::vector<std::string> baselines;  // random_ticket, one_shot, snip, grasp
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    int epochs = 10;
    int batch_size = 32;
    std::vector<std::string> metrics{"recon"};  // recon, fid, is, accuracy, early_stop
    int fid_samples = 256;
    prune::Scope scope = prune::Scope::both_components;
    bool record_wall_time = true;  // off: seconds column is 0 so reruns are byte-identical
    std::string out_dir;
    // transfer mode: source model family whose pruned component seeds the target
    models::ModelConfig transfer_source;
    char transfer_source_component = 'b';
    char transfer_target_component = 'a';
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

struct ResultRow {
    std::string run;  // imp, random, one_shot, snip, grasp, eb, dense, transfer, ...
    int round = 0;
    double sparsity = 0.0;  // full-network basis
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
    int n = 0;
    std::int64_t flops = 0;
    double seconds = 0.0;
};

// One measured point from one seed, before aggregation.
struct SeedPoint {
    std::uint64_t seed = 0;
    std::string run;
    int round = 0;
    double sparsity = 0.0;
    std::map<std::string, double> values;
    std::int64_t flops = 0;
    double seconds = 0.0;
};

struct ExperimentResult {
    std::vector<ResultRow> rows;
    std::vector<SeedPoint> points;                       // raw per-seed log
    std::map<std::uint64_t, std::string> seed_failures;  // seed -> error text
    std::string extractor_fingerprint;
    int highlight_round = -1;  // best imp round by the first metric
};

ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Deterministic aggregation: sort by seed, then group by (run, round, metric);
// std uses the n-1 divisor.
std::vector<ResultRow> aggregate(std::vector<SeedPoint> points);

void emit_csv(const std::vector<ResultRow>& rows, const std::string& path);
std::vector<ResultRow> parse_csv(const std::string& path);
// x: sparsity in percent, y: metric mean with a ±σ band; one series per run.
void emit_svg_curves(const std::vector<ResultRow>& rows, const std::string& metric,
                     const std::string& path);
// FID / weight sparsity / FLOPs / seconds per run kind, as text.
std::string report_table(const std::vector<ResultRow>& rows);

int cli(int argc, const char* const* argv);

}  // namespace tl::harness
