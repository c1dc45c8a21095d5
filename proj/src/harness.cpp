#include "ticketlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <tuple>

#include "CLI11.hpp"

namespace fs = std::filesystem;

namespace tl::harness {

// ---- config parsing ----

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

io::DatasetKind dataset_kind(const std::string& s) {
    if (s == "blobs2d") return io::DatasetKind::blobs2d;
    if (s == "shapes16") return io::DatasetKind::shapes16;
    if (s == "idx_images") return io::DatasetKind::idx_images;
    throw ContractError("unknown dataset kind '" + s + "'");
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    bool model_set = false, transfer_set = false;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config line " + std::to_string(lineno) +
                                ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "mode") {
                if (val == "imp") cfg.mode = ExperimentConfig::Mode::imp;
                else if (val == "earlybird") cfg.mode = ExperimentConfig::Mode::earlybird;
                else if (val == "transfer") cfg.mode = ExperimentConfig::Mode::transfer;
                else if (val == "baselines") cfg.mode = ExperimentConfig::Mode::baselines;
                else throw ContractError("unknown mode '" + val + "'");
            } else if (key == "model.family") {
                cfg.model = models::default_config(models::family_from_name(val));
                model_set = true;
            } else if (key == "model.latent_dim") cfg.model.latent_dim = std::stoi(val);
            else if (key == "model.base_channels") cfg.model.base_channels = std::stoi(val);
            else if (key == "model.image_size") cfg.model.image_size = std::stoi(val);
            else if (key == "model.in_channels") cfg.model.in_channels = std::stoi(val);
            else if (key == "model.input_dim") cfg.model.input_dim = std::stoi(val);
            else if (key == "model.beta") cfg.model.beta = std::stod(val);
            else if (key == "model.lr") cfg.model.lr = std::stod(val);
            else if (key == "model.critic_steps") cfg.model.critic_steps = std::stoi(val);
            else if (key == "dataset.kind") cfg.dataset.kind = dataset_kind(val);
            else if (key == "dataset.n_train") cfg.dataset.n_train = std::stoi(val);
            else if (key == "dataset.n_test") cfg.dataset.n_test = std::stoi(val);
            else if (key == "dataset.seed") cfg.dataset.seed = std::stoull(val);
            else if (key == "dataset.images") cfg.dataset.idx_images_path = val;
            else if (key == "dataset.labels") cfg.dataset.idx_labels_path = val;
            else if (key == "schedule.fraction") cfg.schedule.per_round_fraction = std::stod(val);
            else if (key == "schedule.rounds") cfg.schedule.rounds = std::stoi(val);
            else if (key == "schedule.rewind_iteration")
                cfg.schedule.rewind_iteration = std::stoll(val);
            else if (key == "schedule.strategy") {
                if (val == "iterative")
                    cfg.schedule.strategy = prune::PruneSchedule::Strategy::iterative;
                else if (val == "one_shot")
                    cfg.schedule.strategy = prune::PruneSchedule::Strategy::one_shot;
                else throw ContractError("unknown strategy '" + val + "'");
            } else if (key == "eb.delta") cfg.eb.delta = std::stod(val);
            else if (key == "eb.lookback") cfg.eb.lookback = std::stoi(val);
            else if (key == "eb.ratio") cfg.eb.ratio = std::stod(val);
            else if (key == "eb.consecutive_only") cfg.eb.consecutive_only = val == "true";
            else if (key == "precision") {
                if (val == "32") cfg.precision = eb::Precision::bits32;
                else if (val == "mixed") cfg.precision = eb::Precision::mixed;
                else throw ContractError("precision must be 32 or mixed");
            } else if (key == "baselines") cfg.baselines = split_list(val);
            else if (key == "seeds") {
                cfg.seeds.clear();
                for (const auto& s : split_list(val)) cfg.seeds.push_back(std::stoull(s));
            } else if (key == "epochs") cfg.epochs = std::stoi(val);
            else if (key == "batch_size") cfg.batch_size = std::stoi(val);
            else if (key == "metrics") cfg.metrics = split_list(val);
            else if (key == "fid_samples") cfg.fid_samples = std::stoi(val);
            else if (key == "scope") cfg.scope = prune::scope_from_name(val);
            else if (key == "timing") cfg.record_wall_time = val != "none";
            else if (key == "out") cfg.out_dir = val;
            else if (key == "transfer.source_family") {
                cfg.transfer_source = models::default_config(models::family_from_name(val));
                transfer_set = true;
            } else if (key == "transfer.source_component")
                cfg.transfer_source_component = val.empty() ? 'b' : val[0];
            else if (key == "transfer.target_component")
                cfg.transfer_target_component = val.empty() ? 'a' : val[0];
            else
                throw ContractError("unknown config key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ContractError("config line " + std::to_string(lineno) + ": bad value for " +
                                key);
        }
    }
    if (cfg.seeds.empty()) throw ContractError("config: seeds must be non-empty");
    std::vector<std::uint64_t> sorted = cfg.seeds;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ContractError("config: seeds must be distinct");
    if (cfg.mode == ExperimentConfig::Mode::transfer && !transfer_set)
        throw ContractError("config: transfer mode needs transfer.source_family");
    // keep latent/base/image consistency when transferring into a model that
    // shares the generator shape
    if (transfer_set && model_set) {
        cfg.transfer_source.latent_dim = cfg.model.latent_dim;
        cfg.transfer_source.base_channels = cfg.model.base_channels;
        cfg.transfer_source.image_size = cfg.model.image_size;
        cfg.transfer_source.in_channels = cfg.model.in_channels;
    }
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ContractError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

// ---- per-round metric evaluation ----

namespace {

bool wants(const std::vector<std::string>& metrics, const std::string& m) {
    return std::find(metrics.begin(), metrics.end(), m) != metrics.end();
}

TensorPtr first_n(const TensorPtr& images, int n) {
    n = std::min<int>(n, images->shape[0]);
    auto t = Tensor::create({n, images->shape[1], images->shape[2], images->shape[3]});
    std::copy_n(images->data.begin(), t->size(), t->data.begin());
    return t;
}

// samples from the model if it can sample, reconstructions otherwise
TensorPtr model_output(models::GenerativeNetwork& net, const io::Dataset& test, int n,
                       std::uint64_t rng_seed) {
    if (models::is_ae(net.cfg.family)) return models::reconstruct(net, first_n(test.images, n));
    Rng rng(rng_seed);
    return models::generate(net, n, rng);
}

std::map<std::string, double> evaluate_round(models::GenerativeNetwork& net,
                                             const io::DatasetPair& data,
                                             metrics::FeatureExtractor* fx,
                                             const ExperimentConfig& cfg,
                                             const models::TrainReport& report,
                                             double eval_loss_value, std::uint64_t sample_seed) {
    std::map<std::string, double> out;
    const bool gan = models::is_gan(net.cfg.family);
    if (wants(cfg.metrics, "recon") && !gan) out["recon"] = eval_loss_value;
    if (wants(cfg.metrics, "disc_loss") && gan) out["disc_loss"] = eval_loss_value;

    TensorPtr samples;
    auto need_samples = [&]() {
        if (!samples) samples = model_output(net, data.test, cfg.fid_samples, sample_seed);
        return samples;
    };
    if (wants(cfg.metrics, "fid") && fx) {
        auto real = first_n(data.test.images, cfg.fid_samples);
        out["fid"] = metrics::fid_between(*fx, real, need_samples());
    }
    if (wants(cfg.metrics, "is") && fx) {
        auto s = need_samples();
        auto probs = fx->probabilities(s);
        out["is"] = metrics::inception_like_score(probs, s->shape[0], fx->classes);
    }
    if (wants(cfg.metrics, "accuracy") && fx && !gan) {
        auto recon = models::reconstruct(net, first_n(data.test.images, cfg.fid_samples));
        std::vector<int> labels(data.test.labels.begin(),
                                data.test.labels.begin() + recon->shape[0]);
        out["accuracy"] = metrics::downstream_accuracy(recon, labels, *fx);
    }
    if (wants(cfg.metrics, "early_stop")) {
        const auto& curve = gan ? report.loss_b : report.loss_a;
        if (!curve.empty())
            out["early_stop"] = metrics::early_stop_iteration(curve);
    }
    return out;
}

prune::ImpOptions imp_options(const ExperimentConfig& cfg, std::uint64_t seed) {
    prune::ImpOptions o;
    o.schedule = cfg.schedule;
    o.epochs = cfg.epochs;
    o.batch_size = cfg.batch_size;
    o.seed = seed;
    o.scope = cfg.scope;
    return o;
}

double seconds_of(const ExperimentConfig& cfg, double wall) {
    return cfg.record_wall_time ? wall : 0.0;
}

void save_round_checkpoint(const ExperimentConfig& cfg, const std::string& run,
                           std::uint64_t seed, models::GenerativeNetwork& net,
                           const prune::ImpRound& rd, const std::string& fingerprint) {
    if (cfg.out_dir.empty()) return;
    io::Checkpoint ck;
    ck.meta["family"] = models::family_name(net.cfg.family);
    ck.meta["run"] = run;
    ck.meta["seed"] = std::to_string(seed);
    ck.meta["round"] = std::to_string(rd.ticket.round);
    ck.meta["sparsity"] = std::to_string(rd.ticket.sparsity);
    ck.meta["extractor"] = fingerprint;
    ck.rewind_iteration = rd.ticket.rewind_iteration;
    auto pm = net.param_map();
    for (const auto& [name, w] : rd.final_weights) {
        ck.arrays[name] = w;
        auto it = pm.find(name);
        if (it != pm.end()) ck.shapes[name] = it->second->tensor->shape;
    }
    for (const auto& [name, bits] : rd.ticket.mask.entries) ck.masks[name] = bits;
    io::save_checkpoint(ck, cfg.out_dir + "/checkpoints/" + run + "_seed" +
                                std::to_string(seed) + ".ckpt");
}

void save_grid(const ExperimentConfig& cfg, models::GenerativeNetwork& net,
               const io::DatasetPair& data, const std::string& name) {
    if (cfg.out_dir.empty()) return;
    auto images = model_output(net, data.test, 16, 71);
    io::emit_image_grid(*images, 4, cfg.out_dir + "/grids/" + name + ".pgm");
}

}  // namespace

// ---- aggregation ----

std::vector<ResultRow> aggregate(std::vector<SeedPoint> points) {
    std::sort(points.begin(), points.end(), [](const SeedPoint& a, const SeedPoint& b) {
        return std::tie(a.run, a.round, a.seed) < std::tie(b.run, b.round, b.seed);
    });
    // key: run, round, metric
    std::map<std::tuple<std::string, int, std::string>, std::vector<const SeedPoint*>> groups;
    for (const auto& p : points)
        for (const auto& [metric, v] : p.values)
            groups[{p.run, p.round, metric}].push_back(&p);

    std::vector<ResultRow> rows;
    for (const auto& [key, pts] : groups) {
        ResultRow r;
        r.run = std::get<0>(key);
        r.round = std::get<1>(key);
        r.metric = std::get<2>(key);
        r.n = static_cast<int>(pts.size());
        double sum = 0.0, sps = 0.0, sec = 0.0;
        double flops = 0.0;
        for (const SeedPoint* p : pts) {
            sum += p->values.at(r.metric);
            sps += p->sparsity;
            sec += p->seconds;
            flops += static_cast<double>(p->flops);
        }
        r.mean = sum / r.n;
        r.sparsity = sps / r.n;
        r.seconds = sec / r.n;
        r.flops = static_cast<std::int64_t>(std::llround(flops / r.n));
        if (r.n > 1) {
            double ss = 0.0;
            for (const SeedPoint* p : pts) {
                double d = p->values.at(r.metric) - r.mean;
                ss += d * d;
            }
            r.stddev = std::sqrt(ss / (r.n - 1));
        }
        rows.push_back(r);
    }
    return rows;
}

// ---- the experiment driver ----

namespace {

struct SeedContext {
    const ExperimentConfig& cfg;
    const io::DatasetPair& data;
    metrics::FeatureExtractor* fx;
    std::uint64_t seed;
    std::vector<SeedPoint>& points;
    bool emit_artifacts;  // grids only for the first seed

    void add_point(const std::string& run, models::GenerativeNetwork& net,
                   const prune::ImpRound& rd, int round, double sparsity) {
        net.restore(rd.final_weights);
        SeedPoint p;
        p.seed = seed;
        p.run = run;
        p.round = round;
        p.sparsity = sparsity;
        p.flops = rd.report.flops_per_epoch.empty() ? 0 : rd.report.flops_per_epoch.back();
        p.seconds = seconds_of(cfg, rd.report.wall_seconds);
        p.values = evaluate_round(net, data, fx, cfg, rd.report, rd.eval_loss,
                                  seed * 2654435761ull + round * 97 + 11);
        points.push_back(std::move(p));
    }
};

void run_imp_seed(SeedContext ctx) {
    const auto& cfg = ctx.cfg;
    auto net = models::build_model(cfg.model, ctx.seed);
    auto opt = imp_options(cfg, ctx.seed);
    auto rounds = prune::run_imp(net, ctx.data.train, ctx.data.test, opt);

    std::string fp = ctx.fx ? ctx.fx->fingerprint : "";
    for (const auto& rd : rounds) {
        double sp = prune::full_network_sparsity(net, rd.ticket.mask);
        ctx.add_point("imp", net, rd, rd.ticket.round, sp);
        if (ctx.emit_artifacts) {
            net.restore(rd.final_weights);
            save_grid(cfg, net, ctx.data, "imp_round" + std::to_string(rd.ticket.round));
        }
    }
    save_round_checkpoint(cfg, "imp", ctx.seed, net, rounds.back(), fp);

    bool want_random = wants(cfg.baselines, "random_ticket");
    bool want_oneshot = wants(cfg.baselines, "one_shot");
    bool want_snip = wants(cfg.baselines, "snip");
    bool want_grasp = wants(cfg.baselines, "grasp");

    if (want_random) {
        for (std::size_t k = 1; k < rounds.size(); ++k) {
            auto t = prune::random_ticket(rounds[k].ticket, cfg.model,
                                          ctx.seed * 7681 + 1000 + k);
            auto rd = prune::train_ticket(net, t, ctx.data.train, ctx.data.test, opt);
            ctx.add_point("random", net, rd, static_cast<int>(k),
                          prune::full_network_sparsity(net, t.mask));
        }
    }
    double final_target = rounds.back().ticket.sparsity;
    if (want_oneshot && cfg.schedule.rounds > 0) {
        auto net2 = models::build_model(cfg.model, ctx.seed);
        auto rd = prune::one_shot_prune(net2, ctx.data.train, ctx.data.test, opt, final_target);
        ctx.add_point("one_shot", net2, rd, cfg.schedule.rounds,
                      prune::full_network_sparsity(net2, rd.ticket.mask));
    }
    for (int which = 0; which < 2; ++which) {
        if (which == 0 ? !want_snip : !want_grasp) continue;
        auto net2 = models::build_model(cfg.model, ctx.seed);
        auto batch = first_n(ctx.data.train.images, cfg.batch_size);
        auto mask = which == 0
                        ? prune::snip_prune(net2, batch, final_target, cfg.scope, ctx.seed)
                        : prune::grasp_prune(net2, batch, final_target, cfg.scope, ctx.seed);
        prune::TicketState t;
        t.mask = std::move(mask);
        t.rewind_weights = net2.snapshot();
        t.round = cfg.schedule.rounds;
        t.sparsity = t.mask.sparsity();
        auto rd = prune::train_ticket(net2, t, ctx.data.train, ctx.data.test, opt);
        ctx.add_point(which == 0 ? "snip" : "grasp", net2, rd, cfg.schedule.rounds,
                      prune::full_network_sparsity(net2, t.mask));
    }
}

void run_eb_seed(SeedContext ctx, std::vector<std::string>& ledger_lines) {
    const auto& cfg = ctx.cfg;
    auto net = models::build_model(cfg.model, ctx.seed);

    eb::EBRunOptions eo;
    eo.eb = cfg.eb;
    eo.train.epochs = cfg.epochs;
    eo.train.batch_size = cfg.batch_size;
    eo.train.seed = ctx.seed;
    eo.precision = cfg.precision;
    auto rep = eb::run_earlybird(std::move(net), ctx.data.train, eo);

    SeedPoint p;
    p.seed = ctx.seed;
    p.run = "eb";
    p.round = rep.detection.found ? rep.detection.epoch : cfg.epochs;
    p.sparsity = rep.weight_sparsity;
    p.flops = rep.ledger.total();
    p.seconds = seconds_of(cfg, rep.wall_seconds);
    p.values = evaluate_round(rep.model, ctx.data, ctx.fx, cfg, rep.train_report,
                              rep.final_eval_loss, ctx.seed * 2654435761ull + 5);
    ctx.points.push_back(p);
    if (ctx.emit_artifacts) save_grid(cfg, rep.model, ctx.data, "eb");

    char buf[160];
    std::snprintf(buf, sizeof buf, "eb_seed%llu,%lld,%lld,%lld",
                  static_cast<unsigned long long>(ctx.seed),
                  static_cast<long long>(rep.ledger.forward_flops),
                  static_cast<long long>(rep.ledger.backward_flops),
                  static_cast<long long>(rep.ledger.bytes_moved));
    ledger_lines.push_back(buf);
    std::snprintf(buf, sizeof buf, "dense_seed%llu,%lld,%lld,%lld",
                  static_cast<unsigned long long>(ctx.seed),
                  static_cast<long long>(rep.dense_ledger.forward_flops),
                  static_cast<long long>(rep.dense_ledger.backward_flops),
                  static_cast<long long>(rep.dense_ledger.bytes_moved));
    ledger_lines.push_back(buf);

    // dense control trained to the same budget
    {
        auto dnet = models::build_model(cfg.model, ctx.seed);
        models::TrainOptions to;
        to.epochs = cfg.epochs;
        to.batch_size = cfg.batch_size;
        to.seed = ctx.seed;
        auto report = models::train(dnet, ctx.data.train, to);
        SeedPoint dp;
        dp.seed = ctx.seed;
        dp.run = "dense";
        dp.round = cfg.epochs;
        dp.sparsity = 0.0;
        dp.flops = rep.dense_ledger.total();
        dp.seconds = seconds_of(cfg, report.wall_seconds);
        dp.values = evaluate_round(dnet, ctx.data, ctx.fx, cfg, report,
                                   models::eval_loss(dnet, ctx.data.test),
                                   ctx.seed * 2654435761ull + 6);
        ctx.points.push_back(dp);
    }

    // pruning-at-init baselines at the matched weight-level sparsity
    for (int which = 0; which < 2; ++which) {
        const char* name = which == 0 ? "snip" : "grasp";
        if (!wants(cfg.baselines, name)) continue;
        auto net2 = models::build_model(cfg.model, ctx.seed);
        auto batch = first_n(ctx.data.train.images, cfg.batch_size);
        auto mask = which == 0
                        ? prune::snip_prune(net2, batch, rep.weight_sparsity, cfg.scope, ctx.seed)
                        : prune::grasp_prune(net2, batch, rep.weight_sparsity, cfg.scope,
                                             ctx.seed);
        prune::TicketState t;
        t.mask = std::move(mask);
        t.rewind_weights = net2.snapshot();
        t.sparsity = t.mask.sparsity();
        auto opt = imp_options(cfg, ctx.seed);
        auto rd = prune::train_ticket(net2, t, ctx.data.train, ctx.data.test, opt);
        ctx.add_point(name, net2, rd, cfg.epochs, prune::full_network_sparsity(net2, t.mask));
    }
}

void run_transfer_seed(SeedContext ctx) {
    const auto& cfg = ctx.cfg;
    // prune the source model on the component being exported
    auto src = models::build_model(cfg.transfer_source, ctx.seed);
    auto src_opt = imp_options(cfg, ctx.seed);
    src_opt.scope = cfg.transfer_source_component == 'a' ? prune::Scope::component_a_only
                                                         : prune::Scope::component_b_only;
    auto src_rounds = prune::run_imp(src, ctx.data.train, ctx.data.test, src_opt);
    const auto& src_ticket = src_rounds.back().ticket;

    auto tgt = models::build_model(cfg.model, ctx.seed);
    auto tt = prune::transfer_mask(src_ticket, cfg.transfer_source_component, tgt,
                                   cfg.transfer_target_component, true);
    prune::TicketState ticket;
    ticket.mask = tt.mask;
    ticket.round = src_ticket.round;
    ticket.rewind_iteration = 0;
    ticket.rewind_weights = tgt.snapshot();
    for (const auto& [name, w] : tt.rewind_weights) ticket.rewind_weights[name] = w;
    ticket.sparsity = ticket.mask.sparsity();

    auto opt = imp_options(cfg, ctx.seed);
    auto rd = prune::train_ticket(tgt, ticket, ctx.data.train, ctx.data.test, opt);
    double sp = prune::full_network_sparsity(tgt, ticket.mask);
    ctx.add_point("transfer", tgt, rd, ticket.round, sp);
    if (ctx.emit_artifacts) save_grid(cfg, tgt, ctx.data, "transfer");

    auto rt = prune::random_ticket(ticket, cfg.model, ctx.seed * 31337 + 5);
    auto rd2 = prune::train_ticket(tgt, rt, ctx.data.train, ctx.data.test, opt);
    ctx.add_point("random", tgt, rd2, ticket.round, sp);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    ExperimentResult res;
    auto data = io::materialize(cfg.dataset);

    std::optional<metrics::FeatureExtractor> fx;
    bool needs_fx = wants(cfg.metrics, "fid") || wants(cfg.metrics, "is") ||
                    wants(cfg.metrics, "accuracy");
    if (needs_fx) {
        fx = metrics::train_extractor(data.train, data.test, 4242);
        res.extractor_fingerprint = fx->fingerprint;
    }

    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        fs::create_directories(cfg.out_dir + "/checkpoints");
        fs::create_directories(cfg.out_dir + "/grids");
    }

    std::vector<std::string> ledger_lines;
    std::vector<std::uint64_t> seeds = cfg.seeds;
    std::sort(seeds.begin(), seeds.end());
    bool first = true;
    for (std::uint64_t seed : seeds) {
        SeedContext ctx{cfg, data, fx ? &*fx : nullptr, seed, res.points, first};
        try {
            switch (cfg.mode) {
                case ExperimentConfig::Mode::imp:
                case ExperimentConfig::Mode::baselines:
                    run_imp_seed(ctx);
                    break;
                case ExperimentConfig::Mode::earlybird:
                    run_eb_seed(ctx, ledger_lines);
                    break;
                case ExperimentConfig::Mode::transfer:
                    run_transfer_seed(ctx);
                    break;
            }
        } catch (const std::exception& e) {
            res.seed_failures[seed] = e.what();
        }
        first = false;
    }
    if (res.seed_failures.size() == seeds.size() && !seeds.empty()) {
        std::string msg = "all seeds failed:";
        for (const auto& [s, err] : res.seed_failures)
            msg += "\n  seed " + std::to_string(s) + ": " + err;
        throw ContractError(msg);
    }

    res.rows = aggregate(res.points);

    // best imp round by the first metric (the round a qualitative sheet
    // would highlight)
    if (!cfg.metrics.empty()) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& r : res.rows)
            if (r.run == "imp" && r.metric == cfg.metrics.front() && r.mean < best) {
                best = r.mean;
                res.highlight_round = r.round;
            }
    }

    if (!cfg.out_dir.empty()) {
        emit_csv(res.rows, cfg.out_dir + "/results.csv");
        std::vector<std::string> seen;
        for (const auto& r : res.rows)
            if (std::find(seen.begin(), seen.end(), r.metric) == seen.end())
                seen.push_back(r.metric);
        for (const auto& m : seen) {
            std::vector<ResultRow> sub;
            for (const auto& r : res.rows)
                if (r.metric == m) sub.push_back(r);
            emit_svg_curves(sub, m, cfg.out_dir + "/curve_" + m + ".svg");
        }
        if (!ledger_lines.empty()) {
            std::ofstream f(cfg.out_dir + "/ledger.csv", std::ios::binary);
            f << "run,flops_fwd,flops_bwd,bytes_moved\n";
            for (const auto& l : ledger_lines) f << l << "\n";
        }
        std::ofstream meta(cfg.out_dir + "/metadata.txt", std::ios::binary);
        meta << "highlight_round=" << res.highlight_round << "\n";
        meta << "extractor=" << res.extractor_fingerprint << "\n";
        for (const auto& [s, err] : res.seed_failures)
            meta << "seed_failure " << s << ": " << err << "\n";
    }
    return res;
}

// ---- CSV ----

void emit_csv(const std::vector<ResultRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ContractError("emit_csv: cannot open " + path);
    f << "run,round,sparsity,metric,mean,std,n,flops,seconds\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%s,%.17g,%.17g,%d,%lld,%.17g\n",
                      r.run.c_str(), r.round, r.sparsity, r.metric.c_str(), r.mean, r.stddev,
                      r.n, static_cast<long long>(r.flops), r.seconds);
        f << buf;
    }
}

std::vector<ResultRow> parse_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("parse_csv: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) ||
        trim(line) != "run,round,sparsity,metric,mean,std,n,flops,seconds")
        throw ContractError("parse_csv: bad header in " + path);
    std::vector<ResultRow> rows;
    while (std::getline(f, line)) {
        line = trim(line);
        if (line.empty()) continue;
        std::vector<std::string> parts;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) parts.push_back(item);
        if (parts.size() != 9) throw ContractError("parse_csv: bad row: " + line);
        ResultRow r;
        r.run = parts[0];
        r.round = std::stoi(parts[1]);
        r.sparsity = std::stod(parts[2]);
        r.metric = parts[3];
        r.mean = std::stod(parts[4]);
        r.stddev = std::stod(parts[5]);
        r.n = std::stoi(parts[6]);
        r.flops = std::stoll(parts[7]);
        r.seconds = std::stod(parts[8]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---- SVG curves ----

namespace {

const char* series_color(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf"};
    return colors[i % 7];
}

}  // namespace

void emit_svg_curves(const std::vector<ResultRow>& rows, const std::string& metric,
                     const std::string& path) {
    if (rows.empty()) throw ContractError("emit_svg_curves: no rows to plot");
    for (const auto& r : rows)
        if (r.metric != metric)
            throw ContractError("emit_svg_curves: mixed metrics (" + r.metric + " vs " + metric +
                                ")");
    const double W = 640, H = 480, ml = 70, mr = 20, mt = 30, mb = 50;
    double xmin = 0.0, xmax = 100.0, ymin = 0.0, ymax = 1.0;
    if (!rows.empty()) {
        xmin = 1e300;
        xmax = -1e300;
        ymin = 1e300;
        ymax = -1e300;
        for (const auto& r : rows) {
            xmin = std::min(xmin, r.sparsity * 100.0);
            xmax = std::max(xmax, r.sparsity * 100.0);
            ymin = std::min(ymin, r.mean - r.stddev);
            ymax = std::max(ymax, r.mean + r.stddev);
        }
        if (xmax - xmin < 1e-9) { xmin -= 1.0; xmax += 1.0; }
        if (ymax - ymin < 1e-9) { ymin -= 1.0; ymax += 1.0; }
    }
    auto sx = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto sy = [&](double v) { return H - mb - (v - ymin) / (ymax - ymin) * (H - mt - mb); };

    std::vector<std::string> runs;
    for (const auto& r : rows)
        if (std::find(runs.begin(), runs.end(), r.run) == runs.end()) runs.push_back(r.run);
    std::sort(runs.begin(), runs.end());

    std::ofstream f(path, std::ios::binary);
    if (!f) throw ContractError("emit_svg_curves: cannot open " + path);
    char buf[512];
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
         "viewBox=\"0 0 640 480\">\n";
    f << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n"
                  "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n",
                  ml, H - mb, W - mr, H - mb, ml, mt, ml, H - mb);
    f << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.2f\" y=\"%.2f\" font-size=\"14\">sparsity (%%)</text>\n"
                  "<text x=\"14\" y=\"%.2f\" font-size=\"14\" transform=\"rotate(-90 14 %.2f)\">"
                  "%s</text>\n",
                  W / 2 - 40, H - 14, H / 2, H / 2, metric.c_str());
    f << buf;

    for (std::size_t si = 0; si < runs.size(); ++si) {
        std::vector<const ResultRow*> series;
        for (const auto& r : rows)
            if (r.run == runs[si]) series.push_back(&r);
        std::sort(series.begin(), series.end(), [](const ResultRow* a, const ResultRow* b) {
            return std::tie(a->sparsity, a->round) < std::tie(b->sparsity, b->round);
        });
        const char* color = series_color(si);
        // sigma band
        std::string band = "<polygon fill=\"" + std::string(color) +
                           "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
        for (const auto* r : series) {
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", sx(r->sparsity * 100.0),
                          sy(r->mean + r->stddev));
            band += buf;
        }
        for (auto it = series.rbegin(); it != series.rend(); ++it) {
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", sx((*it)->sparsity * 100.0),
                          sy((*it)->mean - (*it)->stddev));
            band += buf;
        }
        f << band << "\"/>\n";
        std::string line = "<polyline fill=\"none\" stroke=\"" + std::string(color) +
                           "\" stroke-width=\"2\" points=\"";
        for (const auto* r : series) {
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", sx(r->sparsity * 100.0), sy(r->mean));
            line += buf;
        }
        f << line << "\"/>\n";
        for (const auto* r : series) {
            std::snprintf(buf, sizeof buf,
                          "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n",
                          sx(r->sparsity * 100.0), sy(r->mean), color);
            f << buf;
        }
        std::snprintf(buf, sizeof buf,
                      "<rect x=\"%.2f\" y=\"%.2f\" width=\"12\" height=\"12\" fill=\"%s\"/>\n"
                      "<text x=\"%.2f\" y=\"%.2f\" font-size=\"13\">%s</text>\n",
                      W - mr - 140.0, mt + 18.0 * si, color, W - mr - 122.0, mt + 11.0 + 18.0 * si,
                      runs[si].c_str());
        f << buf;
    }
    f << "</svg>\n";
}

std::string report_table(const std::vector<ResultRow>& rows) {
    // per run kind: FID (or first metric), sparsity, flops, seconds
    std::vector<std::string> runs;
    for (const auto& r : rows)
        if (std::find(runs.begin(), runs.end(), r.run) == runs.end()) runs.push_back(r.run);
    std::sort(runs.begin(), runs.end());
    std::string out = "method          FID       weights_pruned  FLOPs            seconds\n";
    char buf[256];
    for (const auto& run : runs) {
        const ResultRow* best = nullptr;
        for (const auto& r : rows) {
            if (r.run != run) continue;
            if (r.metric == "fid" && (!best || r.round > best->round)) best = &r;
        }
        if (!best) {  // fall back to the last round of whatever metric exists
            for (const auto& r : rows)
                if (r.run == run && (!best || r.round > best->round)) best = &r;
        }
        if (!best) continue;
        std::snprintf(buf, sizeof buf, "%-15s %-9.3f %-15.4f %-16lld %.2f\n", run.c_str(),
                      best->mean, best->sparsity, static_cast<long long>(best->flops),
                      best->seconds);
        out += buf;
    }
    return out;
}

// ---- CLI ----

namespace {

int run_mode_command(ExperimentConfig::Mode mode, const std::string& config_path,
                     const std::string& out_override, const std::string& seed_override) {
    auto cfg = parse_config_file(config_path);
    cfg.mode = mode;
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (!seed_override.empty()) {
        cfg.seeds.clear();
        for (const auto& s : split_list(seed_override)) cfg.seeds.push_back(std::stoull(s));
    }
    auto res = run_experiment(cfg);
    std::printf("%zu result rows", res.rows.size());
    if (!cfg.out_dir.empty()) std::printf(" -> %s/results.csv", cfg.out_dir.c_str());
    std::printf("\n");
    for (const auto& [s, err] : res.seed_failures)
        std::fprintf(stderr, "seed %llu failed: %s\n", static_cast<unsigned long long>(s),
                     err.c_str());
    return 0;
}

int run_eval_command(const std::string& config_path, const std::string& checkpoint_path) {
    auto cfg = parse_config_file(config_path);
    auto ck = io::load_checkpoint(checkpoint_path);
    auto it = ck.meta.find("family");
    models::ModelConfig mc = cfg.model;
    if (it != ck.meta.end()) mc.family = models::family_from_name(it->second);
    auto net = models::build_model(mc, 1);
    models::NamedWeights w;
    for (const auto& [name, arr] : ck.arrays) w[name] = arr;
    net.restore(w);

    auto data = io::materialize(cfg.dataset);
    std::optional<metrics::FeatureExtractor> fx;
    if (wants(cfg.metrics, "fid") || wants(cfg.metrics, "is") || wants(cfg.metrics, "accuracy"))
        fx = metrics::train_extractor(data.train, data.test, 4242);
    models::TrainReport empty_report;
    auto values = evaluate_round(net, data, fx ? &*fx : nullptr, cfg, empty_report,
                                 models::eval_loss(net, data.test), 17);
    for (const auto& [name, v] : values) std::printf("%s = %.6f\n", name.c_str(), v);
    if (fx) std::printf("extractor = %s\n", fx->fingerprint.c_str());
    return 0;
}

}  // namespace

int cli(int argc, const char* const* argv) {
    CLI::App app{"lottery-ticket laboratory for small generative models"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds, checkpoint, csv_path, metric = "fid";
    int jobs = 0;  // accepted for config compatibility; runs are sequential

    struct ModeCmd {
        const char* name;
        const char* help;
        ExperimentConfig::Mode mode;
    };
    const ModeCmd mode_cmds[] = {
        {"imp", "iterative magnitude pruning sweep", ExperimentConfig::Mode::imp},
        {"earlybird", "early-bird channel-pruning run", ExperimentConfig::Mode::earlybird},
        {"transfer", "ticket transfer across architectures", ExperimentConfig::Mode::transfer},
        {"baselines", "pruning baselines only", ExperimentConfig::Mode::baselines},
    };
    std::map<const CLI::App*, ExperimentConfig::Mode> mode_of;
    for (const auto& mc : mode_cmds) {
        auto* sub = app.add_subcommand(mc.name, mc.help);
        sub->add_option("--config", config_path, "experiment config file")->required();
        sub->add_option("--out", out_dir, "output directory override");
        sub->add_option("--seed-override", seeds, "comma-separated seed list");
        sub->add_option("--jobs", jobs, "max parallel seeds");
        mode_of[sub] = mc.mode;
    }
    auto* eval_cmd = app.add_subcommand("eval", "recompute metrics from a checkpoint");
    eval_cmd->add_option("--config", config_path, "experiment config file")->required();
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    auto* plot_cmd = app.add_subcommand("plot", "re-render an SVG curve from a CSV");
    plot_cmd->add_option("--csv", csv_path, "results CSV")->required();
    plot_cmd->add_option("--metric", metric, "metric to plot");
    plot_cmd->add_option("--out", out_dir, "output SVG path")->required();
    auto* report_cmd = app.add_subcommand("report", "training-cost comparison table");
    report_cmd->add_option("--csv", csv_path, "results CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        for (const auto& [sub, mode] : mode_of)
            if (sub->parsed())
                return run_mode_command(mode, config_path, out_dir, seeds);
        if (eval_cmd->parsed()) return run_eval_command(config_path, checkpoint);
        if (plot_cmd->parsed()) {
            auto rows = parse_csv(csv_path);
            std::vector<ResultRow> sub;
            for (const auto& r : rows)
                if (r.metric == metric) sub.push_back(r);
            emit_svg_curves(sub, metric, out_dir);
            std::printf("wrote %s\n", out_dir.c_str());
            return 0;
        }
        if (report_cmd->parsed()) {
            auto rows = parse_csv(csv_path);
            std::fputs(report_table(rows).c_str(), stdout);
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}

}  // namespace tl::harness
