#include "ticketlab/prune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <tuple>

namespace tl::prune {

std::string scope_name(Scope s) {
    switch (s) {
        case Scope::both_components: return "both";
        case Scope::component_a_only: return "a";
        case Scope::component_b_only: return "b";
    }
    return "both";
}

Scope scope_from_name(const std::string& s) {
    if (s == "both") return Scope::both_components;
    if (s == "a") return Scope::component_a_only;
    if (s == "b") return Scope::component_b_only;
    throw ContractError("unknown prune scope '" + s + "' (expected both|a|b)");
}

std::int64_t Mask::total() const {
    std::int64_t t = 0;
    for (const auto& [name, bits] : entries) t += static_cast<std::int64_t>(bits.size());
    return t;
}

std::int64_t Mask::kept() const {
    std::int64_t k = 0;
    for (const auto& [name, bits] : entries)
        for (std::uint8_t b : bits) k += b ? 1 : 0;
    return k;
}

double Mask::sparsity() const {
    std::int64_t t = total();
    if (t == 0) return 0.0;
    return 1.0 - static_cast<double>(kept()) / static_cast<double>(t);
}

namespace {

bool in_scope(const std::string& name, Scope scope) {
    if (scope == Scope::both_components) return true;
    char want = scope == Scope::component_a_only ? 'a' : 'b';
    return !name.empty() && name[0] == want;
}

// in-scope prunable parameters, in name order (map order is already sorted)
std::vector<std::pair<std::string, Parameter*>> prunable_params(models::GenerativeNetwork& net,
                                                                Scope scope) {
    std::vector<std::pair<std::string, Parameter*>> out;
    for (auto& [name, p] : net.param_map())
        if (prunable(p->kind) && in_scope(name, scope)) out.emplace_back(name, p);
    return out;
}

}  // namespace

Mask full_mask(models::GenerativeNetwork& net, Scope scope) {
    Mask m;
    m.scope = scope;
    for (auto& [name, p] : prunable_params(net, scope))
        m.entries[name] = std::vector<std::uint8_t>(p->tensor->data.size(), 1);
    return m;
}

double full_network_sparsity(models::GenerativeNetwork& net, const Mask& mask) {
    std::int64_t total = 0;
    for (auto& [name, p] : prunable_params(net, Scope::both_components))
        total += static_cast<std::int64_t>(p->tensor->data.size());
    if (total == 0) return 0.0;
    return static_cast<double>(mask.total() - mask.kept()) / static_cast<double>(total);
}

namespace {

// Zero the `count` smallest-|w| surviving entries of `current`, ranked
// globally. Tie order: |w|, then parameter name, then flat index.
Mask cut_smallest(models::GenerativeNetwork& net, const Mask& current, std::int64_t count) {
    Mask next = current;
    struct Cand {
        double mag;
        const std::string* name;
        std::size_t idx;
    };
    std::vector<Cand> cands;
    auto pm = net.param_map();
    for (auto& [name, bits] : next.entries) {
        auto it = pm.find(name);
        if (it == pm.end() || it->second->tensor->data.size() != bits.size())
            throw ContractError("prune: mask entry '" + name + "' does not match the network");
        const auto& data = it->second->tensor->data;
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) cands.push_back({std::abs(data[i]), &name, i});
    }
    if (count < 0) count = 0;
    if (count > static_cast<std::int64_t>(cands.size()))
        count = static_cast<std::int64_t>(cands.size());
    auto less = [](const Cand& x, const Cand& y) {
        return std::tie(x.mag, *x.name, x.idx) < std::tie(y.mag, *y.name, y.idx);
    };
    if (count > 0 && count < static_cast<std::int64_t>(cands.size()))
        std::nth_element(cands.begin(), cands.begin() + count, cands.end(), less);
    for (std::int64_t i = 0; i < count; ++i) next.entries[*cands[i].name][cands[i].idx] = 0;

    next.warnings.clear();
    for (const auto& [name, bits] : next.entries)
        if (!bits.empty() && std::none_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }))
            next.warnings.push_back("layer fully pruned: " + name);
    return next;
}

}  // namespace

Mask global_magnitude_prune(models::GenerativeNetwork& net, const Mask& current, double p) {
    if (p < 0.0 || p >= 1.0)
        throw ContractError("global_magnitude_prune: fraction must be in [0,1)");
    std::int64_t surviving = current.kept();
    auto count = static_cast<std::int64_t>(std::floor(p * static_cast<double>(surviving)));
    return cut_smallest(net, current, count);
}

Mask prune_to_sparsity(models::GenerativeNetwork& net, const Mask& current,
                       double target_sparsity) {
    if (target_sparsity < 0.0 || target_sparsity >= 1.0)
        throw ContractError("prune_to_sparsity: target must be in [0,1)");
    std::int64_t total = current.total();
    auto want_pruned = static_cast<std::int64_t>(
        std::llround(target_sparsity * static_cast<double>(total)));
    std::int64_t already = total - current.kept();
    return cut_smallest(net, current, want_pruned - already);
}

// ---- IMP ----

ImpRound train_ticket(models::GenerativeNetwork& net, const TicketState& ticket,
                      const io::Dataset& train_data, const io::Dataset& test_data,
                      const ImpOptions& opt) {
    net.restore(ticket.rewind_weights);
    // rewind snapshots carry parameters only; reset batchnorm statistics so a
    // ticket's retraining is a pure function of (weights, mask, data, seed)
    for (auto& [name, bn] : net.batchnorms()) {
        std::fill(bn->running_mean.begin(), bn->running_mean.end(), 0.0);
        std::fill(bn->running_var.begin(), bn->running_var.end(), 1.0);
    }
    models::TrainOptions to;
    to.epochs = opt.epochs;
    to.batch_size = opt.batch_size;
    to.seed = opt.seed;
    to.mask = &ticket.mask.entries;
    ImpRound round;
    round.ticket = ticket;
    round.report = models::train(net, train_data, to);
    round.final_weights = net.snapshot();
    round.eval_loss = models::eval_loss(net, test_data);
    return round;
}

std::vector<ImpRound> run_imp(models::GenerativeNetwork& net, const io::Dataset& train_data,
                              const io::Dataset& test_data, const ImpOptions& opt) {
    std::int64_t rewind_at = opt.schedule.rewind_iteration;
    if (rewind_at < 0) rewind_at = models::iterations_per_epoch(train_data, opt.batch_size);

    // round 0: dense training, snapshotting the rewind point
    models::TrainOptions to;
    to.epochs = opt.epochs;
    to.batch_size = opt.batch_size;
    to.seed = opt.seed;
    to.checkpoint_at = {0, rewind_at};
    std::vector<ImpRound> rounds;
    ImpRound dense;
    dense.ticket.mask = full_mask(net, opt.scope);
    dense.ticket.rewind_iteration = rewind_at;
    dense.report = models::train(net, train_data, to);
    if (!dense.report.checkpoints.count(rewind_at))
        throw ContractError("run_imp: rewind iteration " + std::to_string(rewind_at) +
                            " was never reached during round-0 training");
    dense.ticket.rewind_weights = dense.report.checkpoints.at(rewind_at);
    dense.final_weights = net.snapshot();
    dense.eval_loss = models::eval_loss(net, test_data);
    rounds.push_back(std::move(dense));

    for (int k = 1; k <= opt.schedule.rounds; ++k) {
        TicketState ticket;
        ticket.round = k;
        ticket.rewind_iteration = rewind_at;
        ticket.rewind_weights = rounds.front().ticket.rewind_weights;
        // rank by the magnitudes at the END of the previous round's training;
        // cut to the cumulative schedule so sparsity tracks 1-(1-p)^k without
        // compounding per-round floor drift
        net.restore(rounds.back().final_weights);
        const double target = 1.0 - std::pow(1.0 - opt.schedule.per_round_fraction, k);
        ticket.mask = prune_to_sparsity(net, rounds.back().ticket.mask, target);
        ticket.sparsity = ticket.mask.sparsity();
        rounds.push_back(train_ticket(net, ticket, train_data, test_data, opt));
    }
    return rounds;
}

ImpRound one_shot_prune(models::GenerativeNetwork& net, const io::Dataset& train_data,
                        const io::Dataset& test_data, const ImpOptions& opt,
                        double target_sparsity) {
    ImpOptions dense_opt = opt;
    dense_opt.schedule.rounds = 0;
    auto rounds = run_imp(net, train_data, test_data, dense_opt);

    TicketState ticket;
    ticket.round = 1;
    ticket.rewind_iteration = rounds.front().ticket.rewind_iteration;
    ticket.rewind_weights = rounds.front().ticket.rewind_weights;
    net.restore(rounds.front().final_weights);
    ticket.mask = prune_to_sparsity(net, rounds.front().ticket.mask, target_sparsity);
    ticket.sparsity = ticket.mask.sparsity();
    return train_ticket(net, ticket, train_data, test_data, opt);
}

TicketState random_ticket(const TicketState& ticket, const models::ModelConfig& cfg,
                          std::uint64_t rng_seed) {
    TicketState out = ticket;
    auto fresh = models::build_model(cfg, rng_seed);
    out.rewind_weights = fresh.snapshot();
    out.rewind_iteration = 0;
    return out;
}

TransferTicket transfer_mask(const TicketState& source, char source_component,
                             models::GenerativeNetwork& target_net, char target_component,
                             bool carry_init) {
    char want = source_component;
    std::vector<std::pair<std::string, const std::vector<std::uint8_t>*>> src_masks;
    for (const auto& [name, bits] : source.mask.entries)
        if (!name.empty() && name[0] == want) src_masks.emplace_back(name, &bits);

    Scope tscope = target_component == 'a' ? Scope::component_a_only : Scope::component_b_only;
    auto tgt = prunable_params(target_net, tscope);
    if (src_masks.size() != tgt.size())
        throw ContractError("transfer_mask: source has " + std::to_string(src_masks.size()) +
                            " prunable parameters in component '" + std::string(1, want) +
                            "' but target has " + std::to_string(tgt.size()));

    TransferTicket out;
    out.mask.scope = tscope;
    for (std::size_t i = 0; i < tgt.size(); ++i) {
        if (tgt[i].second->tensor->data.size() != src_masks[i].second->size())
            throw ContractError("transfer_mask: shape mismatch: source '" + src_masks[i].first +
                                "' vs target '" + tgt[i].first + "'");
        out.mask.entries[tgt[i].first] = *src_masks[i].second;
    }
    if (carry_init) {
        // all parameters of the component, aligned by collection order
        std::vector<std::pair<std::string, const std::vector<double>*>> src_weights;
        for (const auto& [name, w] : source.rewind_weights)
            if (!name.empty() && name[0] == want) src_weights.emplace_back(name, &w);
        std::vector<Parameter*> tgt_all =
            target_net.params_component(target_component);
        if (src_weights.size() != tgt_all.size())
            throw ContractError("transfer_mask: component parameter counts differ (" +
                                std::to_string(src_weights.size()) + " vs " +
                                std::to_string(tgt_all.size()) + ")");
        // params_component order matches the map order used to build src_weights
        // only when names sort the same way; align explicitly through the map
        auto pm = target_net.param_map();
        std::vector<std::string> tgt_names;
        for (auto& [name, p] : pm)
            if (!name.empty() && name[0] == target_component) tgt_names.push_back(name);
        if (src_weights.size() != tgt_names.size())
            throw ContractError("transfer_mask: component parameter counts differ");
        for (std::size_t i = 0; i < tgt_names.size(); ++i) {
            Parameter* p = pm.at(tgt_names[i]);
            if (p->tensor->data.size() != src_weights[i].second->size())
                throw ContractError("transfer_mask: weight shape mismatch: source '" +
                                    src_weights[i].first + "' vs target '" + tgt_names[i] + "'");
            out.rewind_weights[tgt_names[i]] = *src_weights[i].second;
        }
    }
    return out;
}

// ---- pruning at initialization ----

std::vector<std::vector<double>> gradients_of(std::vector<Parameter*>& params,
                                              const LossFn& loss_fn) {
    for (Parameter* p : params) p->tensor->zero_grad();
    Tape tape;
    auto loss = loss_fn(tape);
    backward(tape, loss);
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (Parameter* p : params) {
        if (p->tensor->grad.empty())
            out.emplace_back(p->tensor->data.size(), 0.0);
        else
            out.push_back(p->tensor->grad);
    }
    return out;
}

std::vector<std::vector<double>> hessian_grad_product(std::vector<Parameter*>& params,
                                                      const LossFn& loss_fn, double h_rel) {
    auto g0 = gradients_of(params, loss_fn);
    double wn = 0.0, gn = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (double v : params[i]->tensor->data) wn += v * v;
        for (double v : g0[i]) gn += v * v;
    }
    wn = std::sqrt(wn);
    gn = std::sqrt(gn);
    if (gn < 1e-12)
        throw NumericError("hessian_grad_product: gradient norm is numerically zero");
    double h = h_rel * wn / gn;
    if (h <= 0.0) h = h_rel;

    std::vector<std::vector<double>> saved;
    saved.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        saved.push_back(params[i]->tensor->data);
        auto& d = params[i]->tensor->data;
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += h * g0[i][j];
    }
    auto g1 = gradients_of(params, loss_fn);
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->tensor->data = saved[i];

    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < g0[i].size(); ++j) g1[i][j] = (g1[i][j] - g0[i][j]) / h;
    return g1;
}

namespace {

// loss used for saliency at init: plain training loss for AE/VAE; for GANs
// the discriminator and generator losses are summed so both components get
// nonzero gradients from a single backward pass
LossFn family_loss_fn(models::GenerativeNetwork& net, const TensorPtr& x, std::uint64_t seed) {
    using models::Family;
    return [&net, x, seed](Tape& tape) -> TensorPtr {
        Rng rng(seed * 7919 + 13);
        const auto& cfg = net.cfg;
        if (models::is_gan(cfg.family)) {
            int n = x->shape[0];
            auto z = Tensor::create({n, cfg.latent_dim});
            for (double& v : z->data) v = rng.normal();
            auto fake = models::run_component(tape, net.a, z, true);
            auto fake_det = Tensor::from_data(fake->shape, fake->data);  // cut the graph
            auto d_real = models::run_component(tape, net.b, x, true);
            auto d_fake_det = models::run_component(tape, net.b, fake_det, true);
            auto d_fake = models::run_component(tape, net.b, fake, true);
            if (cfg.family == Family::wgan) {
                auto d_loss = add(tape, mean_op(tape, d_fake_det), neg(tape, mean_op(tape, d_real)));
                auto g_loss = neg(tape, mean_op(tape, d_fake));
                return add(tape, d_loss, g_loss);
            }
            auto ones = Tensor::create(d_real->shape);
            std::fill(ones->data.begin(), ones->data.end(), 1.0);
            auto zeros = Tensor::create(d_real->shape);
            auto d_loss = add(tape, bce_with_logits_loss(tape, d_real, ones),
                              bce_with_logits_loss(tape, d_fake_det, zeros));
            auto g_loss = bce_with_logits_loss(tape, d_fake, ones);
            return add(tape, d_loss, g_loss);
        }
        if (models::is_vae(cfg.family)) {
            auto enc = models::encode_vae(tape, net, x, true);
            auto z = models::reparameterize(tape, enc.mu, enc.logvar, rng);
            auto xh = models::run_component(tape, net.b, z, true);
            if (xh->shape != x->shape) xh = reshape(tape, xh, x->shape);
            auto recon = mse_loss(tape, xh, x);
            auto kl = gaussian_kl_loss(tape, enc.mu, enc.logvar);
            return add(tape, recon, scale(tape, kl, cfg.beta));
        }
        auto z = models::run_component(tape, net.a, x, true);
        auto xh = models::run_component(tape, net.b, z, true);
        if (xh->shape != x->shape) xh = reshape(tape, xh, x->shape);
        return mse_loss(tape, xh, x);
    };
}

// keep the top (total - round(s*total)) entries by score; prune the rest.
// `prune_high` picks which end of the ranking gets cut.
Mask mask_from_scores(models::GenerativeNetwork& net, Scope scope,
                      const std::map<std::string, std::vector<double>>& scores,
                      double target_sparsity, bool prune_high) {
    Mask mask = full_mask(net, scope);
    std::int64_t total = mask.total();
    auto n_prune =
        static_cast<std::int64_t>(std::llround(target_sparsity * static_cast<double>(total)));
    struct Cand {
        double score;
        const std::string* name;
        std::size_t idx;
    };
    std::vector<Cand> cands;
    for (auto& [name, bits] : mask.entries) {
        const auto& sc = scores.at(name);
        for (std::size_t i = 0; i < bits.size(); ++i) cands.push_back({sc[i], &name, i});
    }
    auto order = [prune_high](const Cand& x, const Cand& y) {
        if (x.score != y.score) return prune_high ? x.score > y.score : x.score < y.score;
        return std::tie(*x.name, x.idx) < std::tie(*y.name, y.idx);
    };
    if (n_prune > 0 && n_prune < static_cast<std::int64_t>(cands.size()))
        std::nth_element(cands.begin(), cands.begin() + n_prune, cands.end(), order);
    if (n_prune > static_cast<std::int64_t>(cands.size()))
        n_prune = static_cast<std::int64_t>(cands.size());
    for (std::int64_t i = 0; i < n_prune; ++i) mask.entries[*cands[i].name][cands[i].idx] = 0;
    return mask;
}

}  // namespace

Mask snip_prune(models::GenerativeNetwork& net, const TensorPtr& batch, double target_sparsity,
                Scope scope, std::uint64_t seed) {
    auto named = prunable_params(net, scope);
    std::vector<Parameter*> params;
    for (auto& [name, p] : named) params.push_back(p);
    auto grads = gradients_of(params, family_loss_fn(net, batch, seed));
    std::map<std::string, std::vector<double>> scores;
    for (std::size_t i = 0; i < named.size(); ++i) {
        auto& sc = scores[named[i].first];
        const auto& w = named[i].second->tensor->data;
        sc.resize(w.size());
        for (std::size_t j = 0; j < w.size(); ++j) sc[j] = std::abs(grads[i][j] * w[j]);
    }
    // low saliency goes first
    return mask_from_scores(net, scope, scores, target_sparsity, /*prune_high=*/false);
}

Mask grasp_prune(models::GenerativeNetwork& net, const TensorPtr& batch, double target_sparsity,
                 Scope scope, std::uint64_t seed) {
    auto named = prunable_params(net, scope);
    std::vector<Parameter*> params;
    for (auto& [name, p] : named) params.push_back(p);
    auto hg = hessian_grad_product(params, family_loss_fn(net, batch, seed));
    std::map<std::string, std::vector<double>> scores;
    for (std::size_t i = 0; i < named.size(); ++i) {
        auto& sc = scores[named[i].first];
        const auto& w = named[i].second->tensor->data;
        sc.resize(w.size());
        for (std::size_t j = 0; j < w.size(); ++j) sc[j] = -w[j] * hg[i][j];
    }
    // high score = least useful for gradient flow; prune from the top
    return mask_from_scores(net, scope, scores, target_sparsity, /*prune_high=*/true);
}

std::string mask_summary(const Mask& mask) {
    std::string out;
    char buf[160];
    for (const auto& [name, bits] : mask.entries) {
        std::int64_t k = 0;
        for (std::uint8_t b : bits) k += b ? 1 : 0;
        std::snprintf(buf, sizeof buf, "%-32s %8lld / %8lld kept\n", name.c_str(),
                      static_cast<long long>(k), static_cast<long long>(bits.size()));
        out += buf;
    }
    return out;
}

}  // namespace tl::prune
