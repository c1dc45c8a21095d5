#include "ticketlab/earlybird.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <tuple>

namespace tl::eb {

std::int64_t ChannelMask::total_bits() const {
    std::int64_t t = 0;
    for (const auto& [name, bits] : entries) t += static_cast<std::int64_t>(bits.size());
    return t;
}

std::int64_t ChannelMask::pruned_bits() const {
    std::int64_t p = 0;
    for (const auto& [name, bits] : entries)
        for (std::uint8_t b : bits) p += b ? 0 : 1;
    return p;
}

void MaskHistory::push(ChannelMask m, int epoch) {
    if (!epochs.empty() && epoch <= epochs.back())
        throw ContractError("MaskHistory: epoch indices must strictly increase");
    masks.push_back(std::move(m));
    epochs.push_back(epoch);
    while (static_cast<int>(masks.size()) > capacity) {
        masks.pop_front();
        epochs.pop_front();
    }
}

// ---- FLOP / byte accounting ----

namespace {

std::int64_t elems(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

struct Acct {
    std::int64_t flops = 0;
    std::int64_t elems_half = 0;  // conv/linear weights and their activations
    std::int64_t elems_full = 0;  // everything else
};

// Shape math only; mirrors each layer's forward without touching data.
Shape walk_layer(const models::Layer* l, Shape s, Acct& acc);

Shape walk_layers(const std::vector<std::unique_ptr<models::Layer>>& layers, Shape s, Acct& acc) {
    for (const auto& l : layers) s = walk_layer(l.get(), std::move(s), acc);
    return s;
}

Shape walk_layer(const models::Layer* l, Shape s, Acct& acc) {
    using namespace models;
    if (auto* lin = dynamic_cast<const Linear*>(l)) {
        const Shape& w = lin->W.tensor->shape;  // (out, in)
        std::int64_t n = s[0];
        acc.flops += 2LL * n * w[0] * w[1];
        acc.elems_half += lin->W.tensor->size() + n * w[0];
        acc.elems_full += static_cast<std::int64_t>(lin->b.tensor->size());
        return {s[0], w[0]};
    }
    if (auto* cv = dynamic_cast<const Conv2d*>(l)) {
        const Shape& w = cv->W.tensor->shape;  // (out, in, k, k)
        int ho = (s[2] + 2 * cv->pad - w[2]) / cv->stride + 1;
        int wo = (s[3] + 2 * cv->pad - w[3]) / cv->stride + 1;
        acc.flops += 2LL * w[0] * w[1] * w[2] * w[3] * ho * wo * s[0];
        acc.elems_half += cv->W.tensor->size() +
                          static_cast<std::int64_t>(s[0]) * w[0] * ho * wo;
        acc.elems_full += static_cast<std::int64_t>(cv->b.tensor->size());
        return {s[0], w[0], ho, wo};
    }
    if (auto* ct = dynamic_cast<const ConvT2d*>(l)) {
        const Shape& w = ct->W.tensor->shape;  // (in, out, k, k)
        int ho = (s[2] - 1) * ct->stride - 2 * ct->pad + w[2];
        int wo = (s[3] - 1) * ct->stride - 2 * ct->pad + w[3];
        // every input position touches every kernel tap, as in the matched conv
        acc.flops += 2LL * w[0] * w[1] * w[2] * w[3] * s[2] * s[3] * s[0];
        acc.elems_half += ct->W.tensor->size() +
                          static_cast<std::int64_t>(s[0]) * w[1] * ho * wo;
        acc.elems_full += static_cast<std::int64_t>(ct->b.tensor->size());
        return {s[0], w[1], ho, wo};
    }
    if (auto* bn = dynamic_cast<const BatchNorm2d*>(l)) {
        std::int64_t n = elems(s);
        acc.flops += 4 * n;
        acc.elems_full += n + 2LL * bn->channels();
        return s;
    }
    if (auto* rb = dynamic_cast<const ResBlock*>(l)) {
        Shape t = s;
        t = walk_layer(rb->c1.get(), std::move(t), acc);
        t = walk_layer(rb->n1.get(), std::move(t), acc);
        t = walk_layer(rb->c2.get(), std::move(t), acc);
        t = walk_layer(rb->n2.get(), std::move(t), acc);
        return t;
    }
    if (auto* rs = dynamic_cast<const ReshapeTo4d*>(l)) {
        return {s[0], static_cast<int>(elems(s) / (s[0] * rs->h * rs->w)), rs->h, rs->w};
    }
    if (dynamic_cast<const Flatten*>(l)) {
        return {s[0], static_cast<int>(elems(s) / s[0])};
    }
    return s;  // activations cost nothing in this accounting
}

void walk_network(const models::GenerativeNetwork& net, int batch, Acct& acc) {
    using namespace models;
    const auto& cfg = net.cfg;
    Shape image{batch, cfg.in_channels, cfg.image_size, cfg.image_size};
    Shape latent{batch, cfg.latent_dim};
    if (is_gan(cfg.family)) {
        walk_layers(net.a, latent, acc);
        walk_layers(net.b, image, acc);
    } else if (is_vae(cfg.family)) {
        walk_layers(net.a, image, acc);
        if (net.head_mu) walk_layer(net.head_mu.get(), {batch, static_cast<int>(net.head_mu->W.tensor->shape[1])}, acc);
        if (net.head_logvar)
            walk_layer(net.head_logvar.get(),
                       {batch, static_cast<int>(net.head_logvar->W.tensor->shape[1])}, acc);
        walk_layers(net.b, latent, acc);
    } else {
        Shape in = cfg.family == Family::linear_ae && cfg.input_dim > 0
                       ? Shape{batch, cfg.input_dim}
                       : image;
        Shape mid = walk_layers(net.a, in, acc);
        walk_layers(net.b, mid, acc);
    }
}

}  // namespace

std::int64_t component_forward_flops(const std::vector<std::unique_ptr<models::Layer>>& layers,
                                     std::vector<int> input_shape) {
    Acct acc;
    walk_layers(layers, std::move(input_shape), acc);
    return acc.flops;
}

std::int64_t forward_flops(const models::GenerativeNetwork& net, int batch) {
    Acct acc;
    walk_network(net, batch, acc);
    return acc.flops;
}

std::int64_t forward_bytes(const models::GenerativeNetwork& net, int batch, Precision precision) {
    Acct acc;
    walk_network(net, batch, acc);
    std::int64_t input = static_cast<std::int64_t>(batch) * net.cfg.in_channels *
                         net.cfg.image_size * net.cfg.image_size;
    std::int64_t half_width = precision == Precision::mixed ? 2 : 4;
    return acc.elems_half * half_width + (acc.elems_full + input) * 4;
}

void count_flops(const models::GenerativeNetwork& net, int batch, FlopLedger& ledger,
                 Precision precision) {
    std::int64_t f = forward_flops(net, batch);
    ledger.forward_flops += f;
    ledger.backward_flops += 2 * f;
    ledger.bytes_moved += 3 * forward_bytes(net, batch, precision);
}

// ---- channel masks ----

ChannelMask channel_mask(models::GenerativeNetwork& net, double r) {
    if (r <= 0.0 || r >= 1.0) throw ContractError("channel_mask: ratio must be in (0,1)");
    if (net.channel_groups.empty())
        throw ContractError("channel_mask: architecture has no batchnorm layers to rank");

    auto bns = net.batchnorms();
    std::map<std::string, models::BatchNorm2d*> by_name(bns.begin(), bns.end());

    struct Cand {
        double score;
        int group;
        int channel;
        const std::string* tie_name;
    };
    std::vector<Cand> cands;
    std::vector<int> kept_per_group;
    std::int64_t total = 0;
    for (std::size_t gi = 0; gi < net.channel_groups.size(); ++gi) {
        const auto& g = net.channel_groups[gi];
        auto* first = by_name.at(g.bn_names.front());
        int ch = first->channels();
        kept_per_group.push_back(ch);
        total += ch;
        for (int c = 0; c < ch; ++c) {
            double score = 0.0;
            for (const auto& bn : g.bn_names)
                score = std::max(score, std::abs(by_name.at(bn)->gamma.tensor->data[c]));
            cands.push_back({score, static_cast<int>(gi), c, &g.bn_names.front()});
        }
    }

    std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
        return std::tie(x.score, *x.tie_name, x.channel) <
               std::tie(y.score, *y.tie_name, y.channel);
    });

    auto want = static_cast<std::int64_t>(std::llround(r * static_cast<double>(total)));
    std::vector<std::vector<std::uint8_t>> keep;
    for (int k : kept_per_group) keep.emplace_back(k, 1);
    std::int64_t pruned = 0;
    for (const Cand& c : cands) {
        if (pruned >= want) break;
        if (kept_per_group[c.group] <= 1) continue;  // floor: spill to the next smallest
        keep[c.group][c.channel] = 0;
        --kept_per_group[c.group];
        ++pruned;
    }

    ChannelMask mask;
    mask.compression_ratio = r;
    for (std::size_t gi = 0; gi < net.channel_groups.size(); ++gi)
        for (const auto& bn : net.channel_groups[gi].bn_names) mask.entries[bn] = keep[gi];
    return mask;
}

double mask_distance(const ChannelMask& a, const ChannelMask& b) {
    if (a.entries.size() != b.entries.size())
        throw ContractError("mask_distance: mask structures differ");
    std::int64_t diff = 0, total = 0;
    auto ib = b.entries.begin();
    for (auto ia = a.entries.begin(); ia != a.entries.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.size() != ib->second.size())
            throw ContractError("mask_distance: mask structures differ at '" + ia->first + "'");
        total += static_cast<std::int64_t>(ia->second.size());
        for (std::size_t i = 0; i < ia->second.size(); ++i)
            diff += (ia->second[i] != ib->second[i]) ? 1 : 0;
    }
    if (total == 0) return 0.0;
    return static_cast<double>(diff) / static_cast<double>(total);
}

Detection detect_eb(const MaskHistory& history, const EBConfig& config) {
    if (history.masks.empty()) throw ContractError("detect_eb: empty history");
    Detection d;
    if (static_cast<int>(history.masks.size()) < config.lookback) return d;
    const ChannelMask& newest = history.masks.back();
    double worst = 0.0;
    if (config.consecutive_only) {
        worst = mask_distance(newest, history.masks[history.masks.size() - 2]);
    } else {
        for (std::size_t i = 0; i + 1 < history.masks.size(); ++i)
            worst = std::max(worst, mask_distance(newest, history.masks[i]));
    }
    if (worst < config.delta) {
        d.found = true;
        d.epoch = history.epochs.back();
    }
    return d;
}

// ---- compression ----

namespace {

void slice_axis(const TensorPtr& t, int axis, const std::vector<int>& keep, int group) {
    const Shape& s = t->shape;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::int64_t dim = s[axis];
    std::int64_t block = static_cast<std::int64_t>(group) * inner;
    std::vector<double> out(outer * static_cast<std::int64_t>(keep.size()) * block);
    std::int64_t w = 0;
    for (std::int64_t o = 0; o < outer; ++o)
        for (int c : keep) {
            std::copy_n(t->data.begin() + (o * dim + static_cast<std::int64_t>(c) * group) * inner,
                        block, out.begin() + w);
            w += block;
        }
    t->data = std::move(out);
    t->shape[axis] = static_cast<int>(keep.size()) * group;
    t->grad.clear();
}

void slice_plain(std::vector<double>& v, const std::vector<int>& keep) {
    std::vector<double> out;
    out.reserve(keep.size());
    for (int c : keep) out.push_back(v[c]);
    v = std::move(out);
}

void reset_spectral(std::vector<std::unique_ptr<models::Layer>>& layers) {
    for (auto& l : layers) {
        if (auto* lin = dynamic_cast<models::Linear*>(l.get())) lin->sn.u.clear();
        if (auto* cv = dynamic_cast<models::Conv2d*>(l.get())) cv->sn.u.clear();
        if (auto* rb = dynamic_cast<models::ResBlock*>(l.get())) {
            rb->c1->sn.u.clear();
            rb->c2->sn.u.clear();
        }
    }
}

}  // namespace

models::GenerativeNetwork compress(const models::GenerativeNetwork& net,
                                   const ChannelMask& mask) {
    models::GenerativeNetwork out = net.clone();
    auto bns = out.batchnorms();
    std::map<std::string, models::BatchNorm2d*> by_name(bns.begin(), bns.end());
    for (const auto& [name, bn] : by_name) {
        auto it = mask.entries.find(name);
        if (it == mask.entries.end() ||
            static_cast<int>(it->second.size()) != bn->channels())
            throw ContractError("compress: mask does not cover batchnorm layer '" + name + "'");
    }
    auto pm = out.param_map();

    for (auto& g : out.channel_groups) {
        const auto& bits = mask.entries.at(g.bn_names.front());
        for (const auto& bn : g.bn_names)
            if (mask.entries.at(bn) != bits)
                throw ContractError("compress: residual keep-sets differ within group at '" + bn +
                                    "'");
        std::vector<int> keep;
        for (std::size_t c = 0; c < bits.size(); ++c)
            if (bits[c]) keep.push_back(static_cast<int>(c));
        if (keep.empty()) throw ContractError("compress: group fully pruned");
        if (keep.size() == bits.size()) continue;

        for (const auto& bn_name : g.bn_names) {
            auto* bn = by_name.at(bn_name);
            slice_axis(bn->gamma.tensor, 0, keep, 1);
            slice_axis(bn->beta.tensor, 0, keep, 1);
            slice_plain(bn->running_mean, keep);
            slice_plain(bn->running_var, keep);
        }
        for (const auto& ref : g.producers) slice_axis(pm.at(ref.param)->tensor, ref.axis, keep, ref.group);
        for (const auto& ref : g.consumers) slice_axis(pm.at(ref.param)->tensor, ref.axis, keep, ref.group);
        g.channels = static_cast<int>(keep.size());
    }
    reset_spectral(out.a);
    reset_spectral(out.b);
    return out;
}

double weight_sparsity_of(const models::GenerativeNetwork& dense,
                          const models::GenerativeNetwork& compressed) {
    auto count = [](const models::GenerativeNetwork& n) {
        std::int64_t t = 0;
        auto& nn = const_cast<models::GenerativeNetwork&>(n);
        for (Parameter* p : nn.params())
            if (prunable(p->kind)) t += static_cast<std::int64_t>(p->tensor->size());
        return t;
    };
    std::int64_t d = count(dense);
    if (d == 0) return 0.0;
    return 1.0 - static_cast<double>(count(compressed)) / static_cast<double>(d);
}

// ---- the EB training loop ----

EBReport run_earlybird(models::GenerativeNetwork net, const io::Dataset& data,
                       const EBRunOptions& opt) {
    auto t0 = std::chrono::steady_clock::now();
    EBReport rep;
    models::GenerativeNetwork dense_ref = net.clone();

    models::TrainOptions to = opt.train;
    models::TrainState st;
    models::init_train_state(net, to, st);
    MaskHistory hist;
    hist.capacity = opt.eb.lookback;

    const int bs = std::min<int>(to.batch_size, data.images->shape[0]);
    const std::int64_t steps = data.images->shape[0] / bs;
    std::int64_t prev_flops = 0;
    std::int64_t dense_epoch_flops = 0;
    std::int64_t dense_epoch_bytes = 3 * steps * forward_bytes(net, bs, Precision::bits32);

    for (int e = 0; e < to.epochs; ++e) {
        models::train_epoch(net, data, to, st, rep.train_report, e);
        std::int64_t delta = st.flops - prev_flops;
        prev_flops = st.flops;
        if (e == 0) dense_epoch_flops = delta;
        rep.ledger.forward_flops += delta / 3;
        rep.ledger.backward_flops += delta - delta / 3;
        rep.ledger.bytes_moved += 3 * steps * forward_bytes(net, bs, opt.precision);

        if (!rep.detection.found) {
            auto m = channel_mask(net, opt.eb.ratio);
            // ranking/bookkeeping cost: a few passes over the gamma vector
            rep.ledger.overhead_flops += 4 * m.total_bits();
            hist.push(m, e + 1);
            auto det = detect_eb(hist, opt.eb);
            if (det.found) {
                rep.detection = det;
                net = compress(net, m);
                // compressed shapes need fresh optimizer moments
                std::int64_t iter = st.iteration;
                std::int64_t fl = st.flops;
                auto rng = std::move(st.rng);
                st = models::TrainState{};
                models::init_train_state(net, to, st);
                st.rng = std::move(rng);
                st.iteration = iter;
                st.flops = fl;
            }
        }
    }

    rep.dense_ledger.forward_flops = dense_epoch_flops / 3 * to.epochs;
    rep.dense_ledger.backward_flops = (dense_epoch_flops - dense_epoch_flops / 3) * to.epochs;
    rep.dense_ledger.bytes_moved = dense_epoch_bytes * to.epochs;
    rep.final_eval_loss = models::eval_loss(net, data);
    rep.weight_sparsity = weight_sparsity_of(dense_ref, net);
    rep.train_report.final_iteration = st.iteration;
    rep.model = std::move(net);
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace tl::eb
