#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ticketlab/earlybird.hpp"

using namespace tl;
using namespace tl::eb;

namespace {

io::Dataset tiny_shapes(int n, std::uint64_t seed = 3) {
    io::DatasetSpec spec;
    spec.kind = io::DatasetKind::shapes16;
    spec.n_train = n;
    spec.n_test = n;
    spec.seed = seed;
    return io::materialize(spec).train;
}

models::GenerativeNetwork tiny_net(models::Family f = models::Family::dcgan,
                                   std::uint64_t seed = 11) {
    auto cfg = models::default_config(f);
    cfg.base_channels = 8;
    cfg.latent_dim = 16;
    return models::build_model(cfg, seed);
}

// mask over a synthetic bn-name universe, for distance/detection tests
ChannelMask bits_mask(const std::vector<std::uint8_t>& bits) {
    ChannelMask m;
    m.entries["bn"] = bits;
    return m;
}

}  // namespace

namespace {

// a bare two-batchnorm network with one group per layer, for ranking tests
models::GenerativeNetwork two_bn_net(const std::vector<double>& g1,
                                     const std::vector<double>& g2) {
    models::GenerativeNetwork net;
    auto mk = [](const std::string& name, const std::vector<double>& g) {
        auto bn = std::make_unique<models::BatchNorm2d>();
        bn->name = name;
        bn->gamma.tensor = Tensor::from_data({static_cast<int>(g.size())}, g, true);
        bn->gamma.name = name + ".gamma";
        bn->gamma.kind = ParamKind::bn_scale;
        bn->beta.tensor = Tensor::create({static_cast<int>(g.size())}, true);
        bn->beta.name = name + ".beta";
        bn->beta.kind = ParamKind::bn_shift;
        bn->running_mean.assign(g.size(), 0.0);
        bn->running_var.assign(g.size(), 1.0);
        return bn;
    };
    net.a.push_back(mk("a.bn1", g1));
    net.a.push_back(mk("a.bn2", g2));
    models::ChannelGroup c1, c2;
    c1.bn_names = {"a.bn1"};
    c1.channels = static_cast<int>(g1.size());
    c2.bn_names = {"a.bn2"};
    c2.channels = static_cast<int>(g2.size());
    net.channel_groups = {c1, c2};
    return net;
}

}  // namespace

TEST_CASE("gamma ranking worked example with the per-layer floor") {
    // gammas [2,2] and [0.1,0.2], prune half: 0.1 goes first; the floor saves
    // 0.2 (last channel of its layer) and the cut spills to the next-smallest
    // global candidate, the tied 2.0 of the earlier layer at the lowest index
    auto net = two_bn_net({2.0, 2.0}, {0.1, 0.2});
    auto m = channel_mask(net, 0.5);
    CHECK(m.pruned_bits() == 2);
    CHECK(m.total_bits() == 4);
    const auto& l1 = m.entries.at("a.bn1");
    const auto& l2 = m.entries.at("a.bn2");
    CHECK(l2[0] == 0);  // 0.1 cut
    CHECK(l2[1] == 1);  // 0.2 saved by the floor
    CHECK(l1[0] == 0);  // spill lands on the first tied 2.0
    CHECK(l1[1] == 1);
}

TEST_CASE("channel mask ratio accuracy and floor invariant") {
    for (double r : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        auto net = tiny_net(models::Family::conv_ae, 7);
        auto m = channel_mask(net, r);
        const double got = static_cast<double>(m.pruned_bits()) / m.total_bits();
        CHECK(std::abs(got - r) <= 1.0 / m.total_bits());
        for (const auto& [name, bits] : m.entries) {
            int kept = 0;
            for (auto b : bits) kept += b;
            CHECK(kept >= 1);
        }
    }
    // extreme ratio: the floor forces one channel per layer to survive
    auto net = tiny_net(models::Family::conv_ae, 7);
    auto m = channel_mask(net, 0.99);
    for (const auto& [name, bits] : m.entries) {
        int kept = 0;
        for (auto b : bits) kept += b;
        CHECK(kept >= 1);
    }
}

TEST_CASE("mask distance is a normalized hamming metric") {
    auto a = bits_mask({1, 0, 1, 0});
    auto b = bits_mask({1, 0, 0, 0});
    auto c = bits_mask({0, 1, 0, 1});
    CHECK(mask_distance(a, a) == 0.0);
    CHECK(mask_distance(a, b) == doctest::Approx(0.25));
    CHECK(mask_distance(a, b) == mask_distance(b, a));
    CHECK(mask_distance(a, c) == 1.0);
    // triangle inequality on random masks
    Rng rng(13);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<std::uint8_t> x(16), y(16), z(16);
        for (int i = 0; i < 16; ++i) {
            x[i] = rng.index(2);
            y[i] = rng.index(2);
            z[i] = rng.index(2);
        }
        auto mx = bits_mask(x), my = bits_mask(y), mz = bits_mask(z);
        CHECK(mask_distance(mx, mz) <= mask_distance(mx, my) + mask_distance(my, mz) + 1e-15);
    }
    // structural mismatch is an error
    ChannelMask other;
    other.entries["bn2"] = {1, 0, 1, 0};
    CHECK_THROWS_AS(mask_distance(a, other), ContractError);
}

TEST_CASE("history push keeps a bounded strictly ordered window") {
    MaskHistory h;
    h.capacity = 3;
    for (int e = 1; e <= 5; ++e) h.push(bits_mask({1, 0}), e);
    CHECK(h.masks.size() == 3);
    CHECK(h.epochs.front() == 3);
    CHECK(h.epochs.back() == 5);
    CHECK_THROWS_AS(h.push(bits_mask({1, 0}), 5), ContractError);
    CHECK_THROWS_AS(h.push(bits_mask({1, 0}), 2), ContractError);
}

TEST_CASE("detection triggers when the window stabilizes") {
    EBConfig cfg;
    cfg.delta = 0.1;
    cfg.lookback = 5;

    SUBCASE("hand-built stable tail") {
        MaskHistory h;
        h.capacity = cfg.lookback;
        // distances vs final mask: epochs 1..3 churn, 4..8 settle
        std::vector<std::vector<std::uint8_t>> seq = {
            {1, 1, 1, 1, 0, 0, 0, 0}, {0, 0, 1, 1, 1, 1, 0, 0}, {1, 0, 1, 0, 1, 0, 1, 0},
            {1, 1, 0, 0, 1, 1, 0, 0}, {1, 1, 0, 0, 1, 1, 0, 0}, {1, 1, 0, 0, 1, 1, 0, 0},
            {1, 1, 0, 0, 1, 1, 0, 0}, {1, 1, 0, 0, 1, 1, 0, 0}};
        Detection det;
        for (std::size_t e = 0; e < seq.size(); ++e) {
            h.push(bits_mask(seq[e]), static_cast<int>(e) + 1);
            det = detect_eb(h, cfg);
            if (det.found) break;
        }
        REQUIRE(det.found);
        CHECK(det.epoch == 8);  // first epoch with 5 identical masks in view
    }

    SUBCASE("never stabilizes, never fires") {
        MaskHistory h;
        h.capacity = cfg.lookback;
        Rng rng(17);
        for (int e = 1; e <= 30; ++e) {
            std::vector<std::uint8_t> bits(16);
            for (auto& b : bits) b = rng.index(2);
            h.push(bits_mask(bits), e);
            CHECK_FALSE(detect_eb(h, cfg).found);
        }
    }

    SUBCASE("delta = 1 accepts anything once the window is full") {
        EBConfig loose = cfg;
        loose.delta = 1.01;
        MaskHistory h;
        h.capacity = cfg.lookback;
        Rng rng(19);
        Detection det;
        for (int e = 1; e <= 10 && !det.found; ++e) {
            std::vector<std::uint8_t> bits(16);
            for (auto& b : bits) b = rng.index(2);
            h.push(bits_mask(bits), e);
            det = detect_eb(h, loose);
        }
        REQUIRE(det.found);
        CHECK(det.epoch == cfg.lookback);  // fires as soon as the window fills
    }

    SUBCASE("simulation cross-check over random trajectories") {
        Rng rng(23);
        for (int trial = 0; trial < 50; ++trial) {
            const int n = 12, epochs = 20;
            const double delta = 0.2;
            EBConfig c;
            c.delta = delta;
            c.lookback = 4;
            std::vector<std::vector<std::uint8_t>> traj;
            std::vector<std::uint8_t> cur(n);
            for (auto& b : cur) b = rng.index(2);
            for (int e = 0; e < epochs; ++e) {
                // random walk that calms down over time
                int flips = static_cast<int>(rng.index(std::max<std::int64_t>(1, n - e)));
                for (int f = 0; f < flips; ++f) cur[rng.index(n)] ^= 1;
                traj.push_back(cur);
            }
            // oracle: first epoch e (1-based) with window full and
            // max_{j in window, j < e} dist(m_e, m_j) < delta
            int want = -1;
            for (int e = c.lookback; e <= epochs && want < 0; ++e) {
                double worst = 0.0;
                for (int j = e - c.lookback + 1; j < e; ++j) {
                    int diff = 0;
                    for (int i = 0; i < n; ++i) diff += traj[e - 1][i] != traj[j - 1][i];
                    worst = std::max(worst, diff / static_cast<double>(n));
                }
                if (worst < delta) want = e;
            }
            MaskHistory h;
            h.capacity = c.lookback;
            int got = -1;
            for (int e = 1; e <= epochs && got < 0; ++e) {
                h.push(bits_mask(traj[e - 1]), e);
                auto det = detect_eb(h, c);
                if (det.found) got = det.epoch;
            }
            CHECK(got == want);
        }
    }

    SUBCASE("detection epoch is monotone in delta") {
        Rng rng(29);
        std::vector<std::vector<std::uint8_t>> traj;
        std::vector<std::uint8_t> cur(16);
        for (auto& b : cur) b = rng.index(2);
        for (int e = 0; e < 25; ++e) {
            int flips = std::max<int>(0, 12 - e);
            for (int f = 0; f < flips; ++f) cur[rng.index(16)] ^= 1;
            traj.push_back(cur);
        }
        int last_epoch = 1 << 20;
        for (double delta : {0.05, 0.2, 0.5, 1.01}) {
            EBConfig c;
            c.delta = delta;
            c.lookback = 5;
            MaskHistory h;
            h.capacity = 5;
            int got = 1 << 20;
            for (int e = 1; e <= 25; ++e) {
                h.push(bits_mask(traj[e - 1]), e);
                auto det = detect_eb(h, c);
                if (det.found) {
                    got = det.epoch;
                    break;
                }
            }
            CHECK(got <= last_epoch);
            last_epoch = got;
        }
    }
}

TEST_CASE("flop accounting worked examples") {
    // a lone 8->4 linear layer: 2*8*4 = 64 flops per sample
    {
        models::GenerativeNetwork net = tiny_net(models::Family::linear_ae, 31);
        std::vector<std::unique_ptr<models::Layer>> layers;
        auto lin = std::make_unique<models::Linear>();
        lin->W.tensor = Tensor::create({4, 8}, true);
        lin->b.tensor = Tensor::create({4}, true);
        layers.push_back(std::move(lin));
        CHECK(component_forward_flops(layers, {1, 8}) == 64);
        CHECK(component_forward_flops(layers, {3, 8}) == 3 * 64);
    }
    // 1->1 conv, 3x3 kernel, stride 1, pad 1 on a 4x4 map: 2*1*1*9*16 = 288
    {
        std::vector<std::unique_ptr<models::Layer>> layers;
        auto conv = std::make_unique<models::Conv2d>();
        conv->W.tensor = Tensor::create({1, 1, 3, 3}, true);
        conv->b.tensor = Tensor::create({1}, true);
        conv->stride = 1;
        conv->pad = 1;
        layers.push_back(std::move(conv));
        CHECK(component_forward_flops(layers, {1, 1, 4, 4}) == 288);
    }
    // batchnorm over (2, 3, 4, 4): 4 flops per element
    {
        std::vector<std::unique_ptr<models::Layer>> layers;
        auto bn = std::make_unique<models::BatchNorm2d>();
        bn->gamma.tensor = Tensor::create({3}, true);
        bn->beta.tensor = Tensor::create({3}, true);
        bn->running_mean.assign(3, 0.0);
        bn->running_var.assign(3, 1.0);
        layers.push_back(std::move(bn));
        CHECK(component_forward_flops(layers, {2, 3, 4, 4}) == 4 * 2 * 3 * 16);
    }
    // additivity over a stack
    {
        std::vector<std::unique_ptr<models::Layer>> stack;
        auto conv = std::make_unique<models::Conv2d>();
        conv->W.tensor = Tensor::create({1, 1, 3, 3}, true);
        conv->b.tensor = Tensor::create({1}, true);
        conv->stride = 1;
        conv->pad = 1;
        stack.push_back(std::move(conv));
        auto bn = std::make_unique<models::BatchNorm2d>();
        bn->gamma.tensor = Tensor::create({1}, true);
        bn->beta.tensor = Tensor::create({1}, true);
        bn->running_mean.assign(1, 0.0);
        bn->running_var.assign(1, 1.0);
        stack.push_back(std::move(bn));
        CHECK(component_forward_flops(stack, {1, 1, 4, 4}) == 288 + 4 * 16);
    }
}

TEST_CASE("ledger composition and mixed precision bytes") {
    auto net = tiny_net(models::Family::dcgan, 37);
    FlopLedger ledger;
    count_flops(net, 8, ledger);
    CHECK(ledger.forward_flops == forward_flops(net, 8));
    CHECK(ledger.backward_flops == 2 * ledger.forward_flops);
    CHECK(ledger.total() == 3 * ledger.forward_flops);
    CHECK(ledger.bytes_moved > 0);

    // mixed precision touches fewer bytes, same flops
    FlopLedger mixed;
    count_flops(net, 8, mixed, Precision::mixed);
    CHECK(mixed.forward_flops == ledger.forward_flops);
    CHECK(mixed.bytes_moved < ledger.bytes_moved);
    CHECK(mixed.bytes_moved > ledger.bytes_moved / 2);  // bn stays full width

    // flops scale linearly-ish with batch for conv/linear-dominated nets
    CHECK(forward_flops(net, 16) > forward_flops(net, 8));
}

TEST_CASE("compression halves flops at r=0.5 on an interior-conv network") {
    auto net = tiny_net(models::Family::conv_ae, 41);
    auto m = channel_mask(net, 0.5);
    auto small = compress(net, m);
    const auto dense = forward_flops(net, 4);
    const auto compressed = forward_flops(small, 4);
    // interior convs lose both input and output channels; boundary layers only
    // one side, so the ratio lands between r^2 and r
    CHECK(compressed < dense * 0.55);
    CHECK(compressed > dense * 0.2);
    CHECK(weight_sparsity_of(net, small) > 0.4);
    CHECK(weight_sparsity_of(net, small) < 0.95);
}

TEST_CASE("compressed forward equals masked forward") {
    auto data = tiny_shapes(8, 43);
    for (models::Family f :
         {models::Family::conv_ae, models::Family::dcgan, models::Family::vae}) {
        CAPTURE(models::family_name(f));
        auto net = tiny_net(f, 47);
        // brief training so gammas move off their init
        models::TrainOptions to;
        to.epochs = 1;
        to.batch_size = 8;
        models::train(net, data, to);

        auto m = channel_mask(net, 0.4);
        auto small = compress(net, m);

        // masked oracle: zero gamma and beta of pruned channels in a clone
        auto masked = net.clone();
        auto bns = masked.batchnorms();
        for (auto& [name, bn] : bns) {
            const auto& bits = m.entries.at(name);
            for (int c = 0; c < bn->channels(); ++c)
                if (!bits[c]) {
                    bn->gamma.tensor->data[c] = 0.0;
                    bn->beta.tensor->data[c] = 0.0;
                }
        }

        Rng rng(53);
        for (int rep = 0; rep < 10; ++rep) {
            TensorPtr x;
            if (models::is_gan(f)) {
                x = Tensor::create({2, net.cfg.latent_dim});
                for (double& v : x->data) v = rng.normal();
            } else {
                x = Tensor::create({2, 1, 16, 16});
                for (double& v : x->data) v = rng.uniform(-1.0, 1.0);
            }
            TensorPtr y_small, y_masked;
            if (models::is_gan(f)) {
                Tape t1, t2;
                y_small = models::run_component(t1, small.a, x, false);
                y_masked = models::run_component(t2, masked.a, x, false);
            } else {
                y_small = models::reconstruct(small, x);
                y_masked = models::reconstruct(masked, x);
            }
            REQUIRE(y_small->shape == y_masked->shape);
            for (std::int64_t i = 0; i < y_small->size(); ++i)
                CHECK(std::abs(y_small->data[i] - y_masked->data[i]) < 1e-10);
        }
    }
}

TEST_CASE("all-ones mask compresses to an identical network") {
    auto net = tiny_net(models::Family::conv_ae, 59);
    ChannelMask m;
    for (auto& [name, bn] : net.batchnorms())
        m.entries[name] = std::vector<std::uint8_t>(bn->channels(), 1);
    auto same = compress(net, m);
    CHECK(same.snapshot() == net.snapshot());
    CHECK(forward_flops(same, 4) == forward_flops(net, 4));
}

TEST_CASE("run_earlybird detects, compresses and accounts") {
    auto data = tiny_shapes(64, 61);
    auto net = tiny_net(models::Family::conv_ae, 67);
    EBRunOptions opt;
    opt.eb.delta = 1.01;  // force detection as soon as the window fills
    opt.eb.lookback = 2;
    opt.eb.ratio = 0.5;
    opt.train.epochs = 5;
    opt.train.batch_size = 16;
    auto rep = run_earlybird(std::move(net), data, opt);
    REQUIRE(rep.detection.found);
    CHECK(rep.detection.epoch == 2);
    CHECK(rep.weight_sparsity > 0.3);
    CHECK(std::isfinite(rep.final_eval_loss));
    CHECK(rep.train_report.loss_a.size() == 5);

    // the post-detection epochs run on the compressed net, so this run is
    // strictly cheaper than the dense ledger at the same epoch budget
    CHECK(rep.ledger.forward_flops < rep.dense_ledger.forward_flops);
    CHECK(rep.ledger.backward_flops == 2 * rep.ledger.forward_flops);
    CHECK(rep.dense_ledger.backward_flops == 2 * rep.dense_ledger.forward_flops);
    CHECK(rep.ledger.bytes_moved < rep.dense_ledger.bytes_moved);
    CHECK(rep.ledger.overhead_flops > 0);
    CHECK(rep.dense_ledger.overhead_flops == 0);

    // no detection -> dense all the way, ledgers agree on compute
    auto net2 = tiny_net(models::Family::conv_ae, 67);
    EBRunOptions strict = opt;
    strict.eb.delta = 0.0;
    auto rep2 = run_earlybird(std::move(net2), data, strict);
    CHECK_FALSE(rep2.detection.found);
    CHECK(rep2.weight_sparsity == 0.0);
    CHECK(rep2.ledger.forward_flops == rep2.dense_ledger.forward_flops);
}

TEST_CASE("mixed precision run moves fewer bytes, same flops") {
    auto data = tiny_shapes(32, 71);
    EBRunOptions opt;
    opt.eb.delta = 0.0;  // keep it dense so ledgers are comparable
    opt.train.epochs = 2;
    opt.train.batch_size = 16;

    auto r32 = run_earlybird(tiny_net(models::Family::conv_ae, 73), data, opt);
    opt.precision = Precision::mixed;
    auto rmx = run_earlybird(tiny_net(models::Family::conv_ae, 73), data, opt);
    CHECK(rmx.ledger.forward_flops == r32.ledger.forward_flops);
    CHECK(rmx.ledger.bytes_moved < r32.ledger.bytes_moved);
}
