#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ticketlab/models.hpp"

using namespace tl;
using namespace tl::models;

namespace {

io::DatasetPair small_shapes(int n_train = 64, int n_test = 32, std::uint64_t seed = 3) {
    io::DatasetSpec spec;
    spec.kind = io::DatasetKind::shapes16;
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec.seed = seed;
    return io::materialize(spec);
}

const std::vector<Family> kAllFamilies = {
    Family::linear_ae, Family::conv_ae, Family::vae,   Family::beta_vae, Family::resnet_vae,
    Family::dcgan,     Family::sngan,   Family::wgan,  Family::resnet_gan,
};

ModelConfig tiny_config(Family f) {
    ModelConfig cfg = default_config(f);
    cfg.base_channels = 8;
    cfg.latent_dim = 16;
    cfg.image_size = 16;
    return cfg;
}

// largest singular value of a (rows, rest...) matrix by power iteration on W^T W
double sigma_oracle(const Tensor& W) {
    const int rows = W.shape[0];
    const int cols = static_cast<int>(W.size()) / rows;
    std::vector<double> v(cols, 1.0 / std::sqrt(cols)), u(rows);
    double sigma = 0.0;
    for (int it = 0; it < 500; ++it) {
        for (int r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int c = 0; c < cols; ++c) s += W.data[r * cols + c] * v[c];
            u[r] = s;
        }
        double un = 0.0;
        for (double x : u) un += x * x;
        un = std::sqrt(un);
        if (un == 0.0) return 0.0;
        for (double& x : u) x /= un;
        for (int c = 0; c < cols; ++c) {
            double s = 0.0;
            for (int r = 0; r < rows; ++r) s += W.data[r * cols + c] * u[r];
            v[c] = s;
        }
        double vn = 0.0;
        for (double x : v) vn += x * x;
        sigma = std::sqrt(vn);
        if (sigma == 0.0) return 0.0;
        for (double& x : v) x /= sigma;
    }
    return sigma;
}

}  // namespace

TEST_CASE("family names round trip") {
    for (Family f : kAllFamilies) {
        CHECK(family_from_name(family_name(f)) == f);
    }
    CHECK_THROWS_AS(family_from_name("mystery"), ContractError);
    CHECK(is_gan(Family::wgan));
    CHECK(is_vae(Family::beta_vae));
    CHECK(is_ae(Family::linear_ae));
    CHECK_FALSE(is_gan(Family::vae));
}

TEST_CASE("build determinism and clone fidelity") {
    for (Family f : kAllFamilies) {
        CAPTURE(family_name(f));
        auto cfg = tiny_config(f);
        auto n1 = build_model(cfg, 11);
        auto n2 = build_model(cfg, 11);
        auto n3 = build_model(cfg, 12);
        auto s1 = n1.snapshot();
        CHECK(s1 == n2.snapshot());
        CHECK(s1 != n3.snapshot());
        auto c = n1.clone();
        CHECK(c.snapshot() == s1);
        // clone is independent storage
        c.params()[0]->tensor->data[0] += 1.0;
        CHECK(n1.snapshot() == s1);
        CHECK(n1.param_count() > 0);
    }
}

TEST_CASE("generation and reconstruction shapes") {
    auto data = small_shapes(16, 8);
    Rng rng(7);
    for (Family f : kAllFamilies) {
        CAPTURE(family_name(f));
        auto cfg = tiny_config(f);
        auto net = build_model(cfg, 21);
        if (is_ae(f) || is_vae(f)) {
            auto rec = reconstruct(net, data.test.images);
            CHECK(rec->shape == data.test.images->shape);
        }
        if (is_gan(f) || is_vae(f)) {
            auto samples = generate(net, 5, rng);
            CHECK(samples->shape == Shape({5, 1, 16, 16}));
            for (double v : samples->data) {
                CHECK(v >= -1.0);
                CHECK(v <= 1.0);
            }
        } else {
            CHECK_THROWS_AS(generate(net, 5, rng), ContractError);
        }
        if (is_gan(f)) {
            CHECK_THROWS_AS(reconstruct(net, data.test.images), ContractError);
        }
    }
}

TEST_CASE("snapshot restore round trip") {
    auto cfg = tiny_config(Family::vae);
    auto net = build_model(cfg, 31);
    auto before = net.snapshot();
    for (auto* p : net.params())
        for (double& v : p->tensor->data) v += 0.5;
    CHECK(net.snapshot() != before);
    net.restore(before);
    CHECK(net.snapshot() == before);
    // restore with a missing key fails
    auto broken = before;
    broken.erase(broken.begin());
    CHECK_THROWS_AS(net.restore(broken), ContractError);
}

TEST_CASE("component parameter split covers everything once") {
    for (Family f : kAllFamilies) {
        CAPTURE(family_name(f));
        auto net = build_model(tiny_config(f), 41);
        auto pa = net.params_component('a');
        auto pb = net.params_component('b');
        auto all = net.params();
        CHECK(pa.size() + pb.size() == all.size());
        std::set<Parameter*> seen;
        for (auto* p : pa) seen.insert(p);
        for (auto* p : pb) seen.insert(p);
        CHECK(seen.size() == all.size());
        // names are unique and map back to the same objects
        auto pm = net.param_map();
        CHECK(pm.size() == all.size());
        for (auto* p : all) CHECK(pm.at(p->name) == p);
    }
}

TEST_CASE("training reduces loss and produces full curves") {
    auto data = small_shapes();
    TrainOptions opt;
    opt.epochs = 4;
    opt.batch_size = 16;
    opt.seed = 5;

    SUBCASE("linear autoencoder beats a constant predictor") {
        io::DatasetSpec spec;
        spec.kind = io::DatasetKind::blobs2d;
        spec.n_train = 128;
        spec.n_test = 64;
        auto blobs = io::materialize(spec);
        auto cfg = tiny_config(Family::linear_ae);
        cfg.input_dim = 2;
        auto net = build_model(cfg, 51);
        opt.epochs = 30;
        auto rep = train(net, blobs.train, opt);
        CHECK(rep.loss_a.size() == 30);
        CHECK(rep.loss_a.back() < rep.loss_a.front());
        // mean predictor baseline on the test set
        double n = blobs.test.images->size();
        double mu = 0.0;
        for (double v : blobs.test.images->data) mu += v;
        mu /= n;
        double var = 0.0;
        for (double v : blobs.test.images->data) var += (v - mu) * (v - mu);
        var /= n;
        CHECK(eval_loss(net, blobs.test) < var);
    }

    SUBCASE("conv families train without blowing up") {
        for (Family f : {Family::conv_ae, Family::vae, Family::dcgan}) {
            CAPTURE(family_name(f));
            auto net = build_model(tiny_config(f), 52);
            auto rep = train(net, data.train, opt);
            CHECK(rep.loss_a.size() == 4);
            CHECK(rep.loss_b.size() == 4);
            for (double l : rep.loss_a) CHECK(std::isfinite(l));
            for (double l : rep.loss_b) CHECK(std::isfinite(l));
            if (!is_gan(f)) CHECK(rep.loss_b == rep.loss_a);  // shared objective
            CHECK(rep.flops_per_epoch.size() == 4);
            for (std::size_t e = 1; e < rep.flops_per_epoch.size(); ++e)
                CHECK(rep.flops_per_epoch[e] > rep.flops_per_epoch[e - 1]);
            CHECK(rep.final_iteration == 4 * iterations_per_epoch(data.train, 16));
        }
    }
}

TEST_CASE("vae loss decomposition matches the reported totals") {
    auto data = small_shapes(32, 16);
    auto cfg = tiny_config(Family::beta_vae);
    cfg.beta = 1.3;
    auto net = build_model(cfg, 61);
    TrainOptions opt;
    opt.epochs = 3;
    opt.batch_size = 16;
    auto rep = train(net, data.train, opt);
    REQUIRE(rep.recon_curve.size() == 3);
    REQUIRE(rep.kl_curve.size() == 3);
    for (int e = 0; e < 3; ++e) {
        CHECK(rep.loss_a[e] ==
              doctest::Approx(rep.recon_curve[e] + cfg.beta * rep.kl_curve[e]).epsilon(1e-10));
        CHECK(rep.kl_curve[e] >= 0.0);
    }
}

TEST_CASE("reparameterization is an unbiased sampler") {
    Tape tape;
    auto mu = Tensor::from_data({1, 4}, {0.5, -1.0, 2.0, 0.0});
    auto logvar = Tensor::from_data({1, 4}, {0.0, -2.0, 1.0, 0.5});
    Rng rng(77);
    const int reps = 20000;
    std::vector<double> mean(4, 0.0), m2(4, 0.0);
    for (int r = 0; r < reps; ++r) {
        Tape t;
        auto z = reparameterize(t, mu, logvar, rng);
        for (int i = 0; i < 4; ++i) {
            mean[i] += z->data[i];
            m2[i] += z->data[i] * z->data[i];
        }
    }
    for (int i = 0; i < 4; ++i) {
        mean[i] /= reps;
        double var = m2[i] / reps - mean[i] * mean[i];
        double want_var = std::exp(logvar->data[i]);
        CHECK(mean[i] == doctest::Approx(mu->data[i]).epsilon(0.05));
        CHECK(var == doctest::Approx(want_var).epsilon(0.08));
    }
}

TEST_CASE("masks stay enforced through optimization") {
    auto data = small_shapes(32, 16);
    for (Family f : {Family::conv_ae, Family::dcgan}) {
        CAPTURE(family_name(f));
        auto net = build_model(tiny_config(f), 71);
        MaskMap mask;
        Rng rng(72);
        for (auto* p : net.params()) {
            if (p->tensor->size() < 8) continue;  // only mask weight-shaped params
            std::vector<std::uint8_t> bits(p->tensor->size(), 1);
            for (auto& b : bits) b = rng.index(2) ? 1 : 0;
            mask[p->name] = bits;
        }
        TrainOptions opt;
        opt.epochs = 2;
        opt.batch_size = 16;
        opt.mask = &mask;
        apply_mask(net, mask);
        train(net, data.train, opt);
        for (auto* p : net.params()) {
            auto it = mask.find(p->name);
            if (it == mask.end()) continue;
            for (std::size_t i = 0; i < it->second.size(); ++i)
                if (!it->second[i]) CHECK(p->tensor->data[i] == 0.0);
        }
    }
}

TEST_CASE("wgan weight clipping keeps the critic bounded") {
    auto data = small_shapes(32, 16);
    auto cfg = tiny_config(Family::wgan);
    REQUIRE(cfg.wgan_clip > 0.0);
    auto net = build_model(cfg, 81);
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch_size = 16;
    train(net, data.train, opt);
    for (auto* p : net.params_component('b'))
        for (double v : p->tensor->data) {
            CHECK(v <= cfg.wgan_clip + 1e-12);
            CHECK(v >= -cfg.wgan_clip - 1e-12);
        }
}

TEST_CASE("spectral normalization keeps discriminator layers near unit norm") {
    auto data = small_shapes(32, 16);
    auto cfg = tiny_config(Family::sngan);
    auto net = build_model(cfg, 91);
    TrainOptions opt;
    opt.epochs = 3;
    opt.batch_size = 16;
    train(net, data.train, opt);
    // after training, the effective (normalized) weight has sigma ~ 1
    int checked = 0;
    for (auto& layer : net.b) {
        auto* lin = dynamic_cast<Linear*>(layer.get());
        auto* conv = dynamic_cast<Conv2d*>(layer.get());
        Parameter* W = lin && lin->spectral ? &lin->W : (conv && conv->spectral ? &conv->W : nullptr);
        SpectralState* sn = lin && lin->spectral ? &lin->sn : (conv && conv->spectral ? &conv->sn : nullptr);
        if (!W) continue;
        Tape tape;
        SpectralState st = *sn;
        auto wn = spectral_normalize(tape, W->tensor, st, 3);
        double est = sigma_oracle(*wn);
        CHECK(est == doctest::Approx(1.0).epsilon(0.1));
        checked++;
    }
    CHECK(checked >= 2);
}

TEST_CASE("checkpoint_at captures init and mid-training weights") {
    auto data = small_shapes(32, 16);
    auto net = build_model(tiny_config(Family::conv_ae), 101);
    auto init = net.snapshot();
    const auto per_epoch = iterations_per_epoch(data.train, 16);
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch_size = 16;
    opt.checkpoint_at = {0, per_epoch};
    auto rep = train(net, data.train, opt);
    REQUIRE(rep.checkpoints.count(0) == 1);
    REQUIRE(rep.checkpoints.count(per_epoch) == 1);
    CHECK(rep.checkpoints.at(0) == init);
    CHECK(rep.checkpoints.at(per_epoch) != init);
    CHECK(rep.checkpoints.at(per_epoch) != net.snapshot());
}

TEST_CASE("training is deterministic in the seed") {
    auto data = small_shapes(32, 16);
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch_size = 16;
    opt.seed = 9;
    auto n1 = build_model(tiny_config(Family::dcgan), 111);
    auto n2 = build_model(tiny_config(Family::dcgan), 111);
    auto r1 = train(n1, data.train, opt);
    auto r2 = train(n2, data.train, opt);
    CHECK(n1.snapshot() == n2.snapshot());
    CHECK(r1.loss_a == r2.loss_a);
    CHECK(r1.loss_b == r2.loss_b);
    opt.seed = 10;
    auto n3 = build_model(tiny_config(Family::dcgan), 111);
    auto r3 = train(n3, data.train, opt);
    CHECK(n1.snapshot() != n3.snapshot());
}

TEST_CASE("channel group metadata is structurally sound") {
    for (Family f : kAllFamilies) {
        CAPTURE(family_name(f));
        auto net = build_model(tiny_config(f), 121);
        auto pm = net.param_map();
        std::map<std::string, BatchNorm2d*> bns;
        for (auto& [name, bn] : net.batchnorms()) bns[name] = bn;
        for (const auto& g : net.channel_groups) {
            REQUIRE(!g.bn_names.empty());
            CHECK(g.channels > 0);
            for (const auto& name : g.bn_names) {
                REQUIRE(bns.count(name));
                CHECK(bns[name]->channels() == g.channels);
            }
            for (const auto& s : g.producers) {
                REQUIRE(pm.count(s.param));
                auto& shape = pm[s.param]->tensor->shape;
                REQUIRE(s.axis < static_cast<int>(shape.size()));
                CHECK(shape[s.axis] == g.channels * s.group);
            }
            for (const auto& s : g.consumers) {
                REQUIRE(pm.count(s.param));
                auto& shape = pm[s.param]->tensor->shape;
                REQUIRE(s.axis < static_cast<int>(shape.size()));
                CHECK(shape[s.axis] == g.channels * s.group);
            }
        }
    }
}

TEST_CASE("empty dataset is rejected") {
    auto net = build_model(tiny_config(Family::conv_ae), 131);
    io::Dataset empty;
    empty.images = Tensor::create({0, 1, 16, 16});
    TrainOptions opt;
    CHECK_THROWS_AS(train(net, empty, opt), ContractError);
}
