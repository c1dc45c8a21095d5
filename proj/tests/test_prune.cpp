#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "ticketlab/prune.hpp"

using namespace tl;
using namespace tl::prune;

namespace {

io::Dataset tiny_shapes(int n, std::uint64_t seed = 3) {
    io::DatasetSpec spec;
    spec.kind = io::DatasetKind::shapes16;
    spec.n_train = n;
    spec.n_test = n;
    spec.seed = seed;
    return io::materialize(spec).train;
}

models::GenerativeNetwork tiny_net(models::Family f = models::Family::conv_ae,
                                   std::uint64_t seed = 11) {
    auto cfg = models::default_config(f);
    cfg.base_channels = 8;
    cfg.latent_dim = 16;
    return models::build_model(cfg, seed);
}

std::int64_t zeros_in(const models::NamedWeights& w, const Mask& mask) {
    std::int64_t z = 0;
    for (const auto& [name, bits] : mask.entries) {
        const auto& arr = w.at(name);
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (!bits[i] && arr[i] == 0.0) ++z;
    }
    return z;
}

}  // namespace

TEST_CASE("scope names round trip") {
    for (Scope s : {Scope::both_components, Scope::component_a_only, Scope::component_b_only})
        CHECK(scope_from_name(scope_name(s)) == s);
    CHECK_THROWS_AS(scope_from_name("everything"), ContractError);
}

TEST_CASE("iterative schedule hits 1 - 0.8^k exactly") {
    auto net = tiny_net();
    Mask mask = full_mask(net, Scope::both_components);
    const double total = static_cast<double>(mask.total());
    CHECK(mask.sparsity() == 0.0);
    for (int k = 1; k <= 20; ++k) {
        const double want = 1.0 - std::pow(0.8, k);
        mask = prune_to_sparsity(net, mask, want);
        CHECK(std::abs(mask.sparsity() - want) <= 1.0 / total);
        if (k == 10) CHECK(mask.sparsity() == doctest::Approx(0.8926).epsilon(0.001));
        if (k == 20) CHECK(mask.sparsity() == doctest::Approx(0.98847).epsilon(0.001));
    }
}

TEST_CASE("magnitude ranking worked example with ties") {
    // plant known magnitudes in a linear autoencoder and check exactly which
    // entries are cut, including the (name, index) tie rule
    auto cfg = models::default_config(models::Family::linear_ae);
    auto net = models::build_model(cfg, 1);
    auto pm = net.param_map();
    Mask dense = full_mask(net, Scope::both_components);
    REQUIRE(dense.entries.size() >= 2);

    // all weights large except a planted band of small, partially tied values
    for (auto& [name, bits] : dense.entries) {
        auto& t = *pm.at(name)->tensor;
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = 5.0 + (i % 7) * 0.1;
    }
    const std::string first = dense.entries.begin()->first;
    const std::string second = std::next(dense.entries.begin())->first;
    // ties at |0.5|: first-name entries must be pruned before second-name ones
    pm.at(first)->tensor->data[3] = 0.5;
    pm.at(first)->tensor->data[9] = -0.5;
    pm.at(second)->tensor->data[0] = 0.5;
    pm.at(second)->tensor->data[1] = 0.1;

    const std::int64_t total = dense.total();
    const double p = 3.0 / static_cast<double>(total);
    Mask pruned = global_magnitude_prune(net, dense, p);
    CHECK(pruned.kept() == total - 3);
    CHECK(pruned.entries.at(second)[1] == 0);  // smallest magnitude
    CHECK(pruned.entries.at(first)[3] == 0);   // tie, earlier name wins
    CHECK(pruned.entries.at(first)[9] == 0);   // tie, earlier name, later index
    CHECK(pruned.entries.at(second)[0] == 1);  // tie survivor

    // index tie rule inside one parameter: plant two more ties and cut one
    Mask again = global_magnitude_prune(net, pruned, 1.0 / static_cast<double>(total - 3));
    CHECK(again.entries.at(second)[0] == 0);  // now the smallest survivor
}

TEST_CASE("pruning properties over random repetitions") {
    for (int rep = 0; rep < 20; ++rep) {
        auto net = tiny_net(models::Family::conv_ae, 200 + rep);
        Mask m0 = full_mask(net, Scope::both_components);
        Mask m1 = global_magnitude_prune(net, m0, 0.3);
        Mask m2 = global_magnitude_prune(net, m1, 0.3);

        // exact counts: floor(p * survivors) newly pruned
        CHECK(m1.kept() == m0.kept() - static_cast<std::int64_t>(0.3 * m0.kept()));
        CHECK(m2.kept() == m1.kept() - static_cast<std::int64_t>(0.3 * m1.kept()));

        // monotone: pruned entries never come back
        for (const auto& [name, bits] : m1.entries)
            for (std::size_t i = 0; i < bits.size(); ++i)
                if (!bits[i]) CHECK(m2.entries.at(name)[i] == 0);

        // scale invariance: multiplying all weights by a constant keeps the mask
        for (auto* p : net.params())
            for (double& v : p->tensor->data) v *= 3.7;
        Mask m1s = global_magnitude_prune(net, m0, 0.3);
        CHECK(m1s.entries == m1.entries);

        // prune_to_sparsity agrees with the same global ranking
        Mask direct = prune_to_sparsity(net, m0, m2.sparsity());
        CHECK(direct.entries == m2.entries);
    }
}

TEST_CASE("component scope restricts the mask and the sparsity basis") {
    auto net = tiny_net(models::Family::dcgan, 17);
    Mask ma = full_mask(net, Scope::component_a_only);
    Mask mboth = full_mask(net, Scope::both_components);
    CHECK(ma.total() < mboth.total());
    for (const auto& [name, bits] : ma.entries) CHECK(mboth.entries.count(name) == 1);

    Mask pruned = global_magnitude_prune(net, ma, 0.5);
    CHECK(pruned.sparsity() == doctest::Approx(0.5).epsilon(0.01));
    // against the whole network the same cut looks milder
    CHECK(full_network_sparsity(net, pruned) < pruned.sparsity());
    CHECK(full_network_sparsity(net, pruned) ==
          doctest::Approx(0.5 * ma.total() / static_cast<double>(mboth.total())).epsilon(1e-9));
}

TEST_CASE("imp rounds rewind faithfully and keep masks enforced") {
    auto data = tiny_shapes(32);
    auto net = tiny_net(models::Family::conv_ae, 23);
    ImpOptions opt;
    opt.epochs = 2;
    opt.batch_size = 16;
    opt.seed = 4;
    opt.schedule.rounds = 2;
    opt.schedule.per_round_fraction = 0.2;
    auto rounds = run_imp(net, data, data, opt);
    REQUIRE(rounds.size() == 3);  // dense + 2 pruned rounds

    // dense round: all-ones mask, sparsity 0
    CHECK(rounds[0].ticket.sparsity == 0.0);
    CHECK(rounds[0].ticket.mask.kept() == rounds[0].ticket.mask.total());

    // rewind point is the end of epoch 1 by default
    const auto per_epoch = models::iterations_per_epoch(data, 16);
    CHECK(rounds[1].ticket.rewind_iteration == per_epoch);

    // every pruned round shares the same rewind weights (bit-exact)
    CHECK(rounds[1].ticket.rewind_weights == rounds[2].ticket.rewind_weights);

    // schedule sparsities
    CHECK(rounds[1].ticket.sparsity == doctest::Approx(0.2).epsilon(0.01));
    CHECK(rounds[2].ticket.sparsity == doctest::Approx(0.36).epsilon(0.01));

    // masked weights are exactly zero in the trained result
    for (int k = 1; k <= 2; ++k) {
        const auto& mask = rounds[k].ticket.mask;
        std::int64_t pruned_bits = mask.total() - mask.kept();
        CHECK(zeros_in(rounds[k].final_weights, mask) == pruned_bits);
    }

    // round 2 mask is ranked on round 1's trained weights: recompute by hand
    net.restore(rounds[1].final_weights);
    Mask want = prune_to_sparsity(net, rounds[1].ticket.mask, 1.0 - 0.8 * 0.8);
    CHECK(want.entries == rounds[2].ticket.mask.entries);
    CHECK(std::isfinite(rounds[2].eval_loss));
}

TEST_CASE("one-shot round 1 equals iterative round 1") {
    auto data = tiny_shapes(32, 5);
    ImpOptions opt;
    opt.epochs = 2;
    opt.batch_size = 16;
    opt.seed = 6;
    opt.schedule.rounds = 1;

    auto net1 = tiny_net(models::Family::conv_ae, 29);
    auto rounds = run_imp(net1, data, data, opt);

    auto net2 = tiny_net(models::Family::conv_ae, 29);
    auto shot = one_shot_prune(net2, data, data, opt, 0.2);

    CHECK(shot.ticket.mask.entries == rounds[1].ticket.mask.entries);
    CHECK(shot.ticket.rewind_weights == rounds[1].ticket.rewind_weights);
    CHECK(shot.final_weights == rounds[1].final_weights);
}

TEST_CASE("random ticket keeps the mask but redraws the init") {
    auto data = tiny_shapes(32, 7);
    auto net = tiny_net(models::Family::conv_ae, 31);
    ImpOptions opt;
    opt.epochs = 1;
    opt.batch_size = 16;
    opt.schedule.rounds = 1;
    auto rounds = run_imp(net, data, data, opt);
    auto rt = random_ticket(rounds[1].ticket, net.cfg, 999);
    CHECK(rt.mask.entries == rounds[1].ticket.mask.entries);
    CHECK(rt.rewind_iteration == 0);
    CHECK(rt.rewind_weights != rounds[1].ticket.rewind_weights);
    // two different seeds give different draws; same seed repeats
    auto rt2 = random_ticket(rounds[1].ticket, net.cfg, 999);
    CHECK(rt2.rewind_weights == rt.rewind_weights);
    auto rt3 = random_ticket(rounds[1].ticket, net.cfg, 1000);
    CHECK(rt3.rewind_weights != rt.rewind_weights);
}

TEST_CASE("rewind iteration 0 rewinds to the untouched init") {
    auto data = tiny_shapes(32, 9);
    auto net = tiny_net(models::Family::conv_ae, 37);
    auto init = net.snapshot();
    ImpOptions opt;
    opt.epochs = 1;
    opt.batch_size = 16;
    opt.schedule.rounds = 1;
    opt.schedule.rewind_iteration = 0;
    auto rounds = run_imp(net, data, data, opt);
    CHECK(rounds[1].ticket.rewind_iteration == 0);
    CHECK(rounds[1].ticket.rewind_weights == init);
}

TEST_CASE("ticket transfer between structurally identical components") {
    auto data = tiny_shapes(32, 11);
    // VAE decoder and DCGAN generator share geometry by design
    auto vcfg = models::default_config(models::Family::vae);
    vcfg.base_channels = 8;
    vcfg.latent_dim = 16;
    auto vae = models::build_model(vcfg, 41);
    ImpOptions opt;
    opt.epochs = 1;
    opt.batch_size = 16;
    opt.schedule.rounds = 2;
    opt.scope = Scope::component_b_only;
    auto rounds = run_imp(vae, data, data, opt);
    const auto& src = rounds[2].ticket;

    auto gcfg = models::default_config(models::Family::dcgan);
    gcfg.base_channels = 8;
    gcfg.latent_dim = 16;
    auto gan = models::build_model(gcfg, 43);

    auto tt = transfer_mask(src, 'b', gan, 'a', true);
    CHECK(tt.mask.scope == Scope::component_a_only);
    CHECK(tt.mask.total() == src.mask.total());
    CHECK(tt.mask.kept() == src.mask.kept());
    CHECK(!tt.rewind_weights.empty());

    // bit patterns agree under the name-order alignment
    std::vector<const std::vector<std::uint8_t>*> sb, tb;
    for (const auto& [n, bits] : src.mask.entries) sb.push_back(&bits);
    for (const auto& [n, bits] : tt.mask.entries) tb.push_back(&bits);
    REQUIRE(sb.size() == tb.size());
    for (std::size_t i = 0; i < sb.size(); ++i) CHECK(*sb[i] == *tb[i]);

    // carried weights match the source rewind values
    std::vector<const std::vector<double>*> sw, tw;
    auto src_names = src.mask.entries;
    for (const auto& [n, bits] : src.mask.entries) sw.push_back(&src.rewind_weights.at(n));
    for (const auto& [n, bits] : tt.mask.entries) tw.push_back(&tt.rewind_weights.at(n));
    for (std::size_t i = 0; i < sw.size(); ++i) CHECK(*sw[i] == *tw[i]);

    // mask-only transfer carries no weights
    auto tm = transfer_mask(src, 'b', gan, 'a', false);
    CHECK(tm.rewind_weights.empty());

    // geometry mismatch is rejected
    auto bad_cfg = gcfg;
    bad_cfg.base_channels = 16;
    auto bad = models::build_model(bad_cfg, 47);
    CHECK_THROWS_AS(transfer_mask(src, 'b', bad, 'a', true), ContractError);
}

TEST_CASE("train_ticket restores rewind weights before training") {
    auto data = tiny_shapes(32, 13);
    auto net = tiny_net(models::Family::conv_ae, 53);
    ImpOptions opt;
    opt.epochs = 1;
    opt.batch_size = 16;
    opt.schedule.rounds = 1;
    auto rounds = run_imp(net, data, data, opt);
    // retraining the same ticket reproduces the same final weights
    auto again = train_ticket(net, rounds[1].ticket, data, data, opt);
    CHECK(again.final_weights == rounds[1].final_weights);
    CHECK(again.eval_loss == rounds[1].eval_loss);
}

TEST_CASE("finite-difference hessian-gradient product on a known quadratic") {
    // loss(w) = mean(a * w * w): g = 2 a w / n, H = diag(2 a / n), Hg = 4 a^2 w / n^2
    const int n = 6;
    std::vector<double> a{1.0, 2.0, 0.5, 3.0, 1.5, 2.5};
    std::vector<double> w0{0.3, -0.7, 1.1, 0.4, -0.2, 0.9};
    Parameter p;
    p.tensor = Tensor::from_data({1, n}, w0, true);
    p.name = "w";
    p.kind = ParamKind::linear_weight;
    std::vector<Parameter*> params{&p};
    auto coeff = Tensor::from_data({1, n}, a);
    LossFn loss = [&](Tape& tape) {
        auto ww = mul(tape, p.tensor, p.tensor);
        auto aw = mul(tape, ww, coeff);
        return mean_op(tape, aw);
    };
    auto g = gradients_of(params, loss);
    REQUIRE(g.size() == 1);
    for (int i = 0; i < n; ++i)
        CHECK(g[0][i] == doctest::Approx(2.0 * a[i] * w0[i] / n).epsilon(1e-10));
    // gradients_of must not disturb the weights
    CHECK(p.tensor->data == w0);

    auto hg = hessian_grad_product(params, loss);
    REQUIRE(hg.size() == 1);
    for (int i = 0; i < n; ++i)
        CHECK(hg[0][i] == doctest::Approx(4.0 * a[i] * a[i] * w0[i] / (n * n)).epsilon(1e-3));
    CHECK(p.tensor->data == w0);
}

TEST_CASE("snip keeps the largest saliencies, grasp drops the largest scores") {
    auto data = tiny_shapes(32, 15);
    for (models::Family f : {models::Family::conv_ae, models::Family::dcgan}) {
        CAPTURE(models::family_name(f));
        auto net = tiny_net(f, 61);
        auto batch = Tensor::from_data(
            {16, 1, 16, 16},
            std::vector<double>(data.images->data.begin(), data.images->data.begin() + 16 * 256));
        Mask ms = snip_prune(net, batch, 0.5, Scope::both_components, 3);
        Mask mg = grasp_prune(net, batch, 0.5, Scope::both_components, 3);
        for (Mask* m : {&ms, &mg}) {
            CHECK(m->sparsity() == doctest::Approx(0.5).epsilon(0.01));
            CHECK(m->total() == full_mask(net, Scope::both_components).total());
        }
        // the two criteria should not coincide
        CHECK(ms.entries != mg.entries);
        // determinism
        Mask ms2 = snip_prune(net, batch, 0.5, Scope::both_components, 3);
        CHECK(ms2.entries == ms.entries);
    }
}

TEST_CASE("snip saliency ordering on a planted linear problem") {
    // single linear layer, quadratic loss: saliency |g*w| is computable by hand
    auto cfg = models::default_config(models::Family::linear_ae);
    cfg.input_dim = 4;
    cfg.latent_dim = 2;
    auto net = models::build_model(cfg, 71);
    auto batch = Tensor::from_data({2, 1, 1, 4}, {0.5, -0.3, 0.8, 0.1, -0.4, 0.6, 0.2, -0.9});

    Mask m = snip_prune(net, batch, 0.5, Scope::both_components, 0);
    // brute force: compute |dL/dw * w| and verify the kept set is the top half
    auto params = net.params();
    std::vector<Parameter*> prunables;
    for (auto* p : params)
        if (prunable(p->kind)) prunables.push_back(p);
    LossFn loss = [&](Tape& tape) {
        auto flat = reshape(tape, batch, {2, 4});
        auto z = models::run_component(tape, net.a, flat, true);
        auto xh = models::run_component(tape, net.b, z, true);
        return mse_loss(tape, xh, flat);
    };
    auto grads = gradients_of(prunables, loss);
    std::vector<std::pair<double, std::pair<std::string, int>>> scored;
    for (std::size_t pi = 0; pi < prunables.size(); ++pi)
        for (std::size_t i = 0; i < grads[pi].size(); ++i)
            scored.push_back({std::abs(grads[pi][i] * prunables[pi]->tensor->data[i]),
                              {prunables[pi]->name, static_cast<int>(i)}});
    std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
        if (x.first != y.first) return x.first > y.first;
        return x.second < y.second;
    });
    const std::int64_t keep = m.kept();
    std::set<std::pair<std::string, int>> top;
    for (std::int64_t i = 0; i < keep; ++i) top.insert(scored[i].second);
    for (const auto& [name, bits] : m.entries)
        for (std::size_t i = 0; i < bits.size(); ++i)
            CHECK(static_cast<bool>(bits[i]) == (top.count({name, static_cast<int>(i)}) > 0));
}

TEST_CASE("fully pruned layers raise a warning") {
    auto net = tiny_net(models::Family::conv_ae, 81);
    Mask mask = full_mask(net, Scope::both_components);
    Mask extreme = prune_to_sparsity(net, mask, 0.999);
    CHECK(!extreme.warnings.empty());
    Mask mild = prune_to_sparsity(net, mask, 0.2);
    CHECK(mild.warnings.empty());
}

TEST_CASE("mask summary mentions every layer") {
    auto net = tiny_net(models::Family::conv_ae, 91);
    Mask mask = global_magnitude_prune(net, full_mask(net, Scope::both_components), 0.4);
    auto text = mask_summary(mask);
    for (const auto& [name, bits] : mask.entries)
        CHECK(text.find(name) != std::string::npos);
}
