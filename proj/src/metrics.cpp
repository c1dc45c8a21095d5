#include "ticketlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>

namespace tl::metrics {

FeatureStats compute_stats(const std::vector<double>& features, int n, int d) {
    if (n < 2) throw ContractError("compute_stats: need at least 2 samples");
    if (static_cast<std::int64_t>(features.size()) != static_cast<std::int64_t>(n) * d)
        throw DimError("compute_stats: feature buffer is not n*d");
    FeatureStats st;
    st.n = n;
    st.d = d;
    st.mu.assign(d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) st.mu[j] += features[i * d + j];
    for (double& v : st.mu) v /= n;

    st.sigma.assign(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            double cj = features[i * d + j] - st.mu[j];
            for (int k = j; k < d; ++k)
                st.sigma[j * d + k] += cj * (features[i * d + k] - st.mu[k]);
        }
    for (int j = 0; j < d; ++j)
        for (int k = j; k < d; ++k) {
            double v = st.sigma[j * d + k] / (n - 1);
            st.sigma[j * d + k] = v;
            st.sigma[k * d + j] = v;  // exact symmetrization
        }
    if (n <= d) {
        st.regularized = true;
        for (int j = 0; j < d; ++j) st.sigma[j * d + j] += 1e-6;
    }
    return st;
}

void jacobi_eigen_sym(const std::vector<double>& a, int n, std::vector<double>& evals,
                      std::vector<double>& vecs) {
    std::vector<double> m = a;
    vecs.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) vecs[i * n + i] = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += m[p * n + q] * m[p * n + q];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = m[p * n + q];
                if (std::abs(apq) < 1e-18) continue;
                double theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double mkp = m[k * n + p], mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for (int k = 0; k < n; ++k) {
                    double mpk = m[p * n + k], mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = vecs[k * n + p], vkq = vecs[k * n + q];
                    vecs[k * n + p] = c * vkp - s * vkq;
                    vecs[k * n + q] = s * vkp + c * vkq;
                }
            }
    }
    evals.resize(n);
    for (int i = 0; i < n; ++i) evals[i] = m[i * n + i];
}

std::vector<double> matrix_sqrt_psd(const std::vector<double>& a, int d) {
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j)
            if (std::abs(a[i * d + j] - a[j * d + i]) > 1e-10)
                throw ContractError("matrix_sqrt_psd: matrix not symmetric");
    std::vector<double> evals, vecs;
    jacobi_eigen_sym(a, d, evals, vecs);
    for (double& v : evals) v = v > 0.0 ? std::sqrt(v) : 0.0;
    // V diag(sqrt(l)) V^T
    std::vector<double> out(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            double s = 0.0;
            for (int k = 0; k < d; ++k) s += vecs[i * d + k] * evals[k] * vecs[j * d + k];
            out[i * d + j] = s;
            out[j * d + i] = s;
        }
    return out;
}

double fid(const FeatureStats& real, const FeatureStats& gen) {
    if (real.d != gen.d) throw ContractError("fid: feature dimensions differ");
    const int d = real.d;
    double dmu = 0.0;
    for (int i = 0; i < d; ++i) {
        double v = real.mu[i] - gen.mu[i];
        dmu += v * v;
    }
    double tr = 0.0;
    for (int i = 0; i < d; ++i) tr += real.sigma[i * d + i] + gen.sigma[i * d + i];

    auto sr = matrix_sqrt_psd(real.sigma, d);
    // M = sr * gen.sigma * sr, symmetrized against roundoff
    std::vector<double> tmp(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            double v = sr[i * d + k];
            if (v == 0.0) continue;
            for (int j = 0; j < d; ++j) tmp[i * d + j] += v * gen.sigma[k * d + j];
        }
    std::vector<double> m(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            double v = tmp[i * d + k];
            if (v == 0.0) continue;
            for (int j = 0; j < d; ++j) m[i * d + j] += v * sr[k * d + j];
        }
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            double v = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = v;
            m[j * d + i] = v;
        }
    auto sm = matrix_sqrt_psd(m, d);
    double tr_sqrt = 0.0;
    for (int i = 0; i < d; ++i) tr_sqrt += sm[i * d + i];

    double v = dmu + tr - 2.0 * tr_sqrt;
    if (v < 0.0 && v > -1e-6) v = 0.0;
    return v;
}

double inception_like_score(const std::vector<double>& probs, int n, int c) {
    if (n < 1 || c < 1) throw ContractError("inception_like_score: empty batch");
    std::vector<double> marginal(c, 0.0);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            double p = probs[i * c + j];
            if (p < 0.0) throw ContractError("inception_like_score: negative probability");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw ContractError("inception_like_score: row " + std::to_string(i) +
                                " does not sum to 1");
        for (int j = 0; j < c; ++j) marginal[j] += probs[i * c + j] / n;
    }
    double kl = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            double p = probs[i * c + j];
            if (p > 0.0) kl += p * (std::log(p) - std::log(marginal[j]));
        }
    return std::exp(kl / n);
}

// ---- feature extractor ----

namespace {

TensorPtr gaussian_param(Rng& rng, Shape shape, double stddev) {
    auto t = Tensor::create(std::move(shape), true);
    for (double& v : t->data) v = rng.normal(0.0, stddev);
    return t;
}

std::unique_ptr<models::Conv2d> make_conv(Rng& rng, const std::string& name, int cin, int cout,
                                          int k, int stride, int pad) {
    auto c = std::make_unique<models::Conv2d>();
    c->name = name;
    c->stride = stride;
    c->pad = pad;
    c->W = {gaussian_param(rng, {cout, cin, k, k}, 0.1), name + ".weight",
            ParamKind::conv_kernel};
    c->b = {Tensor::create({cout}, true), name + ".bias", ParamKind::bias};
    return c;
}

std::unique_ptr<models::Linear> make_linear(Rng& rng, const std::string& name, int in, int out) {
    auto l = std::make_unique<models::Linear>();
    l->name = name;
    l->W = {gaussian_param(rng, {out, in}, 0.1), name + ".weight", ParamKind::linear_weight};
    l->b = {Tensor::create({out}, true), name + ".bias", ParamKind::bias};
    return l;
}

TensorPtr run_layers(Tape& tape, std::vector<std::unique_ptr<models::Layer>>& layers,
                     const TensorPtr& x) {
    TensorPtr t = x;
    for (auto& l : layers) t = l->forward(tape, t, false);
    return t;
}

TensorPtr extractor_features_graph(FeatureExtractor& fx, Tape& tape, const TensorPtr& x) {
    return run_layers(tape, fx.trunk, x);
}

}  // namespace

std::vector<double> FeatureExtractor::features(const TensorPtr& images) {
    const int n = images->shape[0];
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n) * feature_dim);
    for (int start = 0; start < n; start += 128) {
        int bs = std::min(128, n - start);
        auto batch = Tensor::create({bs, images->shape[1], images->shape[2], images->shape[3]});
        std::int64_t item = images->size() / n;
        std::copy_n(images->data.begin() + start * item, bs * item, batch->data.begin());
        Tape tape;
        auto f = extractor_features_graph(*this, tape, batch);
        tape.clear();
        out.insert(out.end(), f->data.begin(), f->data.end());
    }
    return out;
}

std::vector<double> FeatureExtractor::probabilities(const TensorPtr& images) {
    const int n = images->shape[0];
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n) * classes);
    for (int start = 0; start < n; start += 128) {
        int bs = std::min(128, n - start);
        auto batch = Tensor::create({bs, images->shape[1], images->shape[2], images->shape[3]});
        std::int64_t item = images->size() / n;
        std::copy_n(images->data.begin() + start * item, bs * item, batch->data.begin());
        Tape tape;
        auto f = extractor_features_graph(*this, tape, batch);
        auto act = relu(tape, f);
        auto logits = head->forward(tape, act, false);
        tape.clear();
        auto probs = softmax_rows(*logits);
        out.insert(out.end(), probs.begin(), probs.end());
    }
    return out;
}

double FeatureExtractor::accuracy(const TensorPtr& images, const std::vector<int>& labels) {
    const int n = images->shape[0];
    if (static_cast<int>(labels.size()) != n)
        throw ContractError("accuracy: label count does not match images");
    for (int l : labels)
        if (l < 0 || l >= classes)
            throw ContractError("accuracy: label outside the classifier's label space");
    auto probs = probabilities(images);
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        int arg = 0;
        for (int j = 1; j < classes; ++j)
            if (probs[i * classes + j] > probs[i * classes + arg]) arg = j;
        if (arg == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / n;
}

FeatureExtractor train_extractor(const io::Dataset& train, const io::Dataset& test,
                                 std::uint64_t seed, double accuracy_floor, int epochs) {
    if (train.classes < 2) throw ContractError("train_extractor: dataset has no labels");
    FeatureExtractor fx;
    fx.seed = seed;
    fx.classes = train.classes;
    const int c_in = train.images->shape[1];
    const int hw = train.images->shape[2];

    Rng rng(seed * 0x2545f4914f6cdd1dull + 99);
    fx.trunk.push_back(make_conv(rng, "fx.conv1", c_in, 8, 3, 2, 1));
    auto a1 = std::make_unique<models::Act>();
    a1->kind = models::Act::relu;
    fx.trunk.push_back(std::move(a1));
    fx.trunk.push_back(make_conv(rng, "fx.conv2", 8, 16, 3, 2, 1));
    auto a2 = std::make_unique<models::Act>();
    a2->kind = models::Act::relu;
    fx.trunk.push_back(std::move(a2));
    fx.trunk.push_back(std::make_unique<models::Flatten>());
    const int flat = 16 * (hw / 4) * (hw / 4);
    fx.trunk.push_back(make_linear(rng, "fx.fc1", flat, fx.feature_dim));
    fx.head = make_linear(rng, "fx.head", fx.feature_dim, fx.classes);

    std::vector<Parameter*> params;
    for (auto& l : fx.trunk) l->collect(params);
    fx.head->collect(params);

    OptimizerState opt;
    opt.lr = 2e-3;
    const int n = train.images->shape[0];
    const int bs = std::min(32, n);
    const std::int64_t item = train.images->size() / n;
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng.gen);
        for (int start = 0; start + bs <= n; start += bs) {
            auto batch = Tensor::create({bs, c_in, hw, hw});
            std::vector<int> labels(bs);
            for (int i = 0; i < bs; ++i) {
                std::copy_n(train.images->data.begin() + order[start + i] * item, item,
                            batch->data.begin() + i * item);
                labels[i] = train.labels[order[start + i]];
            }
            Tape tape;
            auto f = extractor_features_graph(fx, tape, batch);
            auto act = relu(tape, f);
            auto logits = fx.head->forward(tape, act, false);
            auto loss = softmax_cross_entropy(tape, logits, labels);
            for (Parameter* p : params) p->tensor->zero_grad();
            backward(tape, loss);
            adam_step(params, opt);
        }
    }

    fx.test_accuracy = fx.accuracy(test.images, test.labels);
    if (fx.test_accuracy < accuracy_floor)
        throw NumericError("train_extractor: held-out accuracy " +
                           std::to_string(fx.test_accuracy) + " is under the floor " +
                           std::to_string(accuracy_floor));

    // fingerprint: fold all trained weights so reports can refuse
    // cross-extractor comparisons
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](double v) {
        std::uint64_t bits;
        static_assert(sizeof bits == sizeof v);
        std::memcpy(&bits, &v, sizeof bits);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    for (Parameter* p : params)
        for (double v : p->tensor->data) mix(v);
    char buf[32];
    std::snprintf(buf, sizeof buf, "fx-%016llx", static_cast<unsigned long long>(h));
    fx.fingerprint = buf;
    return fx;
}

double downstream_accuracy(const TensorPtr& images, const std::vector<int>& labels,
                           FeatureExtractor& fx) {
    return fx.accuracy(images, labels);
}

double fid_between(FeatureExtractor& fx, const TensorPtr& real, const TensorPtr& gen) {
    auto fr = fx.features(real);
    auto fg = fx.features(gen);
    auto sr = compute_stats(fr, real->shape[0], fx.feature_dim);
    auto sg = compute_stats(fg, gen->shape[0], fx.feature_dim);
    return fid(sr, sg);
}

int early_stop_iteration(const std::vector<double>& curve, int patience, double min_delta) {
    if (curve.empty()) throw ContractError("early_stop_iteration: empty curve");
    double best = std::numeric_limits<double>::infinity();
    int streak = 0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        if (best - curve[i] > min_delta) {
            best = curve[i];
            streak = 0;
        } else if (++streak >= patience) {
            return static_cast<int>(i);
        }
    }
    return static_cast<int>(curve.size());
}

}  // namespace tl::metrics
