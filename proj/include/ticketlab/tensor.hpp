#pragma once

// Dense double-precision tensors with reverse-mode autodiff on an explicit
// tape, plus the Adam optimizer and spectral normalization. Everything the
// model zoo trains with lives here.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tl {

using Shape = std::vector<int>;

struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until touched by backward

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { grad.assign(data.size(), 0.0); }

    static TensorPtr create(Shape shape, bool requires_grad = false);
    static TensorPtr from_data(Shape shape, std::vector<double> values,
                               bool requires_grad = false);
    static TensorPtr scalar(double v, bool requires_grad = false);
};

// Ordered record of executed ops; replayed in reverse by backward().
class Tape {
public:
    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }
    void replay_backward();

private:
    std::vector<std::function<void()>> steps_;
};

// Deterministic RNG shared by init, data generation and sampling.
struct Rng {
    std::mt19937_64 gen;
    explicit Rng(std::uint64_t seed) : gen(seed) {}
    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen);
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen);
    }
    std::int64_t index(std::int64_t n) {
        std::uniform_int_distribution<std::int64_t> d(0, n - 1);
        return d(gen);
    }
};

enum class OpKind {
    matmul, conv2d, conv_transpose2d, batchnorm2d, relu, leaky_relu,
    tanh, sigmoid, add, reshape, mse_loss, bce_with_logits_loss,
    gaussian_kl_loss, mean,
};

struct OpAttrs {
    int stride = 1;
    int pad = 0;
    double slope = 0.2;       // leaky_relu
    double eps = 1e-5;        // batchnorm
    double momentum = 0.1;    // batchnorm running stats
    double beta = 1.0;        // gaussian_kl_loss weight
    bool training = true;
    Shape target_shape;       // reshape
};

// ---- typed ops (the real API; forward_op dispatches onto these) ----
TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr conv2d(Tape& tape, const TensorPtr& x, const TensorPtr& w,
                 const TensorPtr& bias, int stride, int pad);
TensorPtr conv_transpose2d(Tape& tape, const TensorPtr& x, const TensorPtr& w,
                           const TensorPtr& bias, int stride, int pad);
// Running stats live outside the graph; pass null to skip tracking.
TensorPtr batchnorm2d(Tape& tape, const TensorPtr& x, const TensorPtr& gamma,
                      const TensorPtr& beta, std::vector<double>* running_mean,
                      std::vector<double>* running_var, bool training,
                      double momentum = 0.1, double eps = 1e-5);
TensorPtr relu(Tape& tape, const TensorPtr& x);
TensorPtr leaky_relu(Tape& tape, const TensorPtr& x, double slope = 0.2);
TensorPtr tanh_op(Tape& tape, const TensorPtr& x);
TensorPtr sigmoid(Tape& tape, const TensorPtr& x);
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);  // same shape or b broadcast over trailing dims
TensorPtr add_row_bias(Tape& tape, const TensorPtr& x, const TensorPtr& b);      // (m,n) + (n)
TensorPtr add_channel_bias(Tape& tape, const TensorPtr& x, const TensorPtr& b);  // (N,C,H,W) + (C)
TensorPtr reshape(Tape& tape, const TensorPtr& x, Shape target);
TensorPtr mse_loss(Tape& tape, const TensorPtr& pred, const TensorPtr& target);
TensorPtr bce_with_logits_loss(Tape& tape, const TensorPtr& logits, const TensorPtr& targets);
// -1/2 sum(1 + logvar - mu^2 - exp(logvar)), summed per sample, mean over batch.
TensorPtr gaussian_kl_loss(Tape& tape, const TensorPtr& mu, const TensorPtr& logvar,
                           double beta = 1.0);
TensorPtr mean_op(Tape& tape, const TensorPtr& x);

// extras used internally by the model zoo
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Tape& tape, const TensorPtr& x, double c);
TensorPtr exp_op(Tape& tape, const TensorPtr& x);
TensorPtr neg(Tape& tape, const TensorPtr& x);
TensorPtr transpose2d(Tape& tape, const TensorPtr& x);
TensorPtr clamp_op(Tape& tape, const TensorPtr& x, double lo, double hi);
// mean over batch of -log softmax(logits)[label]
TensorPtr softmax_cross_entropy(Tape& tape, const TensorPtr& logits,
                                const std::vector<int>& labels);

TensorPtr forward_op(Tape& tape, OpKind op, const std::vector<TensorPtr>& inputs,
                     const OpAttrs& attrs = {});

// Seeds d(loss)/d(loss)=1 and replays the tape in reverse; tape is consumed.
void backward(Tape& tape, const TensorPtr& loss);

// softmax over the last axis of a (n, c) tensor, computed outside the graph
std::vector<double> softmax_rows(const Tensor& logits);

// ---- parameters & optimizer ----

enum class ParamKind { conv_kernel, linear_weight, bias, bn_scale, bn_shift };

struct Parameter {
    TensorPtr tensor;
    std::string name;
    ParamKind kind = ParamKind::linear_weight;
};

inline bool prunable(ParamKind k) {
    return k == ParamKind::conv_kernel || k == ParamKind::linear_weight;
}

struct OptimizerState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip = 0.0;  // >0: clamp weights to [-clip, clip] after the step (WGAN critic)
    std::int64_t step = 0;
    std::vector<std::vector<double>> m, v;  // per parameter, matching order of params
};

void adam_step(std::vector<Parameter*>& params, OptimizerState& state);

// ---- spectral normalization ----

struct SpectralState {
    std::vector<double> u;  // left singular vector estimate, unit norm
    std::int64_t iterations = 0;
};

// Autodiff-aware: records d(W/sigma)/dW on the tape (u, v treated as constants).
TensorPtr spectral_normalize(Tape& tape, const TensorPtr& weight, SpectralState& state,
                             int iters = 1);
// Plain estimate of the top singular value after `iters` power iterations.
double power_iteration_sigma(const Tensor& weight, SpectralState& state, int iters);

void check_finite(const char* op, const Tensor& t);

}  // namespace tl
