#include "ticketlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace tl {

std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

TensorPtr Tensor::create(Shape shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data.assign(static_cast<std::size_t>(numel(t->shape)), 0.0);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(values.size()))
        throw DimError("from_data: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

void Tape::replay_backward() {
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    steps_.clear();
}

void check_finite(const char* op, const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite output");
}

namespace {

TensorPtr make_output(Shape shape, const std::vector<const Tensor*>& inputs) {
    bool rg = false;
    for (const Tensor* in : inputs) rg = rg || in->requires_grad;
    return Tensor::create(std::move(shape), rg);
}

// elementwise unary op helper: y = f(x), dx += dfdx(x, y) * dy
template <class F, class DF>
TensorPtr unary_op(Tape& tape, const char* name, const TensorPtr& x, F f, DF dfdx) {
    auto y = make_output(x->shape, {x.get()});
    for (std::size_t i = 0; i < x->data.size(); ++i) y->data[i] = f(x->data[i]);
    check_finite(name, *y);
    if (y->requires_grad) {
        tape.record([x, y, dfdx]() {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->data.size(); ++i)
                x->grad[i] += dfdx(x->data[i], y->data[i]) * y->grad[i];
        });
    }
    return y;
}

}  // namespace

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw DimError("matmul: incompatible shapes " + shape_str(a->shape) + " x " +
                       shape_str(b->shape));
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto y = make_output({m, n}, {a.get(), b.get()});
    const double* A = a->data.data();
    const double* B = b->data.data();
    double* Y = y->data.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* brow = B + p * n;
            double* yrow = Y + i * n;
            for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    check_finite("matmul", *y);
    if (y->requires_grad) {
        tape.record([a, b, y, m, k, n]() {
            const double* G = y->grad.data();
            if (a->requires_grad) {
                a->ensure_grad();
                // dA = G * B^T
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double g = G[i * n + j];
                        if (g == 0.0) continue;
                        for (int p = 0; p < k; ++p)
                            a->grad[i * k + p] += g * b->data[p * n + j];
                    }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                // dB = A^T * G
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const double av = a->data[i * k + p];
                        if (av == 0.0) continue;
                        for (int j = 0; j < n; ++j)
                            b->grad[p * n + j] += av * G[i * n + j];
                    }
            }
        });
    }
    return y;
}

namespace {

// cols layout: [(c*K+ki)*K+kj][n*Ho*Wo + oh*Wo + ow]
void im2col(const double* x, int N, int C, int H, int W, int K, int stride, int pad,
            int Ho, int Wo, double* cols) {
    const int cols_w = N * Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < K; ++ki)
            for (int kj = 0; kj < K; ++kj) {
                double* row = cols + ((c * K + ki) * K + kj) * static_cast<std::int64_t>(cols_w);
                for (int n = 0; n < N; ++n)
                    for (int oh = 0; oh < Ho; ++oh) {
                        const int ih = oh * stride - pad + ki;
                        for (int ow = 0; ow < Wo; ++ow) {
                            const int iw = ow * stride - pad + kj;
                            double v = 0.0;
                            if (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                v = x[((static_cast<std::int64_t>(n) * C + c) * H + ih) * W + iw];
                            row[(static_cast<std::int64_t>(n) * Ho + oh) * Wo + ow] = v;
                        }
                    }
            }
}

void col2im(const double* cols, int N, int C, int H, int W, int K, int stride, int pad,
            int Ho, int Wo, double* x) {
    const int cols_w = N * Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < K; ++ki)
            for (int kj = 0; kj < K; ++kj) {
                const double* row =
                    cols + ((c * K + ki) * K + kj) * static_cast<std::int64_t>(cols_w);
                for (int n = 0; n < N; ++n)
                    for (int oh = 0; oh < Ho; ++oh) {
                        const int ih = oh * stride - pad + ki;
                        if (ih < 0 || ih >= H) continue;
                        for (int ow = 0; ow < Wo; ++ow) {
                            const int iw = ow * stride - pad + kj;
                            if (iw < 0 || iw >= W) continue;
                            x[((static_cast<std::int64_t>(n) * C + c) * H + ih) * W + iw] +=
                                row[(static_cast<std::int64_t>(n) * Ho + oh) * Wo + ow];
                        }
                    }
            }
}

// (Co, N*Ho*Wo) -> (N, Co, Ho, Wo)
void unpermute_out(const double* ym, int N, int Co, int HoWo, double* y) {
    for (int co = 0; co < Co; ++co)
        for (int n = 0; n < N; ++n)
            for (int s = 0; s < HoWo; ++s)
                y[(static_cast<std::int64_t>(n) * Co + co) * HoWo + s] =
                    ym[static_cast<std::int64_t>(co) * N * HoWo + n * HoWo + s];
}

void permute_out(const double* y, int N, int Co, int HoWo, double* ym) {
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int s = 0; s < HoWo; ++s)
                ym[static_cast<std::int64_t>(co) * N * HoWo + n * HoWo + s] =
                    y[(static_cast<std::int64_t>(n) * Co + co) * HoWo + s];
}

void matmul_raw(const double* A, const double* B, double* Y, std::int64_t m, std::int64_t k,
                std::int64_t n, bool accumulate) {
    if (!accumulate) std::fill(Y, Y + m * n, 0.0);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* brow = B + p * n;
            double* yrow = Y + i * n;
            for (std::int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
}

// Y = A^T * B, A (k,m), B (k,n)
void matmul_at_raw(const double* A, const double* B, double* Y, std::int64_t k, std::int64_t m,
                   std::int64_t n, bool accumulate) {
    if (!accumulate) std::fill(Y, Y + m * n, 0.0);
    for (std::int64_t p = 0; p < k; ++p)
        for (std::int64_t i = 0; i < m; ++i) {
            const double av = A[p * m + i];
            if (av == 0.0) continue;
            const double* brow = B + p * n;
            double* yrow = Y + i * n;
            for (std::int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
}

// Y = A * B^T, A (m,k), B (n,k)
void matmul_bt_raw(const double* A, const double* B, double* Y, std::int64_t m, std::int64_t k,
                   std::int64_t n, bool accumulate) {
    if (!accumulate) std::fill(Y, Y + m * n, 0.0);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            const double* arow = A + i * k;
            const double* brow = B + j * k;
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            Y[i * n + j] += acc;
        }
}

}  // namespace

TensorPtr conv2d(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias,
                 int stride, int pad) {
    if (x->shape.size() != 4 || w->shape.size() != 4 || x->shape[1] != w->shape[1])
        throw DimError("conv2d: shapes " + shape_str(x->shape) + " / " + shape_str(w->shape));
    const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Co = w->shape[0], K = w->shape[2];
    const int Ho = (H + 2 * pad - K) / stride + 1;
    const int Wo = (W + 2 * pad - K) / stride + 1;
    if (Ho <= 0 || Wo <= 0)
        throw DimError("conv2d: empty output for input " + shape_str(x->shape));

    const std::int64_t ckk = static_cast<std::int64_t>(C) * K * K;
    const std::int64_t cols_w = static_cast<std::int64_t>(N) * Ho * Wo;
    auto cols = std::make_shared<std::vector<double>>(ckk * cols_w);
    im2col(x->data.data(), N, C, H, W, K, stride, pad, Ho, Wo, cols->data());

    std::vector<double> ym(static_cast<std::int64_t>(Co) * cols_w);
    matmul_raw(w->data.data(), cols->data(), ym.data(), Co, ckk, cols_w, false);

    std::vector<const Tensor*> ins{x.get(), w.get()};
    if (bias) ins.push_back(bias.get());
    auto y = make_output({N, Co, Ho, Wo}, ins);
    unpermute_out(ym.data(), N, Co, Ho * Wo, y->data.data());
    if (bias) {
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co) {
                double* p = y->data.data() + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                const double b = bias->data[co];
                for (int s = 0; s < Ho * Wo; ++s) p[s] += b;
            }
    }
    check_finite("conv2d", *y);

    if (y->requires_grad) {
        tape.record([x, w, bias, y, cols, N, C, H, W, Co, K, Ho, Wo, stride, pad, ckk, cols_w]() {
            std::vector<double> gm(static_cast<std::int64_t>(Co) * cols_w);
            permute_out(y->grad.data(), N, Co, Ho * Wo, gm.data());
            if (bias && bias->requires_grad) {
                bias->ensure_grad();
                for (int co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    const double* row = gm.data() + static_cast<std::int64_t>(co) * cols_w;
                    for (std::int64_t s = 0; s < cols_w; ++s) acc += row[s];
                    bias->grad[co] += acc;
                }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                matmul_bt_raw(gm.data(), cols->data(), w->grad.data(), Co, cols_w, ckk, true);
            }
            if (x->requires_grad) {
                x->ensure_grad();
                std::vector<double> dcols(ckk * cols_w);
                matmul_at_raw(w->data.data(), gm.data(), dcols.data(), Co, ckk, cols_w, false);
                col2im(dcols.data(), N, C, H, W, K, stride, pad, Ho, Wo, x->grad.data());
            }
        });
    }
    return y;
}

TensorPtr conv_transpose2d(Tape& tape, const TensorPtr& x, const TensorPtr& w,
                           const TensorPtr& bias, int stride, int pad) {
    // w layout: (C_in, C_out, K, K)
    if (x->shape.size() != 4 || w->shape.size() != 4 || x->shape[1] != w->shape[0])
        throw DimError("conv_transpose2d: shapes " + shape_str(x->shape) + " / " +
                       shape_str(w->shape));
    const int N = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Co = w->shape[1], K = w->shape[2];
    const int Ho = (H - 1) * stride - 2 * pad + K;
    const int Wo = (W - 1) * stride - 2 * pad + K;
    if (Ho <= 0 || Wo <= 0)
        throw DimError("conv_transpose2d: empty output for input " + shape_str(x->shape));

    const std::int64_t ckk = static_cast<std::int64_t>(Co) * K * K;
    const std::int64_t cols_w = static_cast<std::int64_t>(N) * H * W;
    // x as matrix (Ci, N*H*W)
    auto xm = std::make_shared<std::vector<double>>(static_cast<std::int64_t>(Ci) * cols_w);
    permute_out(x->data.data(), N, Ci, H * W, xm->data());

    std::vector<double> cols(ckk * cols_w);
    // cols = w_mat^T (ckk, Ci) * xm (Ci, cols_w)
    matmul_at_raw(w->data.data(), xm->data(), cols.data(), Ci, ckk, cols_w, false);

    std::vector<const Tensor*> ins{x.get(), w.get()};
    if (bias) ins.push_back(bias.get());
    auto y = make_output({N, Co, Ho, Wo}, ins);
    col2im(cols.data(), N, Co, Ho, Wo, K, stride, pad, H, W, y->data.data());
    if (bias) {
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co) {
                double* p = y->data.data() + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                const double b = bias->data[co];
                for (int s = 0; s < Ho * Wo; ++s) p[s] += b;
            }
    }
    check_finite("conv_transpose2d", *y);

    if (y->requires_grad) {
        tape.record([x, w, bias, y, xm, N, Ci, H, W, Co, K, Ho, Wo, stride, pad, ckk, cols_w]() {
            if (bias && bias->requires_grad) {
                bias->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Co; ++co) {
                        const double* p =
                            y->grad.data() + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                        double acc = 0.0;
                        for (int s = 0; s < Ho * Wo; ++s) acc += p[s];
                        bias->grad[co] += acc;
                    }
            }
            std::vector<double> dcols(ckk * cols_w);
            im2col(y->grad.data(), N, Co, Ho, Wo, K, stride, pad, H, W, dcols.data());
            if (w->requires_grad) {
                w->ensure_grad();
                // dW (Ci, ckk) = xm (Ci, cols_w) * dcols^T (cols_w, ckk)
                matmul_bt_raw(xm->data(), dcols.data(), w->grad.data(), Ci, cols_w, ckk, true);
            }
            if (x->requires_grad) {
                x->ensure_grad();
                std::vector<double> dxm(static_cast<std::int64_t>(Ci) * cols_w);
                matmul_raw(w->data.data(), dcols.data(), dxm.data(), Ci, ckk, cols_w, false);
                // scatter (Ci, N*H*W) back into (N,Ci,H,W)
                for (int ci = 0; ci < Ci; ++ci)
                    for (int n = 0; n < N; ++n)
                        for (int s = 0; s < H * W; ++s)
                            x->grad[(static_cast<std::int64_t>(n) * Ci + ci) * H * W + s] +=
                                dxm[static_cast<std::int64_t>(ci) * cols_w + n * H * W + s];
            }
        });
    }
    return y;
}

TensorPtr batchnorm2d(Tape& tape, const TensorPtr& x, const TensorPtr& gamma,
                      const TensorPtr& beta, std::vector<double>* running_mean,
                      std::vector<double>* running_var, bool training, double momentum,
                      double eps) {
    if (x->shape.size() != 4)
        throw DimError("batchnorm2d: expected NCHW input, got " + shape_str(x->shape));
    const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (gamma->size() != C || beta->size() != C)
        throw DimError("batchnorm2d: channel mismatch, x " + shape_str(x->shape) + " gamma " +
                       shape_str(gamma->shape));
    const std::int64_t M = static_cast<std::int64_t>(N) * H * W;  // per-channel count
    const std::int64_t HW = static_cast<std::int64_t>(H) * W;

    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto var = std::make_shared<std::vector<double>>(C, 0.0);
    if (training) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = x->data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) s += p[i];
            }
            (*mean)[c] = s / static_cast<double>(M);
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = x->data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    const double d = p[i] - (*mean)[c];
                    v += d * d;
                }
            }
            (*var)[c] = v / static_cast<double>(M);
        }
        if (running_mean && running_var) {
            const double unbias = M > 1 ? static_cast<double>(M) / (M - 1) : 1.0;
            for (int c = 0; c < C; ++c) {
                (*running_mean)[c] = (1 - momentum) * (*running_mean)[c] + momentum * (*mean)[c];
                (*running_var)[c] =
                    (1 - momentum) * (*running_var)[c] + momentum * (*var)[c] * unbias;
            }
        }
    } else {
        if (!running_mean || !running_var)
            throw ContractError("batchnorm2d: eval mode requires running statistics");
        *mean = *running_mean;
        *var = *running_var;
    }

    auto xhat = std::make_shared<std::vector<double>>(x->data.size());
    auto y = make_output(x->shape, {x.get(), gamma.get(), beta.get()});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double inv = 1.0 / std::sqrt((*var)[c] + eps);
            const double g = gamma->data[c], b = beta->data[c], mu = (*mean)[c];
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
                const double xh = (x->data[base + i] - mu) * inv;
                (*xhat)[base + i] = xh;
                y->data[base + i] = g * xh + b;
            }
        }
    check_finite("batchnorm2d", *y);

    if (y->requires_grad) {
        tape.record([x, gamma, beta, y, xhat, var, N, C, HW, M, eps, training]() {
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (int n = 0; n < N; ++n) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        sum_dy += y->grad[base + i];
                        sum_dy_xh += y->grad[base + i] * (*xhat)[base + i];
                    }
                }
                if (gamma->requires_grad) {
                    gamma->ensure_grad();
                    gamma->grad[c] += sum_dy_xh;
                }
                if (beta->requires_grad) {
                    beta->ensure_grad();
                    beta->grad[c] += sum_dy;
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    const double inv = 1.0 / std::sqrt((*var)[c] + eps);
                    const double g = gamma->data[c];
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            double dxh = y->grad[base + i] * g;
                            if (training) {
                                x->grad[base + i] +=
                                    inv * (dxh - sum_dy * g / static_cast<double>(M) -
                                           (*xhat)[base + i] * sum_dy_xh * g /
                                               static_cast<double>(M));
                            } else {
                                x->grad[base + i] += dxh * inv;
                            }
                        }
                    }
                }
            }
        });
    }
    return y;
}

TensorPtr relu(Tape& tape, const TensorPtr& x) {
    return unary_op(tape, "relu", x, [](double v) { return v > 0 ? v : 0.0; },
                    [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

TensorPtr leaky_relu(Tape& tape, const TensorPtr& x, double slope) {
    return unary_op(tape, "leaky_relu", x,
                    [slope](double v) { return v > 0 ? v : slope * v; },
                    [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

TensorPtr tanh_op(Tape& tape, const TensorPtr& x) {
    return unary_op(tape, "tanh", x, [](double v) { return std::tanh(v); },
                    [](double, double y) { return 1.0 - y * y; });
}

TensorPtr sigmoid(Tape& tape, const TensorPtr& x) {
    return unary_op(tape, "sigmoid", x,
                    [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](double, double y) { return y * (1.0 - y); });
}

TensorPtr exp_op(Tape& tape, const TensorPtr& x) {
    return unary_op(tape, "exp", x, [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

TensorPtr neg(Tape& tape, const TensorPtr& x) {
    return unary_op(tape, "neg", x, [](double v) { return -v; },
                    [](double, double) { return -1.0; });
}

TensorPtr transpose2d(Tape& tape, const TensorPtr& x) {
    if (x->shape.size() != 2)
        throw DimError("transpose2d: expected 2-D, got " + shape_str(x->shape));
    const int m = x->shape[0], n = x->shape[1];
    auto y = make_output({n, m}, {x.get()});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y->data[static_cast<std::int64_t>(j) * m + i] = x->data[static_cast<std::int64_t>(i) * n + j];
    if (y->requires_grad) {
        tape.record([x, y, m, n]() {
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    x->grad[static_cast<std::int64_t>(i) * n + j] += y->grad[static_cast<std::int64_t>(j) * m + i];
        });
    }
    return y;
}

TensorPtr clamp_op(Tape& tape, const TensorPtr& x, double lo, double hi) {
    return unary_op(tape, "clamp", x,
                    [lo, hi](double v) { return std::clamp(v, lo, hi); },
                    [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

TensorPtr scale(Tape& tape, const TensorPtr& x, double c) {
    return unary_op(tape, "scale", x, [c](double v) { return c * v; },
                    [c](double, double) { return c; });
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        if (a->shape.size() == 2 && b->shape.size() == 1 && a->shape[1] == b->shape[0])
            return add_row_bias(tape, a, b);
        if (a->shape.size() == 4 && b->shape.size() == 1 && a->shape[1] == b->shape[0])
            return add_channel_bias(tape, a, b);
        throw DimError("add: shapes " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
    auto y = make_output(a->shape, {a.get(), b.get()});
    for (std::size_t i = 0; i < y->data.size(); ++i) y->data[i] = a->data[i] + b->data[i];
    check_finite("add", *y);
    if (y->requires_grad) {
        tape.record([a, b, y]() {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < y->data.size(); ++i) a->grad[i] += y->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < y->data.size(); ++i) b->grad[i] += y->grad[i];
            }
        });
    }
    return y;
}

TensorPtr add_row_bias(Tape& tape, const TensorPtr& x, const TensorPtr& b) {
    if (x->shape.size() != 2 || b->shape.size() != 1 || x->shape[1] != b->shape[0])
        throw DimError("add_row_bias: shapes " + shape_str(x->shape) + " vs " +
                       shape_str(b->shape));
    const int m = x->shape[0], n = x->shape[1];
    auto y = make_output(x->shape, {x.get(), b.get()});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y->data[i * n + j] = x->data[i * n + j] + b->data[j];
    check_finite("add_row_bias", *y);
    if (y->requires_grad) {
        tape.record([x, b, y, m, n]() {
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::size_t i = 0; i < y->data.size(); ++i) x->grad[i] += y->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) b->grad[j] += y->grad[i * n + j];
            }
        });
    }
    return y;
}

TensorPtr add_channel_bias(Tape& tape, const TensorPtr& x, const TensorPtr& b) {
    if (x->shape.size() != 4 || b->shape.size() != 1 || x->shape[1] != b->shape[0])
        throw DimError("add_channel_bias: shapes " + shape_str(x->shape) + " vs " +
                       shape_str(b->shape));
    const int N = x->shape[0], C = x->shape[1];
    const std::int64_t HW = static_cast<std::int64_t>(x->shape[2]) * x->shape[3];
    auto y = make_output(x->shape, {x.get(), b.get()});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) y->data[base + i] = x->data[base + i] + b->data[c];
        }
    check_finite("add_channel_bias", *y);
    if (y->requires_grad) {
        tape.record([x, b, y, N, C, HW]() {
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::size_t i = 0; i < y->data.size(); ++i) x->grad[i] += y->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) b->grad[c] += y->grad[base + i];
                    }
            }
        });
    }
    return y;
}

TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape)
        throw DimError("mul: shapes " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto y = make_output(a->shape, {a.get(), b.get()});
    for (std::size_t i = 0; i < y->data.size(); ++i) y->data[i] = a->data[i] * b->data[i];
    check_finite("mul", *y);
    if (y->requires_grad) {
        tape.record([a, b, y]() {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < y->data.size(); ++i)
                    a->grad[i] += b->data[i] * y->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < y->data.size(); ++i)
                    b->grad[i] += a->data[i] * y->grad[i];
            }
        });
    }
    return y;
}

TensorPtr reshape(Tape& tape, const TensorPtr& x, Shape target) {
    if (numel(target) != x->size())
        throw DimError("reshape: " + shape_str(x->shape) + " -> " + shape_str(target));
    auto y = make_output(std::move(target), {x.get()});
    y->data = x->data;
    if (y->requires_grad) {
        tape.record([x, y]() {
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (std::size_t i = 0; i < y->data.size(); ++i) x->grad[i] += y->grad[i];
        });
    }
    return y;
}

TensorPtr mse_loss(Tape& tape, const TensorPtr& pred, const TensorPtr& target) {
    if (pred->shape != target->shape)
        throw DimError("mse_loss: shapes " + shape_str(pred->shape) + " vs " +
                       shape_str(target->shape));
    const double n = static_cast<double>(pred->size());
    double acc = 0.0;
    for (std::size_t i = 0; i < pred->data.size(); ++i) {
        const double d = pred->data[i] - target->data[i];
        acc += d * d;
    }
    auto y = make_output({1}, {pred.get(), target.get()});
    y->data[0] = acc / n;
    check_finite("mse_loss", *y);
    if (y->requires_grad) {
        tape.record([pred, target, y, n]() {
            const double g = y->grad[0] * 2.0 / n;
            if (pred->requires_grad) {
                pred->ensure_grad();
                for (std::size_t i = 0; i < pred->data.size(); ++i)
                    pred->grad[i] += g * (pred->data[i] - target->data[i]);
            }
            if (target->requires_grad) {
                target->ensure_grad();
                for (std::size_t i = 0; i < pred->data.size(); ++i)
                    target->grad[i] -= g * (pred->data[i] - target->data[i]);
            }
        });
    }
    return y;
}

TensorPtr bce_with_logits_loss(Tape& tape, const TensorPtr& logits, const TensorPtr& targets) {
    if (logits->shape != targets->shape)
        throw DimError("bce_with_logits_loss: shapes " + shape_str(logits->shape) + " vs " +
                       shape_str(targets->shape));
    const double n = static_cast<double>(logits->size());
    double acc = 0.0;
    for (std::size_t i = 0; i < logits->data.size(); ++i) {
        const double z = logits->data[i], t = targets->data[i];
        acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    auto y = make_output({1}, {logits.get(), targets.get()});
    y->data[0] = acc / n;
    check_finite("bce_with_logits_loss", *y);
    if (y->requires_grad) {
        tape.record([logits, targets, y, n]() {
            if (!logits->requires_grad) return;
            logits->ensure_grad();
            const double g = y->grad[0] / n;
            for (std::size_t i = 0; i < logits->data.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-logits->data[i]));
                logits->grad[i] += g * (s - targets->data[i]);
            }
        });
    }
    return y;
}

TensorPtr gaussian_kl_loss(Tape& tape, const TensorPtr& mu, const TensorPtr& logvar,
                           double beta) {
    if (mu->shape != logvar->shape)
        throw DimError("gaussian_kl_loss: shapes " + shape_str(mu->shape) + " vs " +
                       shape_str(logvar->shape));
    const double batch = static_cast<double>(mu->shape.empty() ? 1 : mu->shape[0]);
    double acc = 0.0;
    for (std::size_t i = 0; i < mu->data.size(); ++i) {
        const double m = mu->data[i], lv = logvar->data[i];
        acc += -(1.0 + lv - m * m - std::exp(lv));
    }
    auto y = make_output({1}, {mu.get(), logvar.get()});
    y->data[0] = beta * 0.5 * acc / batch;
    check_finite("gaussian_kl_loss", *y);
    if (y->requires_grad) {
        tape.record([mu, logvar, y, batch, beta]() {
            const double g = y->grad[0] * beta / batch;
            if (mu->requires_grad) {
                mu->ensure_grad();
                for (std::size_t i = 0; i < mu->data.size(); ++i)
                    mu->grad[i] += g * mu->data[i];
            }
            if (logvar->requires_grad) {
                logvar->ensure_grad();
                for (std::size_t i = 0; i < mu->data.size(); ++i)
                    logvar->grad[i] += g * 0.5 * (std::exp(logvar->data[i]) - 1.0);
            }
        });
    }
    return y;
}

TensorPtr mean_op(Tape& tape, const TensorPtr& x) {
    const double n = static_cast<double>(x->size());
    double acc = 0.0;
    for (double v : x->data) acc += v;
    auto y = make_output({1}, {x.get()});
    y->data[0] = acc / n;
    check_finite("mean", *y);
    if (y->requires_grad) {
        tape.record([x, y, n]() {
            if (!x->requires_grad) return;
            x->ensure_grad();
            const double g = y->grad[0] / n;
            for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += g;
        });
    }
    return y;
}

TensorPtr softmax_cross_entropy(Tape& tape, const TensorPtr& logits,
                                const std::vector<int>& labels) {
    if (logits->shape.size() != 2 || logits->shape[0] != static_cast<int>(labels.size()))
        throw DimError("softmax_cross_entropy: logits " + shape_str(logits->shape) + " vs " +
                       std::to_string(labels.size()) + " labels");
    const int n = logits->shape[0], c = logits->shape[1];
    auto probs = std::make_shared<std::vector<double>>(logits->data.size());
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = logits->data.data() + static_cast<std::int64_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - mx) / z;
        acc += -(row[labels[i]] - mx - std::log(z));
    }
    auto y = make_output({1}, {logits.get()});
    y->data[0] = acc / n;
    check_finite("softmax_cross_entropy", *y);
    if (y->requires_grad) {
        tape.record([logits, y, probs, labels, n, c]() {
            if (!logits->requires_grad) return;
            logits->ensure_grad();
            const double g = y->grad[0] / n;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j)
                    logits->grad[i * c + j] +=
                        g * ((*probs)[i * c + j] - (labels[i] == j ? 1.0 : 0.0));
        });
    }
    return y;
}

std::vector<double> softmax_rows(const Tensor& logits) {
    if (logits.shape.size() != 2)
        throw DimError("softmax_rows: expected 2-D logits, got " + shape_str(logits.shape));
    const int n = logits.shape[0], c = logits.shape[1];
    std::vector<double> out(logits.data.size());
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data.data() + static_cast<std::int64_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < c; ++j) out[i * c + j] = std::exp(row[j] - mx) / z;
    }
    return out;
}

TensorPtr forward_op(Tape& tape, OpKind op, const std::vector<TensorPtr>& inputs,
                     const OpAttrs& attrs) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            throw ContractError("forward_op: wrong input count");
    };
    switch (op) {
        case OpKind::matmul: need(2); return matmul(tape, inputs[0], inputs[1]);
        case OpKind::conv2d:
            return conv2d(tape, inputs[0], inputs[1],
                          inputs.size() > 2 ? inputs[2] : nullptr, attrs.stride, attrs.pad);
        case OpKind::conv_transpose2d:
            return conv_transpose2d(tape, inputs[0], inputs[1],
                                    inputs.size() > 2 ? inputs[2] : nullptr, attrs.stride,
                                    attrs.pad);
        case OpKind::batchnorm2d: {
            need(3);
            // dispatcher form tracks no running stats; training-mode statistics only
            return batchnorm2d(tape, inputs[0], inputs[1], inputs[2], nullptr, nullptr, true,
                               attrs.momentum, attrs.eps);
        }
        case OpKind::relu: need(1); return relu(tape, inputs[0]);
        case OpKind::leaky_relu: need(1); return leaky_relu(tape, inputs[0], attrs.slope);
        case OpKind::tanh: need(1); return tanh_op(tape, inputs[0]);
        case OpKind::sigmoid: need(1); return sigmoid(tape, inputs[0]);
        case OpKind::add: need(2); return add(tape, inputs[0], inputs[1]);
        case OpKind::reshape: need(1); return reshape(tape, inputs[0], attrs.target_shape);
        case OpKind::mse_loss: need(2); return mse_loss(tape, inputs[0], inputs[1]);
        case OpKind::bce_with_logits_loss:
            need(2);
            return bce_with_logits_loss(tape, inputs[0], inputs[1]);
        case OpKind::gaussian_kl_loss:
            need(2);
            return gaussian_kl_loss(tape, inputs[0], inputs[1], attrs.beta);
        case OpKind::mean: need(1); return mean_op(tape, inputs[0]);
    }
    throw ContractError("forward_op: unknown op");
}

void backward(Tape& tape, const TensorPtr& loss) {
    if (loss->size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss->shape));
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    tape.replay_backward();
}

void adam_step(std::vector<Parameter*>& params, OptimizerState& state) {
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->tensor->data.size(), 0.0);
            state.v[i].assign(params[i]->tensor->data.size(), 0.0);
        }
    }
    for (const Parameter* p : params)
        if (p->tensor->grad.size() != p->tensor->data.size())
            throw ContractError("adam_step: parameter '" + p->name + "' has no gradient");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& t = *params[i]->tensor;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < t.data.size(); ++j) {
            const double g = t.grad[j];
            m[j] = state.beta1 * m[j] + (1 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1 - state.beta2) * g * g;
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            t.data[j] -= state.lr * mh / (std::sqrt(vh) + state.eps);
            if (state.clip > 0.0)
                t.data[j] = std::clamp(t.data[j], -state.clip, state.clip);
        }
    }
}

double power_iteration_sigma(const Tensor& weight, SpectralState& state, int iters) {
    const std::int64_t rows = weight.shape[0];
    const std::int64_t cols = weight.size() / rows;
    const double* W = weight.data.data();
    if (state.u.size() != static_cast<std::size_t>(rows)) {
        state.u.assign(rows, 1.0 / std::sqrt(static_cast<double>(rows)));
        state.iterations = 0;
    }
    std::vector<double> v(cols, 0.0);
    double sigma = 0.0;
    for (int it = 0; it < iters; ++it) {
        // v = normalize(W^T u)
        std::fill(v.begin(), v.end(), 0.0);
        for (std::int64_t i = 0; i < rows; ++i) {
            const double ui = state.u[i];
            if (ui == 0.0) continue;
            const double* row = W + i * cols;
            for (std::int64_t j = 0; j < cols; ++j) v[j] += ui * row[j];
        }
        double nv = 0.0;
        for (double x : v) nv += x * x;
        nv = std::sqrt(nv);
        if (nv < 1e-300) return 0.0;  // zero matrix: caller treats sigma as 1
        for (double& x : v) x /= nv;
        // u = normalize(W v), sigma = ||W v||
        std::vector<double> wu(rows, 0.0);
        for (std::int64_t i = 0; i < rows; ++i) {
            const double* row = W + i * cols;
            double acc = 0.0;
            for (std::int64_t j = 0; j < cols; ++j) acc += row[j] * v[j];
            wu[i] = acc;
        }
        double nu = 0.0;
        for (double x : wu) nu += x * x;
        nu = std::sqrt(nu);
        if (nu < 1e-300) return 0.0;
        sigma = nu;
        for (std::int64_t i = 0; i < rows; ++i) state.u[i] = wu[i] / nu;
        state.iterations += 1;
    }
    return sigma;
}

TensorPtr spectral_normalize(Tape& tape, const TensorPtr& weight, SpectralState& state,
                             int iters) {
    if (weight->shape.empty() || iters < 1)
        throw ContractError("spectral_normalize: need a shaped weight and iters >= 1");
    const std::int64_t rows = weight->shape[0];
    const std::int64_t cols = weight->size() / rows;
    const double sigma = power_iteration_sigma(*weight, state, iters);
    if (sigma <= 0.0) return weight;  // degenerate zero matrix, sigma treated as 1

    // recompute v from the converged u for the gradient of sigma = u^T W v
    auto u = std::make_shared<std::vector<double>>(state.u);
    auto v = std::make_shared<std::vector<double>>(cols, 0.0);
    for (std::int64_t i = 0; i < rows; ++i) {
        const double ui = (*u)[i];
        const double* row = weight->data.data() + i * cols;
        for (std::int64_t j = 0; j < cols; ++j) (*v)[j] += ui * row[j];
    }
    double nv = 0.0;
    for (double x : *v) nv += x * x;
    nv = std::sqrt(nv);
    for (double& x : *v) x /= nv;

    auto y = make_output(weight->shape, {weight.get()});
    for (std::size_t i = 0; i < y->data.size(); ++i) y->data[i] = weight->data[i] / sigma;
    check_finite("spectral_normalize", *y);
    if (y->requires_grad) {
        tape.record([weight, y, u, v, sigma, rows, cols]() {
            if (!weight->requires_grad) return;
            weight->ensure_grad();
            // d(W/s)/dW with s = u^T W v (u, v constant): dW = dy/s - (sum dy.Wn) uv^T / s
            double dot = 0.0;
            for (std::size_t i = 0; i < y->data.size(); ++i) dot += y->grad[i] * y->data[i];
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cols; ++j)
                    weight->grad[i * cols + j] +=
                        y->grad[i * cols + j] / sigma - dot * (*u)[i] * (*v)[j] / sigma;
        });
    }
    return y;
}

}  // namespace tl
