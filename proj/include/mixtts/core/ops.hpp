#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mixtts/core/common.hpp"
#include "mixtts/core/rng.hpp"
#include "mixtts/core/tensor.hpp"

// Differentiable operations. Every op allocates its output, validates shapes,
// rejects non-finite results, and (when a tape is supplied and some input
// requires grad) records a backward closure. Backward closures accumulate into
// input grads only for inputs with requires_grad set.

namespace mixtts {

template <typename T>
inline void check_finite(Tensor<T> t, const char* op) {
    for (const T v : t.values())
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericalError(std::string("non-finite value produced by ") + op);
}

template <typename T>
inline void finalize_op(Tape<T>* tape, Tensor<T>& out, bool needs_grad, std::function<void()> bw,
                        const char* op) {
    check_finite(out, op);
    if (tape) {
        out.set_tape_id(tape->id());
        if (needs_grad) {
            out.set_requires_grad(true);
            tape->record(std::move(bw));
        }
    }
}

template <typename T>
inline T logaddexp(T a, T b) {
    if (a == -std::numeric_limits<T>::infinity()) return b;
    if (b == -std::numeric_limits<T>::infinity()) return a;
    const T m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    require_shape(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    const bool ng = a.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        },
        "add");
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    require_shape(a.shape() == b.shape(),
                  "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    const bool ng = a.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        },
        "sub");
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    require_shape(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    const bool ng = a.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(static_cast<Index>(i));
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(static_cast<Index>(i));
            }
        },
        "mul");
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, Tensor<T> a, T c) {
    Tensor<T> out(a.shape());
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) out.at(i) = c * a.at(i);
    finalize_op(
        tape, out, a.requires_grad(),
        [a, out, c]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        },
        "scale");
    return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>* tape, Tensor<T> x) {
    // exact form x * Phi(x) with Phi from erf
    static const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
    static const T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
    Tensor<T> out(x.shape());
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) {
        const T v = x.at(i);
        out.at(i) = v * static_cast<T>(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    }
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = x.at(static_cast<Index>(i));
                const T phi = static_cast<T>(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * v * v);
                gx[i] += g[i] * (phi + v * pdf);
            }
        },
        "gelu");
    return out;
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, Tensor<T> x) {
    Tensor<T> out(x.shape());
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) out.at(i) = x.at(i) > T(0) ? x.at(i) : T(0);
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x.at(static_cast<Index>(i)) > T(0)) gx[i] += g[i];
        },
        "relu");
    return out;
}

template <typename T>
Tensor<T> exp_elem(Tape<T>* tape, Tensor<T> x) {
    Tensor<T> out(x.shape());
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) out.at(i) = std::exp(x.at(i));
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out.at(static_cast<Index>(i));
        },
        "exp");
    return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, Tensor<T> x) {
    T acc = 0;
    const Index n = x.numel();
    for (Index i = 0; i < n; ++i) acc += x.at(i);
    Tensor<T> out = Tensor<T>::scalar(acc);
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const T g = out.grad()[0];
            auto& gx = x.grad();
            for (auto& v : gx) v += g;
        },
        "sum");
    return out;
}

// ------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    require_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const Index n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor<T> out({n, m});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = out.data();
    for (Index i = 0; i < n; ++i)
        for (Index kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            const T* brow = pb + kk * m;
            T* crow = pc + i * m;
            for (Index j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    const bool ng = a.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [a, b, out, n, k, m]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                T* ga = a.grad().data();
                const T* pb = b.data();
                for (Index i = 0; i < n; ++i)
                    for (Index kk = 0; kk < k; ++kk) {
                        T acc = 0;
                        const T* grow = g + i * m;
                        const T* brow = pb + kk * m;
                        for (Index j = 0; j < m; ++j) acc += grow[j] * brow[j];
                        ga[i * k + kk] += acc;
                    }
            }
            if (b.requires_grad()) {
                T* gb = b.grad().data();
                const T* pa = a.data();
                for (Index i = 0; i < n; ++i)
                    for (Index kk = 0; kk < k; ++kk) {
                        const T av = pa[i * k + kk];
                        const T* grow = g + i * m;
                        T* gbrow = gb + kk * m;
                        for (Index j = 0; j < m; ++j) gbrow[j] += av * grow[j];
                    }
            }
        },
        "matmul");
    return out;
}

// a [N,K] x b[M,K]^T -> [N,M]
template <typename T>
Tensor<T> matmul_nt(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    require_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: incompatible shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
    const Index n = a.dim(0), k = a.dim(1), m = b.dim(0);
    Tensor<T> out({n, m});
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) {
            T acc = 0;
            const T* arow = a.data() + i * k;
            const T* brow = b.data() + j * k;
            for (Index kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            out.at(i, j) = acc;
        }
    const bool ng = a.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [a, b, out, n, k, m]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                T* ga = a.grad().data();
                for (Index i = 0; i < n; ++i)
                    for (Index j = 0; j < m; ++j) {
                        const T gv = g[i * m + j];
                        const T* brow = b.data() + j * k;
                        T* garow = ga + i * k;
                        for (Index kk = 0; kk < k; ++kk) garow[kk] += gv * brow[kk];
                    }
            }
            if (b.requires_grad()) {
                T* gb = b.grad().data();
                for (Index i = 0; i < n; ++i)
                    for (Index j = 0; j < m; ++j) {
                        const T gv = g[i * m + j];
                        const T* arow = a.data() + i * k;
                        T* gbrow = gb + j * k;
                        for (Index kk = 0; kk < k; ++kk) gbrow[kk] += gv * arow[kk];
                    }
            }
        },
        "matmul_nt");
    return out;
}

// x [*, In] -> [*, Out]; W is [In, Out], bias [Out]. Leading dims flattened.
template <typename T>
Tensor<T> linear(Tape<T>* tape, Tensor<T> x, Tensor<T> W, Tensor<T> b) {
    require_shape(x.rank() >= 2 && W.rank() == 2,
                  "linear: expected x rank>=2 and 2-d weight, got " + shape_str(x.shape()) + " and " +
                      shape_str(W.shape()));
    const Index in = W.dim(0), out_dim = W.dim(1);
    require_shape(x.shape().back() == in, "linear: inner dimensions disagree: x " +
                                              shape_str(x.shape()) + " vs W " + shape_str(W.shape()));
    require_shape(b.rank() == 1 && b.dim(0) == out_dim,
                  "linear: bias shape " + shape_str(b.shape()) + " does not match W " +
                      shape_str(W.shape()));
    const Index rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    Tensor<T> out(out_shape);
    const T* px = x.data();
    const T* pw = W.data();
    T* po = out.data();
    for (Index r = 0; r < rows; ++r) {
        T* orow = po + r * out_dim;
        for (Index j = 0; j < out_dim; ++j) orow[j] = b.at(j);
        const T* xrow = px + r * in;
        for (Index kk = 0; kk < in; ++kk) {
            const T xv = xrow[kk];
            const T* wrow = pw + kk * out_dim;
            for (Index j = 0; j < out_dim; ++j) orow[j] += xv * wrow[j];
        }
    }
    const bool ng = x.requires_grad() || W.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [x, W, b, out, rows, in, out_dim]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (x.requires_grad()) {
                T* gx = x.grad().data();
                const T* pw = W.data();
                for (Index r = 0; r < rows; ++r) {
                    const T* grow = g + r * out_dim;
                    T* gxrow = gx + r * in;
                    for (Index kk = 0; kk < in; ++kk) {
                        T acc = 0;
                        const T* wrow = pw + kk * out_dim;
                        for (Index j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
                        gxrow[kk] += acc;
                    }
                }
            }
            if (W.requires_grad()) {
                T* gw = W.grad().data();
                const T* px = x.data();
                for (Index r = 0; r < rows; ++r) {
                    const T* grow = g + r * out_dim;
                    const T* xrow = px + r * in;
                    for (Index kk = 0; kk < in; ++kk) {
                        const T xv = xrow[kk];
                        T* gwrow = gw + kk * out_dim;
                        for (Index j = 0; j < out_dim; ++j) gwrow[j] += xv * grow[j];
                    }
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (Index r = 0; r < rows; ++r) {
                    const T* grow = g + r * out_dim;
                    for (Index j = 0; j < out_dim; ++j) gb[static_cast<std::size_t>(j)] += grow[j];
                }
            }
        },
        "linear");
    return out;
}

// ---------------------------------------------------------------- convolution

namespace detail {

template <typename T>
void conv1d_require(Tensor<T> x, Index cin, Index k, const char* op) {
    require_shape(x.rank() == 2 || x.rank() == 3,
                  std::string(op) + ": input must be [T,C] or [B,T,C], got " + shape_str(x.shape()));
    require_config(k % 2 == 1, std::string(op) + ": kernel size must be odd, got " + std::to_string(k));
    require_shape(x.shape().back() == cin, std::string(op) + ": channel mismatch: input " +
                                               shape_str(x.shape()) + " expects " + std::to_string(cin) +
                                               " channels");
}

}  // namespace detail

// Full cross-channel conv along time with zero same-padding.
// W is [Cout, Cin, K], bias [Cout]; x is [T,Cin] or [B,T,Cin].
template <typename T>
Tensor<T> conv1d(Tape<T>* tape, Tensor<T> x, Tensor<T> W, Tensor<T> b) {
    require_shape(W.rank() == 3, "conv1d: weight must be [Cout,Cin,K], got " + shape_str(W.shape()));
    const Index cout = W.dim(0), cin = W.dim(1), k = W.dim(2);
    detail::conv1d_require(x, cin, k, "conv1d");
    require_shape(b.rank() == 1 && b.dim(0) == cout,
                  "conv1d: bias shape " + shape_str(b.shape()) + " does not match weight " +
                      shape_str(W.shape()));
    const bool batched = x.rank() == 3;
    const Index B = batched ? x.dim(0) : 1;
    const Index tlen = batched ? x.dim(1) : x.dim(0);
    const Index pad = (k - 1) / 2;
    Shape out_shape = x.shape();
    out_shape.back() = cout;
    Tensor<T> out(out_shape);
    for (Index bb = 0; bb < B; ++bb) {
        const T* px = x.data() + bb * tlen * cin;
        T* po = out.data() + bb * tlen * cout;
        for (Index t = 0; t < tlen; ++t) {
            T* orow = po + t * cout;
            for (Index co = 0; co < cout; ++co) orow[co] = b.at(co);
            for (Index kk = 0; kk < k; ++kk) {
                const Index u = t + kk - pad;
                if (u < 0 || u >= tlen) continue;
                const T* xrow = px + u * cin;
                for (Index co = 0; co < cout; ++co) {
                    const T* wrow = W.data() + (co * cin + 0) * k + kk;
                    T acc = 0;
                    for (Index ci = 0; ci < cin; ++ci) acc += xrow[ci] * wrow[ci * k];
                    orow[co] += acc;
                }
            }
        }
    }
    const bool ng = x.requires_grad() || W.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [x, W, b, out, B, tlen, cin, cout, k, pad]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            T* gx = x.requires_grad() ? x.grad().data() : nullptr;
            T* gw = W.requires_grad() ? W.grad().data() : nullptr;
            T* gb = b.requires_grad() ? b.grad().data() : nullptr;
            for (Index bb = 0; bb < B; ++bb) {
                const T* px = x.data() + bb * tlen * cin;
                const T* pg = g + bb * tlen * cout;
                T* pgx = gx ? gx + bb * tlen * cin : nullptr;
                for (Index t = 0; t < tlen; ++t) {
                    const T* grow = pg + t * cout;
                    if (gb)
                        for (Index co = 0; co < cout; ++co) gb[co] += grow[co];
                    for (Index kk = 0; kk < k; ++kk) {
                        const Index u = t + kk - pad;
                        if (u < 0 || u >= tlen) continue;
                        const T* xrow = px + u * cin;
                        T* gxrow = pgx ? pgx + u * cin : nullptr;
                        for (Index co = 0; co < cout; ++co) {
                            const T gv = grow[co];
                            if (gv == T(0)) continue;
                            const T* wbase = W.data() + co * cin * k + kk;
                            if (gxrow)
                                for (Index ci = 0; ci < cin; ++ci) gxrow[ci] += gv * wbase[ci * k];
                            if (gw) {
                                T* gwbase = gw + co * cin * k + kk;
                                for (Index ci = 0; ci < cin; ++ci) gwbase[ci * k] += gv * xrow[ci];
                            }
                        }
                    }
                }
            }
        },
        "conv1d");
    return out;
}

// Per-channel conv along time, kernels [C,K], bias [C]; x is [T,C] or [B,T,C].
template <typename T>
Tensor<T> depthwise_conv1d(Tape<T>* tape, Tensor<T> x, Tensor<T> kernels,
                           Tensor<T> b) {
    require_shape(kernels.rank() == 2,
                  "depthwise_conv1d: kernels must be [C,K], got " + shape_str(kernels.shape()));
    const Index c = kernels.dim(0), k = kernels.dim(1);
    detail::conv1d_require(x, c, k, "depthwise_conv1d");
    require_shape(b.rank() == 1 && b.dim(0) == c,
                  "depthwise_conv1d: bias shape " + shape_str(b.shape()) + " does not match kernels " +
                      shape_str(kernels.shape()));
    const bool batched = x.rank() == 3;
    const Index B = batched ? x.dim(0) : 1;
    const Index tlen = batched ? x.dim(1) : x.dim(0);
    const Index pad = (k - 1) / 2;
    Tensor<T> out(x.shape());
    for (Index bb = 0; bb < B; ++bb) {
        const T* px = x.data() + bb * tlen * c;
        T* po = out.data() + bb * tlen * c;
        for (Index t = 0; t < tlen; ++t) {
            T* orow = po + t * c;
            for (Index ci = 0; ci < c; ++ci) orow[ci] = b.at(ci);
            for (Index kk = 0; kk < k; ++kk) {
                const Index u = t + kk - pad;
                if (u < 0 || u >= tlen) continue;
                const T* xrow = px + u * c;
                const T* krow = kernels.data() + kk;
                for (Index ci = 0; ci < c; ++ci) orow[ci] += xrow[ci] * krow[ci * k];
            }
        }
    }
    const bool ng = x.requires_grad() || kernels.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [x, kernels, b, out, B, tlen, c, k, pad]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            T* gx = x.requires_grad() ? x.grad().data() : nullptr;
            T* gk = kernels.requires_grad() ? kernels.grad().data() : nullptr;
            T* gb = b.requires_grad() ? b.grad().data() : nullptr;
            for (Index bb = 0; bb < B; ++bb) {
                const T* px = x.data() + bb * tlen * c;
                const T* pg = g + bb * tlen * c;
                T* pgx = gx ? gx + bb * tlen * c : nullptr;
                for (Index t = 0; t < tlen; ++t) {
                    const T* grow = pg + t * c;
                    if (gb)
                        for (Index ci = 0; ci < c; ++ci) gb[ci] += grow[ci];
                    for (Index kk = 0; kk < k; ++kk) {
                        const Index u = t + kk - pad;
                        if (u < 0 || u >= tlen) continue;
                        const T* xrow = px + u * c;
                        T* gxrow = pgx ? pgx + u * c : nullptr;
                        for (Index ci = 0; ci < c; ++ci) {
                            const T gv = grow[ci];
                            if (gxrow) gxrow[ci] += gv * kernels.at(ci, kk);
                            if (gk) gk[ci * k + kk] += gv * xrow[ci];
                        }
                    }
                }
            }
        },
        "depthwise_conv1d");
    return out;
}

// ---------------------------------------------------------------- normalization

template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, Tensor<T> x, Tensor<T> gamma,
                     Tensor<T> beta, T eps = static_cast<T>(1e-5)) {
    require_config(eps > T(0), "layer_norm: eps must be positive");
    require_shape(x.rank() >= 1, "layer_norm: empty input");
    const Index c = x.shape().back();
    require_shape(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
                  "layer_norm: channel mismatch: x " + shape_str(x.shape()) + ", gamma " +
                      shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    const Index rows = x.numel() / c;
    Tensor<T> out(x.shape());
    // cache normalized values and 1/std per row for the backward pass
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * c));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    for (Index r = 0; r < rows; ++r) {
        const T* xrow = x.data() + r * c;
        T mean = 0;
        for (Index j = 0; j < c; ++j) mean += xrow[j];
        mean /= static_cast<T>(c);
        T var = 0;
        for (Index j = 0; j < c; ++j) {
            const T d = xrow[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T istd = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = istd;
        T* orow = out.data() + r * c;
        T* hrow = xhat->data() + r * c;
        for (Index j = 0; j < c; ++j) {
            const T h = (xrow[j] - mean) * istd;
            hrow[j] = h;
            orow[j] = h * gamma.at(j) + beta.at(j);
        }
    }
    const bool ng = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    finalize_op(
        tape, out, ng,
        [x, gamma, beta, out, xhat, inv_std, rows, c]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            T* gx = x.requires_grad() ? x.grad().data() : nullptr;
            T* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
            T* gb = beta.requires_grad() ? beta.grad().data() : nullptr;
            for (Index r = 0; r < rows; ++r) {
                const T* grow = g + r * c;
                const T* hrow = xhat->data() + r * c;
                if (gg || gb)
                    for (Index j = 0; j < c; ++j) {
                        if (gg) gg[j] += grow[j] * hrow[j];
                        if (gb) gb[j] += grow[j];
                    }
                if (gx) {
                    // dx = istd * (gdy - mean(gdy) - xhat * mean(gdy*xhat)), gdy = gamma*dy
                    T m1 = 0, m2 = 0;
                    for (Index j = 0; j < c; ++j) {
                        const T gd = grow[j] * gamma.at(j);
                        m1 += gd;
                        m2 += gd * hrow[j];
                    }
                    m1 /= static_cast<T>(c);
                    m2 /= static_cast<T>(c);
                    const T istd = (*inv_std)[static_cast<std::size_t>(r)];
                    T* gxrow = gx + r * c;
                    for (Index j = 0; j < c; ++j) {
                        const T gd = grow[j] * gamma.at(j);
                        gxrow[j] += istd * (gd - m1 - hrow[j] * m2);
                    }
                }
            }
        },
        "layer_norm");
    return out;
}

// ---------------------------------------------------------------- softmax

template <typename T>
Tensor<T> log_softmax(Tape<T>* tape, Tensor<T> x, int axis) {
    const int r = static_cast<int>(x.rank());
    if (axis < 0) axis += r;
    require_shape(axis >= 0 && axis < r,
                  "log_softmax: axis out of range for shape " + shape_str(x.shape()));
    const Index n = x.dim(static_cast<std::size_t>(axis));
    Index outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(static_cast<std::size_t>(i));
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(static_cast<std::size_t>(i));
    Tensor<T> out(x.shape());
    for (Index o = 0; o < outer; ++o)
        for (Index in = 0; in < inner; ++in) {
            const Index base = o * n * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (Index j = 0; j < n; ++j) mx = std::max(mx, x.at(base + j * inner));
            T lse = 0;
            for (Index j = 0; j < n; ++j) lse += std::exp(x.at(base + j * inner) - mx);
            lse = mx + std::log(lse);
            for (Index j = 0; j < n; ++j) out.at(base + j * inner) = x.at(base + j * inner) - lse;
        }
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out, outer, inner, n]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (Index o = 0; o < outer; ++o)
                for (Index in = 0; in < inner; ++in) {
                    const Index base = o * n * inner + in;
                    T gsum = 0;
                    for (Index j = 0; j < n; ++j) gsum += g[static_cast<std::size_t>(base + j * inner)];
                    for (Index j = 0; j < n; ++j) {
                        const Index p = base + j * inner;
                        gx[static_cast<std::size_t>(p)] +=
                            g[static_cast<std::size_t>(p)] - std::exp(out.at(p)) * gsum;
                    }
                }
        },
        "log_softmax");
    return out;
}

// ---------------------------------------------------------------- regularization

enum class Mode { train, eval };

template <typename T>
Tensor<T> dropout(Tape<T>* tape, Tensor<T> x, double p, Mode mode, Rng& rng) {
    require_config(p >= 0.0 && p < 1.0, "dropout: p must lie in [0,1), got " + std::to_string(p));
    if (mode == Mode::eval || p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(x.numel()));
    Tensor<T> out(x.shape());
    const Index n = x.numel();
    for (Index i = 0; i < n; ++i) {
        const bool keep = !rng.bernoulli(p);
        (*mask)[static_cast<std::size_t>(i)] = keep;
        out.at(i) = keep ? x.at(i) * keep_scale : T(0);
    }
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out, mask, keep_scale]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*mask)[i]) gx[i] += g[i] * keep_scale;
        },
        "dropout");
    return out;
}

// Zero out frames at positions >= lengths[b]. x is [B,T,C]. Idempotent.
template <typename T>
Tensor<T> apply_sequence_mask(Tape<T>* tape, Tensor<T> x, const std::vector<Index>& lengths) {
    require_shape(x.rank() == 3, "apply_sequence_mask: expected [B,T,C], got " + shape_str(x.shape()));
    const Index B = x.dim(0), tlen = x.dim(1), c = x.dim(2);
    require_shape(static_cast<Index>(lengths.size()) == B,
                  "apply_sequence_mask: got " + std::to_string(lengths.size()) + " lengths for batch " +
                      std::to_string(B));
    for (Index b = 0; b < B; ++b)
        require_shape(lengths[static_cast<std::size_t>(b)] >= 0 &&
                          lengths[static_cast<std::size_t>(b)] <= tlen,
                      "apply_sequence_mask: length " +
                          std::to_string(lengths[static_cast<std::size_t>(b)]) +
                          " exceeds padded time " + std::to_string(tlen));
    Tensor<T> out(x.shape());
    for (Index b = 0; b < B; ++b) {
        const Index len = lengths[static_cast<std::size_t>(b)];
        const T* src = x.data() + b * tlen * c;
        T* dst = out.data() + b * tlen * c;
        std::copy(src, src + len * c, dst);
        // tail stays zero
    }
    auto lens = std::make_shared<std::vector<Index>>(lengths);
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out, lens, B, tlen, c]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const T* g = out.grad().data();
            T* gx = x.grad().data();
            for (Index b = 0; b < B; ++b) {
                const Index len = (*lens)[static_cast<std::size_t>(b)];
                const T* gsrc = g + b * tlen * c;
                T* gdst = gx + b * tlen * c;
                for (Index i = 0; i < len * c; ++i) gdst[i] += gsrc[i];
            }
        },
        "apply_sequence_mask");
    return out;
}

// ---------------------------------------------------------------- gather/scatter

// Row lookup: table [V,C], ids length N -> [N,C].
template <typename T>
Tensor<T> embedding(Tape<T>* tape, Tensor<T> table, const std::vector<int>& ids) {
    require_shape(table.rank() == 2, "embedding: table must be [V,C], got " + shape_str(table.shape()));
    const Index v = table.dim(0), c = table.dim(1);
    const Index n = static_cast<Index>(ids.size());
    require_shape(n > 0, "embedding: empty id sequence");
    for (int id : ids)
        require_shape(id >= 0 && id < v,
                      "embedding: id " + std::to_string(id) + " outside table of size " + std::to_string(v));
    Tensor<T> out({n, c});
    for (Index i = 0; i < n; ++i) {
        const T* src = table.data() + static_cast<Index>(ids[static_cast<std::size_t>(i)]) * c;
        std::copy(src, src + c, out.data() + i * c);
    }
    auto idv = std::make_shared<std::vector<int>>(ids);
    finalize_op(
        tape, out, table.requires_grad(),
        [table, out, idv, c]() mutable {
            if (!out.has_grad() || !table.requires_grad()) return;
            const T* g = out.grad().data();
            T* gt = table.grad().data();
            for (std::size_t i = 0; i < idv->size(); ++i) {
                T* dst = gt + static_cast<Index>((*idv)[i]) * c;
                const T* src = g + static_cast<Index>(i) * c;
                for (Index j = 0; j < c; ++j) dst[j] += src[j];
            }
        },
        "embedding");
    return out;
}

// Slice sample b out of a padded batch: [B,T,C] -> [len,C].
template <typename T>
Tensor<T> select_batch(Tape<T>* tape, Tensor<T> x, Index b, Index len) {
    require_shape(x.rank() == 3, "select_batch: expected [B,T,C], got " + shape_str(x.shape()));
    require_shape(b >= 0 && b < x.dim(0), "select_batch: batch index out of range");
    require_shape(len >= 1 && len <= x.dim(1), "select_batch: length out of range");
    const Index tlen = x.dim(1), c = x.dim(2);
    Tensor<T> out({len, c});
    std::copy(x.data() + b * tlen * c, x.data() + b * tlen * c + len * c, out.data());
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out, b, len, tlen, c]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const T* g = out.grad().data();
            T* gx = x.grad().data() + b * tlen * c;
            for (Index i = 0; i < len * c; ++i) gx[i] += g[i];
        },
        "select_batch");
    return out;
}

// Stack variable-length [T_b,C] slices into a zero-padded [B,Tmax,C] batch.
template <typename T>
Tensor<T> stack_padded(Tape<T>* tape, const std::vector<Tensor<T>>& slices, Index t_max = 0) {
    require_shape(!slices.empty(), "stack_padded: empty slice list");
    const Index c = slices[0].shape().back();
    Index tm = t_max;
    for (const auto& s : slices) {
        require_shape(s.rank() == 2 && s.shape().back() == c,
                      "stack_padded: inconsistent slice shape " + shape_str(s.shape()));
        tm = std::max(tm, s.dim(0));
    }
    const Index B = static_cast<Index>(slices.size());
    Tensor<T> out({B, tm, c});
    for (Index b = 0; b < B; ++b) {
        const auto& s = slices[static_cast<std::size_t>(b)];
        std::copy(s.data(), s.data() + s.numel(), out.data() + b * tm * c);
    }
    bool ng = false;
    for (const auto& s : slices) ng = ng || s.requires_grad();
    auto kept = std::make_shared<std::vector<Tensor<T>>>(slices);
    finalize_op(
        tape, out, ng,
        [kept, out, tm, c]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            for (std::size_t b = 0; b < kept->size(); ++b) {
                auto& s = (*kept)[b];
                if (!s.requires_grad()) continue;
                T* gs = s.grad().data();
                const T* gsrc = g + static_cast<Index>(b) * tm * c;
                for (Index i = 0; i < s.numel(); ++i) gs[i] += gsrc[i];
            }
        },
        "stack_padded");
    return out;
}

// Expand token vectors by integer durations: [N,C] -> [sum(dur),C].
template <typename T>
Tensor<T> length_regulate(Tape<T>* tape, Tensor<T> x, const std::vector<Index>& durations) {
    require_shape(x.rank() == 2, "length_regulate: expected [N,C], got " + shape_str(x.shape()));
    require_shape(static_cast<Index>(durations.size()) == x.dim(0),
                  "length_regulate: " + std::to_string(durations.size()) + " durations for " +
                      std::to_string(x.dim(0)) + " tokens");
    Index total = 0;
    for (Index d : durations) {
        require_shape(d >= 0, "length_regulate: negative duration");
        total += d;
    }
    require_shape(total >= 1, "length_regulate: all durations are zero");
    const Index c = x.dim(1);
    Tensor<T> out({total, c});
    Index t = 0;
    for (std::size_t n = 0; n < durations.size(); ++n) {
        const T* src = x.data() + static_cast<Index>(n) * c;
        for (Index rep = 0; rep < durations[n]; ++rep) {
            std::copy(src, src + c, out.data() + t * c);
            ++t;
        }
    }
    auto durs = std::make_shared<std::vector<Index>>(durations);
    finalize_op(
        tape, out, x.requires_grad(),
        [x, out, durs, c]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            const T* g = out.grad().data();
            T* gx = x.grad().data();
            Index t = 0;
            for (std::size_t n = 0; n < durs->size(); ++n) {
                T* dst = gx + static_cast<Index>(n) * c;
                for (Index rep = 0; rep < (*durs)[n]; ++rep) {
                    const T* src = g + t * c;
                    for (Index j = 0; j < c; ++j) dst[j] += src[j];
                    ++t;
                }
            }
        },
        "length_regulate");
    return out;
}

// Pairwise Euclidean distances: a [N,D], b [T,D] -> [T,N] with d[t,n] = |a_n - b_t|.
template <typename T>
Tensor<T> pairwise_l2(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    require_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "pairwise_l2: dimension mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
    const Index n = a.dim(0), tlen = b.dim(0), d = a.dim(1);
    // tiny bias keeps the sqrt differentiable at coincident points
    const T eps = static_cast<T>(1e-12);
    Tensor<T> out({tlen, n});
    for (Index t = 0; t < tlen; ++t)
        for (Index j = 0; j < n; ++j) {
            const T* arow = a.data() + j * d;
            const T* brow = b.data() + t * d;
            T ssq = 0;
            for (Index kk = 0; kk < d; ++kk) {
                const T diff = arow[kk] - brow[kk];
                ssq += diff * diff;
            }
            out.at(t, j) = std::sqrt(ssq + eps);
        }
    const bool ng = a.requires_grad() || b.requires_grad();
    finalize_op(
        tape, out, ng,
        [a, b, out, n, tlen, d]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            T* ga = a.requires_grad() ? a.grad().data() : nullptr;
            T* gb = b.requires_grad() ? b.grad().data() : nullptr;
            for (Index t = 0; t < tlen; ++t)
                for (Index j = 0; j < n; ++j) {
                    const T gv = g[t * n + j];
                    if (gv == T(0)) continue;
                    const T dist = out.at(t, j);
                    const T* arow = a.data() + j * d;
                    const T* brow = b.data() + t * d;
                    const T s = gv / dist;
                    for (Index kk = 0; kk < d; ++kk) {
                        const T diff = arow[kk] - brow[kk];
                        if (ga) ga[j * d + kk] += s * diff;
                        if (gb) gb[t * d + kk] -= s * diff;
                    }
                }
        },
        "pairwise_l2");
    return out;
}

template <typename T>
Tensor<T> detach(Tensor<T> x) {
    return x.detached_copy();
}

}  // namespace mixtts
