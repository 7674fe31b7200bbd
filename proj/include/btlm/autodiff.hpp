#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "btlm/error.hpp"
#include "btlm/tensor.hpp"

namespace btlm {

// A trainable tensor. Owned by a model; tapes hold non-owning references to
// it for the lifetime of one forward/backward pass.
template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(zeros_like(value)) {}

    void zero_grad() { grad.fill(T(0)); }
};

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
};

// Contiguous token range of one independent sequence inside a packed batch.
struct Segment {
    std::size_t start = 0;
    std::size_t length = 0;
};

// Records operations in execution order; backward() replays them in reverse.
// With recording disabled the same op functions compute values only.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var<T> constant(Tensor<T> value) { return push(std::move(value), false); }

    Var<T> param(Param<T>& p) {
        auto v = push(p.value, record_);
        nodes_[v.id].param = &p;
        return v;
    }

    // Registers an op result. `backward` receives the node id; it is only
    // stored when at least one input needs a gradient.
    Var<T> push(Tensor<T> value, bool needs_grad, BackwardFn backward = {}) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = record_ && needs_grad;
        if (n.needs_grad) {
            n.backward = std::move(backward);
        }
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }
    const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }

    // Gradient buffer of a node, allocated on first use.
    Tensor<T>& grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) {
            n.grad = zeros_like(n.value);
        }
        return n.grad;
    }
    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    // Populates Param::grad for every parameter reachable from `loss`
    // (accumulating into whatever the optimizer left there, normally zero).
    void backward(Var<T> loss) {
        if (loss.tape != this) {
            throw ContractError("backward: loss belongs to a different tape");
        }
        if (!record_) {
            throw ContractError("backward: tape was created with recording disabled");
        }
        if (consumed_) {
            throw ContractError("backward: tape already consumed by a previous backward pass");
        }
        if (value(loss).size() != 1) {
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
        }
        consumed_ = true;
        grad(loss.id)[0] = T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty()) {
                continue;
            }
            if (n.backward) {
                n.backward(*this, i);
            }
            if (n.param != nullptr) {
                auto& pg = n.param->grad;
                for (std::size_t j = 0; j < pg.size(); ++j) {
                    pg[j] += n.grad[j];
                }
            }
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        Param<T>* param = nullptr;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
    bool record_;
    bool consumed_ = false;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(*this);
}

namespace detail {

template <class T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
    if (a.tape != b.tape) {
        throw ContractError(std::string(op) + ": operands live on different tapes");
    }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scalar kernels shared by the tape ops and the incremental decoder.

namespace kernels {

template <class T>
T gelu(T x) {
    return x * T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

// c[m x n] += x[m x k] y[k x n], four output rows per pass over y. Each
// element still sums over k in order, so blocking does not change results.
template <class T>
void gemm_acc(const T* __restrict x, const T* __restrict y, T* __restrict c, std::size_t m, std::size_t k,
              std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        T* __restrict c0 = c + i * n;
        T* __restrict c1 = c0 + n;
        T* __restrict c2 = c1 + n;
        T* __restrict c3 = c2 + n;
        const T* x0 = x + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T a0 = x0[kk], a1 = x0[k + kk], a2 = x0[2 * k + kk], a3 = x0[3 * k + kk];
            const T* __restrict yr = y + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T b = yr[j];
                c0[j] += a0 * b;
                c1[j] += a1 * b;
                c2[j] += a2 * b;
                c3[j] += a3 * b;
            }
        }
    }
    for (; i < m; ++i) {
        T* __restrict ci = c + i * n;
        const T* xi = x + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T a = xi[kk];
            const T* __restrict yr = y + kk * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += a * yr[j];
        }
    }
}

// out = x W for a row vector x and an [in x out] matrix W.
template <class T>
void vecmat(std::span<const T> x, const Tensor<T>& w, std::span<T> out) {
    const std::size_t n = w.cols();
    std::fill(out.begin(), out.end(), T(0));
    for (std::size_t k = 0; k < x.size(); ++k) {
        const T xk = x[k];
        const T* wr = w.data() + k * n;
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += xk * wr[j];
        }
    }
}

template <class T>
void layer_norm_row(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, T eps,
                    std::span<T> out, T* rstd_out = nullptr) {
    const std::size_t n = x.size();
    T mean = 0;
    for (auto v : x) mean += v;
    mean /= T(n);
    T var = 0;
    for (auto v : x) var += (v - mean) * (v - mean);
    var /= T(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    if (rstd_out) *rstd_out = rstd;
}

template <class T>
void softmax_inplace(std::span<T> x) {
    T mx = -std::numeric_limits<T>::infinity();
    for (auto v : x) mx = std::max(mx, v);
    T s = 0;
    for (auto& v : x) {
        v = std::exp(v - mx);
        s += v;
    }
    for (auto& v : x) v /= s;
}

template <class T>
void log_softmax_inplace(std::span<T> x) {
    T mx = -std::numeric_limits<T>::infinity();
    for (auto v : x) mx = std::max(mx, v);
    T s = 0;
    for (auto v : x) s += std::exp(v - mx);
    const T lse = mx + std::log(s);
    for (auto& v : x) v -= lse;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Differentiable ops.

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b, "matmul");
    auto& tp = *a.tape;
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.shape().size() != 2 || B.shape().size() != 2 || A.cols() != B.rows()) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(A.shape()) + " x " +
                             shape_str(B.shape()));
    }
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor<T> C({m, n});
    kernels::gemm_acc(A.data(), B.data(), C.data(), m, k, n);
    const bool ga = tp.needs_grad(a), gb = tp.needs_grad(b);
    return tp.push(std::move(C), ga || gb, [a, b, ga, gb, m, k, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        const auto& A = t.value(a.id);
        const auto& B = t.value(b.id);
        if (ga) {
            // dA += G B^T
            std::vector<T> bt(n * k);
            for (std::size_t kk = 0; kk < k; ++kk)
                for (std::size_t j = 0; j < n; ++j) bt[j * k + kk] = B.data()[kk * n + j];
            kernels::gemm_acc(G.data(), bt.data(), t.grad(a.id).data(), m, n, k);
        }
        if (gb) {
            // dB += A^T G
            std::vector<T> at(k * m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) at[kk * m + i] = A.data()[i * k + kk];
            kernels::gemm_acc(at.data(), G.data(), t.grad(b.id).data(), k, m, n);
        }
    });
}

template <class T>
Var<T> transpose(Var<T> a) {
    auto& tp = *a.tape;
    const auto& A = a.value();
    const std::size_t m = A.rows(), n = A.cols();
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = A(i, j);
    return tp.push(std::move(out), tp.needs_grad(a), [a, m, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        auto& d = t.grad(a.id);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) d(i, j) += G(j, i);
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b, "add");
    detail::require_same_shape(a.value(), b.value(), "add");
    auto& tp = *a.tape;
    Tensor<T> out = a.value();
    const auto& B = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    const bool ga = tp.needs_grad(a), gb = tp.needs_grad(b);
    return tp.push(std::move(out), ga || gb, [a, b, ga, gb](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        for (auto [id, on] : {std::pair{a.id, ga}, std::pair{b.id, gb}}) {
            if (!on) continue;
            auto& d = t.grad(id);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
        }
    });
}

// a [m x n] + b broadcast over rows; b holds n values.
template <class T>
Var<T> add_rowvec(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b, "add_rowvec");
    auto& tp = *a.tape;
    const auto& A = a.value();
    const auto& B = b.value();
    if (B.size() != A.cols()) {
        throw DimensionError("add_rowvec: " + shape_str(A.shape()) + " + " + shape_str(B.shape()));
    }
    Tensor<T> out = A;
    const std::size_t m = A.rows(), n = A.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] += B[j];
    const bool ga = tp.needs_grad(a), gb = tp.needs_grad(b);
    return tp.push(std::move(out), ga || gb, [a, b, ga, gb, m, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        if (ga) {
            auto& d = t.grad(a.id);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
        }
        if (gb) {
            auto& d = t.grad(b.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) d[j] += G.data()[i * n + j];
        }
    });
}

template <class T>
Var<T> add_const(Var<T> a, const Tensor<T>& c) {
    detail::require_same_shape(a.value(), c, "add_const");
    auto& tp = *a.tape;
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
    return tp.push(std::move(out), tp.needs_grad(a), [a](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        auto& d = t.grad(a.id);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b, "mul");
    detail::require_same_shape(a.value(), b.value(), "mul");
    auto& tp = *a.tape;
    Tensor<T> out = a.value();
    const auto& B = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    const bool ga = tp.needs_grad(a), gb = tp.needs_grad(b);
    return tp.push(std::move(out), ga || gb, [a, b, ga, gb](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        if (ga) {
            auto& d = t.grad(a.id);
            const auto& B = t.value(b.id);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * B[i];
        }
        if (gb) {
            auto& d = t.grad(b.id);
            const auto& A = t.value(a.id);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * A[i];
        }
    });
}

template <class T>
Var<T> mul_const(Var<T> a, Tensor<T> c) {
    detail::require_same_shape(a.value(), c, "mul_const");
    auto& tp = *a.tape;
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
    return tp.push(std::move(out), tp.needs_grad(a), [a, c = std::move(c)](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        auto& d = t.grad(a.id);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * c[i];
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    auto& tp = *a.tape;
    Tensor<T> out = a.value();
    for (auto& v : out.span()) v *= s;
    return tp.push(std::move(out), tp.needs_grad(a), [a, s](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        auto& d = t.grad(a.id);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * s;
    });
}

template <class T>
Var<T> sum(Var<T> a) {
    auto& tp = *a.tape;
    T s = 0;
    for (auto v : a.value().span()) s += v;
    return tp.push(Tensor<T>::scalar(s), tp.needs_grad(a), [a](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        auto& d = t.grad(a.id);
        for (auto& v : d.span()) v += g;
    });
}

template <class T>
Var<T> gelu(Var<T> a) {
    auto& tp = *a.tape;
    Tensor<T> out = a.value();
    for (auto& v : out.span()) v = kernels::gelu(v);
    return tp.push(std::move(out), tp.needs_grad(a), [a](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        const auto& X = t.value(a.id);
        auto& d = t.grad(a.id);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * kernels::gelu_grad(X[i]);
    });
}

// Softmax along axis 1 (within each row) or axis 0 (within each column).
template <class T>
Var<T> softmax(Var<T> a, int axis = 1) {
    auto& tp = *a.tape;
    const auto& X = a.value();
    if (axis != 0 && axis != 1) {
        throw DimensionError("softmax: axis must be 0 or 1");
    }
    const std::size_t m = X.rows(), n = X.cols();
    // Lines are rows for axis 1, columns for axis 0.
    const std::size_t lines = axis == 1 ? m : n, len = axis == 1 ? n : m;
    const std::size_t stride = axis == 1 ? 1 : n, line_step = axis == 1 ? n : 1;
    Tensor<T> out = X;
    std::vector<T> buf(len);
    for (std::size_t l = 0; l < lines; ++l) {
        for (std::size_t i = 0; i < len; ++i) buf[i] = out[l * line_step + i * stride];
        kernels::softmax_inplace(std::span<T>(buf));
        for (std::size_t i = 0; i < len; ++i) out[l * line_step + i * stride] = buf[i];
    }
    return tp.push(std::move(out), tp.needs_grad(a),
                   [a, lines, len, stride, line_step](Tape<T>& t, std::size_t self) {
                       const auto& G = t.grad(self);
                       const auto& Y = t.value(self);
                       auto& d = t.grad(a.id);
                       for (std::size_t l = 0; l < lines; ++l) {
                           T dot = 0;
                           for (std::size_t i = 0; i < len; ++i) {
                               const auto idx = l * line_step + i * stride;
                               dot += G[idx] * Y[idx];
                           }
                           for (std::size_t i = 0; i < len; ++i) {
                               const auto idx = l * line_step + i * stride;
                               d[idx] += Y[idx] * (G[idx] - dot);
                           }
                       }
                   });
}

// Row-wise layer normalization with biased variance, then gain/bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
    detail::require_same_tape(x, gain, "layer_norm");
    detail::require_same_tape(x, bias, "layer_norm");
    auto& tp = *x.tape;
    const auto& X = x.value();
    const std::size_t m = X.rows(), n = X.cols();
    if (gain.value().size() != n || bias.value().size() != n) {
        throw DimensionError("layer_norm: affine parameters must have " + std::to_string(n) + " entries");
    }
    Tensor<T> out(X.shape());
    Tensor<T> xhat(X.shape());
    std::vector<T> rstd(m);
    const auto& g = gain.value();
    const auto& b = bias.value();
    for (std::size_t i = 0; i < m; ++i) {
        kernels::layer_norm_row(X.row(i), g.span(), b.span(), eps, out.row(i), &rstd[i]);
        T mean = 0;
        for (auto v : X.row(i)) mean += v;
        mean /= T(n);
        for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (X(i, j) - mean) * rstd[i];
    }
    const bool gx = tp.needs_grad(x), gg = tp.needs_grad(gain), gbias = tp.needs_grad(bias);
    return tp.push(std::move(out), gx || gg || gbias,
                   [x, gain, bias, gx, gg, gbias, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](
                       Tape<T>& t, std::size_t self) {
                       const auto& G = t.grad(self);
                       const auto& g = t.value(gain.id);
                       if (gg) {
                           auto& d = t.grad(gain.id);
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) d[j] += G(i, j) * xhat(i, j);
                       }
                       if (gbias) {
                           auto& d = t.grad(bias.id);
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) d[j] += G(i, j);
                       }
                       if (gx) {
                           auto& d = t.grad(x.id);
                           for (std::size_t i = 0; i < m; ++i) {
                               T mean_dxh = 0, mean_dxh_xh = 0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const T dxh = G(i, j) * g[j];
                                   mean_dxh += dxh;
                                   mean_dxh_xh += dxh * xhat(i, j);
                               }
                               mean_dxh /= T(n);
                               mean_dxh_xh /= T(n);
                               for (std::size_t j = 0; j < n; ++j) {
                                   const T dxh = G(i, j) * g[j];
                                   d(i, j) += rstd[i] * (dxh - mean_dxh - xhat(i, j) * mean_dxh_xh);
                               }
                           }
                       }
                   });
}

// Row lookup: out[r] = table[ids[r]].
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<int> ids) {
    auto& tp = *table.tape;
    const auto& E = table.value();
    const std::size_t d = E.cols();
    Tensor<T> out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= E.rows()) {
            throw InputError("token id " + std::to_string(ids[r]) + " at position " + std::to_string(r) +
                             " is outside the vocabulary of size " + std::to_string(E.rows()));
        }
        std::copy_n(E.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
    }
    return tp.push(std::move(out), tp.needs_grad(table), [table, ids = std::move(ids), d](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad(self);
        auto& dE = t.grad(table.id);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            T* dst = dE.data() + static_cast<std::size_t>(ids[r]) * d;
            const T* src = G.data() + r * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

// Scaled dot-product multi-head attention over packed sequences. Position t
// of a segment attends to positions 0..t of the same segment only; future
// keys are never visited, so no mask matrix exists.
template <class T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::vector<Segment> segments, std::size_t n_heads) {
    detail::require_same_tape(q, k, "causal_attention");
    detail::require_same_tape(q, v, "causal_attention");
    auto& tp = *q.tape;
    const auto& Q = q.value();
    const auto& K = k.value();
    const auto& V = v.value();
    detail::require_same_shape(Q, K, "causal_attention");
    detail::require_same_shape(Q, V, "causal_attention");
    const std::size_t d = Q.cols();
    if (n_heads == 0 || d % n_heads != 0) {
        throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(n_heads) + " heads");
    }
    const std::size_t hd = d / n_heads;
    const T inv_sqrt = T(1) / std::sqrt(T(hd));
    Tensor<T> out(Q.shape());
    // Attention weights, per (segment, head, t): t+1 entries, stored densely.
    std::vector<T> weights;
    std::vector<T> s;
    for (const auto& seg : segments) {
        if (seg.start + seg.length > Q.rows()) {
            throw DimensionError("causal_attention: segment exceeds packed batch");
        }
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t t = 0; t < seg.length; ++t) {
                const T* qt = Q.data() + (seg.start + t) * d + off;
                s.assign(t + 1, T(0));
                for (std::size_t j = 0; j <= t; ++j) {
                    const T* kj = K.data() + (seg.start + j) * d + off;
                    T dot = 0;
                    for (std::size_t c = 0; c < hd; ++c) dot += qt[c] * kj[c];
                    s[j] = dot * inv_sqrt;
                }
                kernels::softmax_inplace(std::span<T>(s));
                T* ot = out.data() + (seg.start + t) * d + off;
                for (std::size_t j = 0; j <= t; ++j) {
                    const T* vj = V.data() + (seg.start + j) * d + off;
                    for (std::size_t c = 0; c < hd; ++c) ot[c] += s[j] * vj[c];
                }
                weights.insert(weights.end(), s.begin(), s.end());
            }
        }
    }
    const bool any = tp.needs_grad(q) || tp.needs_grad(k) || tp.needs_grad(v);
    return tp.push(
        std::move(out), any,
        [q, k, v, segments = std::move(segments), weights = std::move(weights), n_heads, hd, d, inv_sqrt](
            Tape<T>& t_, std::size_t self) {
            const auto& G = t_.grad(self);
            const auto& Q = t_.value(q.id);
            const auto& K = t_.value(k.id);
            const auto& V = t_.value(v.id);
            auto& dQ = t_.grad(q.id);
            auto& dK = t_.grad(k.id);
            auto& dV = t_.grad(v.id);
            std::size_t w = 0;
            std::vector<T> da;
            for (const auto& seg : segments) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t off = h * hd;
                    for (std::size_t t = 0; t < seg.length; ++t) {
                        const T* a = weights.data() + w;
                        const T* gt = G.data() + (seg.start + t) * d + off;
                        da.assign(t + 1, T(0));
                        T dot = 0;
                        for (std::size_t j = 0; j <= t; ++j) {
                            const T* vj = V.data() + (seg.start + j) * d + off;
                            T* dvj = dV.data() + (seg.start + j) * d + off;
                            T acc = 0;
                            for (std::size_t c = 0; c < hd; ++c) {
                                acc += gt[c] * vj[c];
                                dvj[c] += a[j] * gt[c];
                            }
                            da[j] = acc;
                            dot += a[j] * acc;
                        }
                        const T* qt = Q.data() + (seg.start + t) * d + off;
                        T* dqt = dQ.data() + (seg.start + t) * d + off;
                        for (std::size_t j = 0; j <= t; ++j) {
                            const T ds = a[j] * (da[j] - dot) * inv_sqrt;
                            const T* kj = K.data() + (seg.start + j) * d + off;
                            T* dkj = dK.data() + (seg.start + j) * d + off;
                            for (std::size_t c = 0; c < hd; ++c) {
                                dqt[c] += ds * kj[c];
                                dkj[c] += ds * qt[c];
                            }
                        }
                        w += t + 1;
                    }
                }
            }
        });
}

// Sum over rows of -log softmax(logits[r])[targets[r]]. Rows whose target is
// negative (padding) contribute nothing.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::vector<int> targets) {
    auto& tp = *logits.tape;
    const auto& L = logits.value();
    if (targets.size() != L.rows()) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(L.rows()) + " rows");
    }
    const std::size_t n = L.cols();
    Tensor<T> probs = L;
    T loss = 0;
    for (std::size_t r = 0; r < L.rows(); ++r) {
        if (targets[r] < 0) continue;
        if (static_cast<std::size_t>(targets[r]) >= n) {
            throw InputError("cross_entropy: target id " + std::to_string(targets[r]) + " out of range");
        }
        auto row = probs.row(r);
        kernels::log_softmax_inplace(row);
        loss -= row[static_cast<std::size_t>(targets[r])];
        for (auto& p : row) p = std::exp(p);
    }
    return tp.push(Tensor<T>::scalar(loss), tp.needs_grad(logits),
                   [logits, targets = std::move(targets), probs = std::move(probs), n](Tape<T>& t, std::size_t self) {
                       const T g = t.grad(self)[0];
                       auto& d = t.grad(logits.id);
                       for (std::size_t r = 0; r < targets.size(); ++r) {
                           if (targets[r] < 0) continue;
                           for (std::size_t j = 0; j < n; ++j) d(r, j) += g * probs(r, j);
                           d(r, static_cast<std::size_t>(targets[r])) -= g;
                       }
                   });
}

// Reparameterized draw mu + exp(log_sigma) * eps with eps supplied by the caller.
template <class T>
Var<T> reparameterize(Var<T> mu, Var<T> log_sigma, const Tensor<T>& eps) {
    detail::require_same_tape(mu, log_sigma, "reparameterize");
    detail::require_same_shape(mu.value(), log_sigma.value(), "reparameterize");
    detail::require_same_shape(mu.value(), eps, "reparameterize");
    auto& tp = *mu.tape;
    Tensor<T> out = mu.value();
    Tensor<T> sig_eps = eps;
    const auto& LS = log_sigma.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        sig_eps[i] = std::exp(LS[i]) * eps[i];
        out[i] += sig_eps[i];
    }
    const bool gm = tp.needs_grad(mu), gs = tp.needs_grad(log_sigma);
    return tp.push(std::move(out), gm || gs,
                   [mu, log_sigma, gm, gs, sig_eps = std::move(sig_eps)](Tape<T>& t, std::size_t self) {
                       const auto& G = t.grad(self);
                       if (gm) {
                           auto& d = t.grad(mu.id);
                           for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
                       }
                       if (gs) {
                           auto& d = t.grad(log_sigma.id);
                           for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * sig_eps[i];
                       }
                   });
}

// KL(N(mu, exp(log_sigma)^2) || N(prior_mu, prior_sigma^2)) summed over
// elements. Written in terms of r = log_sigma - log(prior_sigma) so that a
// posterior equal to its prior gives exactly zero.
template <class T>
T gaussian_kl_term(T mu, T log_sigma, T prior_mu, T prior_sigma, T* dmu = nullptr, T* dlog_sigma = nullptr) {
    const T r = log_sigma - std::log(prior_sigma);
    const T e = std::expm1(T(2) * r);
    const T diff = mu - prior_mu;
    const T var_r = prior_sigma * prior_sigma;
    if (dmu) *dmu = diff / var_r;
    if (dlog_sigma) *dlog_sigma = e;
    return (e - T(2) * r) / T(2) + diff * diff / (T(2) * var_r);
}

template <class T>
Var<T> gaussian_kl(Var<T> mu, Var<T> log_sigma, const Tensor<T>& prior_mu, const Tensor<T>& prior_sigma) {
    detail::require_same_tape(mu, log_sigma, "gaussian_kl");
    detail::require_same_shape(mu.value(), log_sigma.value(), "gaussian_kl");
    detail::require_same_shape(mu.value(), prior_mu, "gaussian_kl");
    detail::require_same_shape(mu.value(), prior_sigma, "gaussian_kl");
    auto& tp = *mu.tape;
    const auto& M = mu.value();
    const auto& LS = log_sigma.value();
    const std::size_t n = M.size();
    Tensor<T> dmu(M.shape()), dls(M.shape());
    T kl = 0;
    for (std::size_t i = 0; i < n; ++i) {
        kl += gaussian_kl_term(M[i], LS[i], prior_mu[i], prior_sigma[i], &dmu[i], &dls[i]);
    }
    const bool gm = tp.needs_grad(mu), gs = tp.needs_grad(log_sigma);
    return tp.push(Tensor<T>::scalar(kl), gm || gs,
                   [mu, log_sigma, gm, gs, dmu = std::move(dmu), dls = std::move(dls)](Tape<T>& t, std::size_t self) {
                       const T g = t.grad(self)[0];
                       if (gm) {
                           auto& d = t.grad(mu.id);
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * dmu[i];
                       }
                       if (gs) {
                           auto& d = t.grad(log_sigma.id);
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * dls[i];
                       }
                   });
}

}  // namespace btlm
