#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace flame {

namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n]
template <typename S>
void gemm_nn(const S* __restrict a, const S* __restrict b, S* __restrict c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        S* crow = c + i * n;
        if (!accumulate)
            for (std::size_t j = 0; j < n; ++j) crow[j] = S(0);
        const S* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const S av = arow[kk];
            const S* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename S>
void gemm_nt(const S* __restrict a, const S* __restrict b, S* __restrict c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const S* brow = b + j * k;
            S acc = S(0);
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C[k,n] (+)= A[m,k]^T * D[m,n]
template <typename S>
void gemm_tn(const S* __restrict a, const S* __restrict d, S* __restrict c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < k * n; ++i) c[i] = S(0);
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        const S* drow = d + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const S av = arow[kk];
            S* crow = c + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * drow[j];
        }
    }
}

template <typename S>
S log_guarded(S p) {
    return std::log(std::max(p, S(1e-12)));
}

// In-place softmax of a contiguous row with max subtraction.
template <typename S>
void softmax_row(S* row, std::size_t n) {
    S m = row[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, row[i]);
    S sum = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - m);
        sum += row[i];
    }
    const S inv = S(1) / sum;
    for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
}

inline std::size_t leading_rows(const std::vector<int>& shape) {
    std::size_t rows = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= static_cast<std::size_t>(shape[i]);
    return rows;
}

}  // namespace detail

// out = a @ b. a is [..., k] (leading axes flattened to rows), b is [k, n].
template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b, Tape<S>* tape) {
    if (a.rank() < 2 || b.rank() != 2)
        throw ShapeError("matmul expects a rank>=2 lhs and rank-2 rhs");
    const std::size_t k = static_cast<std::size_t>(a.dim(a.rank() - 1));
    if (k != static_cast<std::size_t>(b.dim(0)))
        throw ShapeError("matmul inner dimensions disagree: " + detail::shape_string(a.shape()) +
                         " vs " + detail::shape_string(b.shape()));
    const std::size_t m = detail::leading_rows(a.shape());
    const std::size_t n = static_cast<std::size_t>(b.dim(1));
    std::vector<int> out_shape = a.shape();
    out_shape.back() = static_cast<int>(n);
    Tensor<S> out = Tensor<S>::uninitialized(out_shape);
    detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    if (tracing(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            if (a.requires_grad()) detail::gemm_nt(dout, b.data(), a.ensure_grad(), m, n, k, true);
            if (b.requires_grad()) detail::gemm_tn(a.data(), dout, b.ensure_grad(), m, k, n, true);
        });
    }
    return out;
}

// out = a @ b^T. a is [m, k], b is [n, k].
template <typename S>
Tensor<S> matmul_nt(Tensor<S> a, Tensor<S> b, Tape<S>* tape) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt expects [m,k] and [n,k], got " + detail::shape_string(a.shape()) +
                         " and " + detail::shape_string(b.shape()));
    const std::size_t m = static_cast<std::size_t>(a.dim(0));
    const std::size_t k = static_cast<std::size_t>(a.dim(1));
    const std::size_t n = static_cast<std::size_t>(b.dim(0));
    Tensor<S> out = Tensor<S>::uninitialized({static_cast<int>(m), static_cast<int>(n)});
    detail::gemm_nt(a.data(), b.data(), out.data(), m, k, n, false);
    if (tracing(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            if (a.requires_grad()) detail::gemm_nn(dout, b.data(), a.ensure_grad(), m, n, k, true);
            if (b.requires_grad()) detail::gemm_tn(dout, a.data(), b.ensure_grad(), m, n, k, true);
        });
    }
    return out;
}

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b, Tape<S>* tape) {
    if (!a.same_shape(b))
        throw ShapeError("add shape mismatch: " + detail::shape_string(a.shape()) + " vs " +
                         detail::shape_string(b.shape()));
    Tensor<S> out = Tensor<S>::uninitialized(a.shape());
    const std::size_t n = a.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (tracing(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            if (a.requires_grad()) {
                S* da = a.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) da[i] += dout[i];
            }
            if (b.requires_grad()) {
                S* db = b.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) db[i] += dout[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(Tensor<S> a, S c, Tape<S>* tape) {
    Tensor<S> out = Tensor<S>::uninitialized(a.shape());
    const std::size_t n = a.numel();
    const S* pa = a.data();
    S* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = c * pa[i];
    if (tracing(tape, a.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, out, c, n]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            S* da = a.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) da[i] += c * dout[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b, Tape<S>* tape) {
    if (!a.same_shape(b))
        throw ShapeError("mul shape mismatch: " + detail::shape_string(a.shape()) + " vs " +
                         detail::shape_string(b.shape()));
    Tensor<S> out = Tensor<S>::uninitialized(a.shape());
    const std::size_t n = a.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (tracing(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            if (a.requires_grad()) {
                S* da = a.ensure_grad();
                const S* pb2 = b.data();
                for (std::size_t i = 0; i < n; ++i) da[i] += dout[i] * pb2[i];
            }
            if (b.requires_grad()) {
                S* db = b.ensure_grad();
                const S* pa2 = a.data();
                for (std::size_t i = 0; i < n; ++i) db[i] += dout[i] * pa2[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum(Tensor<S> a, Tape<S>* tape) {
    S acc = S(0);
    const S* pa = a.data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) acc += pa[i];
    Tensor<S> out = Tensor<S>::scalar(acc);
    if (tracing(tape, a.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, out, n]() mutable {
            if (!out.has_grad()) return;
            const S d = out.grad_data()[0];
            S* da = a.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) da[i] += d;
        });
    }
    return out;
}

template <typename S>
Tensor<S> relu(Tensor<S> a, Tape<S>* tape) {
    Tensor<S> out = Tensor<S>::uninitialized(a.shape());
    const std::size_t n = a.numel();
    const S* pa = a.data();
    S* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] > S(0) ? pa[i] : S(0);
    if (tracing(tape, a.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, out, n]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            const S* pa2 = a.data();
            S* da = a.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                if (pa2[i] > S(0)) da[i] += dout[i];
        });
    }
    return out;
}

// Softmax along one axis with max subtraction. axis may be negative.
template <typename S>
Tensor<S> softmax(Tensor<S> a, int axis, Tape<S>* tape) {
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank())
        throw ContractError("softmax axis out of range for shape " + detail::shape_string(a.shape()));
    const std::size_t n = static_cast<std::size_t>(a.dim(axis));
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.dim(i));
    for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<std::size_t>(a.dim(i));
    Tensor<S> out = Tensor<S>::uninitialized(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const S* x = pa + o * n * inner + in;
            S* y = po + o * n * inner + in;
            S m = x[0];
            for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i * inner]);
            S s = S(0);
            for (std::size_t i = 0; i < n; ++i) {
                y[i * inner] = std::exp(x[i * inner] - m);
                s += y[i * inner];
            }
            const S inv = S(1) / s;
            for (std::size_t i = 0; i < n; ++i) y[i * inner] *= inv;
        }
    }
    if (tracing(tape, a.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, out, outer, n, inner]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            const S* y = out.data();
            S* da = a.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    S dot = S(0);
                    for (std::size_t i = 0; i < n; ++i) dot += dout[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i)
                        da[base + i * inner] += y[base + i * inner] * (dout[base + i * inner] - dot);
                }
            }
        });
    }
    return out;
}

inline constexpr double kLayerNormEps = 1e-8;

// Layer normalization over the last axis with learned gain and bias.
template <typename S>
Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gain, Tensor<S> bias, Tape<S>* tape) {
    const std::size_t d = static_cast<std::size_t>(x.dim(x.rank() - 1));
    if (gain.rank() != 1 || bias.rank() != 1 ||
        static_cast<std::size_t>(gain.dim(0)) != d || static_cast<std::size_t>(bias.dim(0)) != d)
        throw ShapeError("layer_norm gain/bias must be rank-1 of size " + std::to_string(d));
    const std::size_t rows = detail::leading_rows(x.shape());
    Tensor<S> out = Tensor<S>::uninitialized(x.shape());
    auto mean_buf = std::make_shared<std::vector<S>>(rows);
    auto rstd_buf = std::make_shared<std::vector<S>>(rows);
    const S* px = x.data();
    const S* pg = gain.data();
    const S* pb = bias.data();
    S* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = px + r * d;
        S* yr = po + r * d;
        S mu = S(0);
        for (std::size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= static_cast<S>(d);
        S var = S(0);
        for (std::size_t i = 0; i < d; ++i) {
            const S c = xr[i] - mu;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S rstd = S(1) / std::sqrt(var + S(kLayerNormEps));
        (*mean_buf)[r] = mu;
        (*rstd_buf)[r] = rstd;
        for (std::size_t i = 0; i < d; ++i) yr[i] = pg[i] * ((xr[i] - mu) * rstd) + pb[i];
    }
    if (tracing(tape, x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, gain, bias, out, mean_buf, rstd_buf, rows, d]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            const S* px2 = x.data();
            const S* pg2 = gain.data();
            S* dx = x.requires_grad() ? x.ensure_grad() : nullptr;
            S* dg = gain.requires_grad() ? gain.ensure_grad() : nullptr;
            S* db = bias.requires_grad() ? bias.ensure_grad() : nullptr;
            for (std::size_t r = 0; r < rows; ++r) {
                const S* xr = px2 + r * d;
                const S* dr = dout + r * d;
                const S mu = (*mean_buf)[r];
                const S rstd = (*rstd_buf)[r];
                if (dg || db) {
                    for (std::size_t i = 0; i < d; ++i) {
                        const S xhat = (xr[i] - mu) * rstd;
                        if (dg) dg[i] += dr[i] * xhat;
                        if (db) db[i] += dr[i];
                    }
                }
                if (dx) {
                    S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
                    for (std::size_t i = 0; i < d; ++i) {
                        const S xhat = (xr[i] - mu) * rstd;
                        const S dxhat = dr[i] * pg2[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    const S inv_d = S(1) / static_cast<S>(d);
                    S* dxr = dx + r * d;
                    for (std::size_t i = 0; i < d; ++i) {
                        const S xhat = (xr[i] - mu) * rstd;
                        const S dxhat = dr[i] * pg2[i];
                        dxr[i] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// Inverted dropout: surviving activations are scaled by 1/(1-rate) so the
// expectation matches evaluation mode. Identity (no rng draws) when not
// training or rate == 0.
template <typename S>
Tensor<S> dropout(Tensor<S> x, double rate, bool training, Rng* rng, Tape<S>* tape) {
    if (rate < 0.0 || rate >= 1.0)
        throw ContractError("dropout rate must lie in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    if (rng == nullptr) throw ContractError("dropout in training mode requires an rng");
    const std::size_t n = x.numel();
    auto mask = std::make_shared<std::vector<S>>(n);
    const S keep_scale = S(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < n; ++i)
        (*mask)[i] = rng->next_uniform() >= rate ? keep_scale : S(0);
    Tensor<S> out = Tensor<S>::uninitialized(x.shape());
    const S* px = x.data();
    S* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * (*mask)[i];
    if (tracing(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, out, mask, n]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            S* dx = x.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) dx[i] += dout[i] * (*mask)[i];
        });
    }
    return out;
}

// Mean cross-entropy over rows of logits [B, C] against integer class
// targets in [0, C). Stable log-sum-exp; probabilities floored at 1e-12
// before the log.
template <typename S>
Tensor<S> cross_entropy(Tensor<S> logits, const std::vector<int>& targets, Tape<S>* tape) {
    if (logits.rank() != 2)
        throw ShapeError("cross_entropy expects [B,C] logits, got " + detail::shape_string(logits.shape()));
    const std::size_t bsz = static_cast<std::size_t>(logits.dim(0));
    const std::size_t c = static_cast<std::size_t>(logits.dim(1));
    if (targets.size() != bsz)
        throw ShapeError("cross_entropy target count " + std::to_string(targets.size()) +
                         " does not match batch " + std::to_string(bsz));
    const S* pz = logits.data();
    S total = S(0);
    for (std::size_t b = 0; b < bsz; ++b) {
        const int t = targets[b];
        if (t < 0 || static_cast<std::size_t>(t) >= c)
            throw ContractError("cross_entropy target " + std::to_string(t) + " out of range [0," +
                                std::to_string(c) + ")");
        const S* z = pz + b * c;
        S m = z[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[j]);
        S s = S(0);
        for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
        const S lse = m + std::log(s);
        total += -detail::log_guarded(std::exp(z[t] - lse));
    }
    Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(bsz));
    if (tracing(tape, logits.requires_grad())) {
        out.set_requires_grad(true);
        auto tgt = std::make_shared<std::vector<int>>(targets);
        tape->record([logits, out, tgt, bsz, c]() mutable {
            if (!out.has_grad()) return;
            const S d = out.grad_data()[0] / static_cast<S>(bsz);
            const S* pz2 = logits.data();
            S* dz = logits.ensure_grad();
            for (std::size_t b = 0; b < bsz; ++b) {
                const S* z = pz2 + b * c;
                S* g = dz + b * c;
                S m = z[0];
                for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[j]);
                S s = S(0);
                for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
                const S inv = S(1) / s;
                for (std::size_t j = 0; j < c; ++j) g[j] += d * std::exp(z[j] - m) * inv;
                g[(*tgt)[b]] -= d;
            }
        });
    }
    return out;
}

// Builds the padded input embedding (Eq. style: item + absolute position),
// with rows at padded slots (id 0) forced to zero so position embeddings do
// not leak through the padding.
template <typename S>
Tensor<S> embed_sequence(Tensor<S> item_table, Tensor<S> pos_table,
                         const std::vector<int>& padded_ids, int bsz, int t_len,
                         Tape<S>* tape) {
    const std::size_t d = static_cast<std::size_t>(item_table.dim(1));
    if (pos_table.rank() != 2 || static_cast<std::size_t>(pos_table.dim(1)) != d)
        throw ShapeError("pos_table must be [T,d] matching item table width");
    if (pos_table.dim(0) < t_len)
        throw ShapeError("pos_table has " + std::to_string(pos_table.dim(0)) +
                         " rows, need " + std::to_string(t_len));
    if (padded_ids.size() != static_cast<std::size_t>(bsz) * static_cast<std::size_t>(t_len))
        throw ShapeError("padded_ids size does not match B*T");
    const int vocab = item_table.dim(0);
    Tensor<S> out = Tensor<S>::uninitialized({bsz, t_len, static_cast<int>(d)});
    const S* pi = item_table.data();
    const S* pp = pos_table.data();
    S* po = out.data();
    for (int b = 0; b < bsz; ++b) {
        for (int t = 0; t < t_len; ++t) {
            const int id = padded_ids[static_cast<std::size_t>(b) * t_len + t];
            if (id < 0 || id >= vocab)
                throw ContractError("item id " + std::to_string(id) + " outside table of " +
                                    std::to_string(vocab) + " rows");
            S* row = po + (static_cast<std::size_t>(b) * t_len + t) * d;
            if (id == 0) {
                for (std::size_t i = 0; i < d; ++i) row[i] = S(0);
            } else {
                const S* ir = pi + static_cast<std::size_t>(id) * d;
                const S* pr = pp + static_cast<std::size_t>(t) * d;
                for (std::size_t i = 0; i < d; ++i) row[i] = ir[i] + pr[i];
            }
        }
    }
    if (tracing(tape, item_table.requires_grad() || pos_table.requires_grad())) {
        out.set_requires_grad(true);
        auto ids = std::make_shared<std::vector<int>>(padded_ids);
        tape->record([item_table, pos_table, out, ids, bsz, t_len, d]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            S* di = item_table.requires_grad() ? item_table.ensure_grad() : nullptr;
            S* dp = pos_table.requires_grad() ? pos_table.ensure_grad() : nullptr;
            for (int b = 0; b < bsz; ++b) {
                for (int t = 0; t < t_len; ++t) {
                    const int id = (*ids)[static_cast<std::size_t>(b) * t_len + t];
                    if (id == 0) continue;
                    const S* drow = dout + (static_cast<std::size_t>(b) * t_len + t) * d;
                    if (di) {
                        S* g = di + static_cast<std::size_t>(id) * d;
                        for (std::size_t i = 0; i < d; ++i) g[i] += drow[i];
                    }
                    if (dp) {
                        S* g = dp + static_cast<std::size_t>(t) * d;
                        for (std::size_t i = 0; i < d; ++i) g[i] += drow[i];
                    }
                }
            }
        });
    }
    return out;
}

// Multi-head scaled dot-product attention with a causal mask and key
// validity mask. Masking is the additive -1e9 convention: probabilities at
// disallowed (future or padded) keys are exactly zero, so restricting the
// computation to allowed pairs is bitwise equivalent; query rows with no
// allowed key (padded prefix) yield zero rows.
template <typename S>
Tensor<S> causal_attention(Tensor<S> q, Tensor<S> k, Tensor<S> v, int heads,
                           const std::vector<std::uint8_t>& key_valid, S scale,
                           Tape<S>* tape) {
    if (q.rank() != 3 || !q.same_shape(k) || !q.same_shape(v))
        throw ShapeError("causal_attention expects matching [B,T,d] q/k/v");
    const int bsz = q.dim(0), t_len = q.dim(1), d = q.dim(2);
    if (heads <= 0 || d % heads != 0)
        throw ContractError("head count " + std::to_string(heads) + " must divide width " +
                            std::to_string(d));
    if (key_valid.size() != static_cast<std::size_t>(bsz) * static_cast<std::size_t>(t_len))
        throw ShapeError("key_valid size does not match B*T");
    const std::size_t dh = static_cast<std::size_t>(d / heads);
    const std::size_t td = static_cast<std::size_t>(t_len) * static_cast<std::size_t>(d);
    Tensor<S> out = Tensor<S>::zeros(q.shape());
    auto probs = std::make_shared<std::vector<S>>(
        static_cast<std::size_t>(bsz) * heads * t_len * t_len, S(0));
    auto valid = std::make_shared<std::vector<std::uint8_t>>(key_valid);
    const S* pq = q.data();
    const S* pk = k.data();
    const S* pv = v.data();
    S* po = out.data();
    std::vector<S> row(static_cast<std::size_t>(t_len));
    for (int b = 0; b < bsz; ++b) {
        const std::uint8_t* vb = valid->data() + static_cast<std::size_t>(b) * t_len;
        for (int h = 0; h < heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(b) * td + h * dh;
            S* pmat = probs->data() +
                      (static_cast<std::size_t>(b) * heads + h) * t_len * t_len;
            for (int t = 0; t < t_len; ++t) {
                const S* qrow = pq + off + static_cast<std::size_t>(t) * d;
                int n_allowed = 0;
                S m = S(0);
                for (int t2 = 0; t2 <= t; ++t2) {
                    if (!vb[t2]) continue;
                    const S* krow = pk + off + static_cast<std::size_t>(t2) * d;
                    S dot = S(0);
                    for (std::size_t i = 0; i < dh; ++i) dot += qrow[i] * krow[i];
                    dot *= scale;
                    row[t2] = dot;
                    m = n_allowed == 0 ? dot : std::max(m, dot);
                    ++n_allowed;
                }
                if (n_allowed == 0) continue;  // zero output row
                S sum = S(0);
                S* prow = pmat + static_cast<std::size_t>(t) * t_len;
                for (int t2 = 0; t2 <= t; ++t2) {
                    if (!vb[t2]) continue;
                    const S e = std::exp(row[t2] - m);
                    prow[t2] = e;
                    sum += e;
                }
                const S inv = S(1) / sum;
                S* orow = po + off + static_cast<std::size_t>(t) * d;
                for (int t2 = 0; t2 <= t; ++t2) {
                    if (!vb[t2]) continue;
                    const S p = prow[t2] * inv;
                    prow[t2] = p;
                    const S* vrow = pv + off + static_cast<std::size_t>(t2) * d;
                    for (std::size_t i = 0; i < dh; ++i) orow[i] += p * vrow[i];
                }
            }
        }
    }
    if (tracing(tape, q.requires_grad() || k.requires_grad() || v.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([q, k, v, out, probs, valid, bsz, t_len, d, heads, dh, td, scale]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            const S* pq2 = q.data();
            const S* pk2 = k.data();
            const S* pv2 = v.data();
            S* dq = q.requires_grad() ? q.ensure_grad() : nullptr;
            S* dk = k.requires_grad() ? k.ensure_grad() : nullptr;
            S* dv = v.requires_grad() ? v.ensure_grad() : nullptr;
            std::vector<S> dprow(static_cast<std::size_t>(t_len));
            for (int b = 0; b < bsz; ++b) {
                const std::uint8_t* vb = valid->data() + static_cast<std::size_t>(b) * t_len;
                for (int h = 0; h < heads; ++h) {
                    const std::size_t off = static_cast<std::size_t>(b) * td + h * dh;
                    const S* pmat = probs->data() +
                                    (static_cast<std::size_t>(b) * heads + h) * t_len * t_len;
                    for (int t = 0; t < t_len; ++t) {
                        const S* prow = pmat + static_cast<std::size_t>(t) * t_len;
                        const S* drow = dout + off + static_cast<std::size_t>(t) * d;
                        // dP = dO . V^T restricted to allowed keys, then the
                        // softmax Jacobian, then chain into q/k/v.
                        S dot_pd = S(0);
                        for (int t2 = 0; t2 <= t; ++t2) {
                            if (!vb[t2]) continue;
                            const S* vrow = pv2 + off + static_cast<std::size_t>(t2) * d;
                            S acc = S(0);
                            for (std::size_t i = 0; i < dh; ++i) acc += drow[i] * vrow[i];
                            dprow[t2] = acc;
                            dot_pd += acc * prow[t2];
                        }
                        const S* qrow = pq2 + off + static_cast<std::size_t>(t) * d;
                        for (int t2 = 0; t2 <= t; ++t2) {
                            if (!vb[t2]) continue;
                            const S p = prow[t2];
                            if (dv) {
                                S* g = dv + off + static_cast<std::size_t>(t2) * d;
                                for (std::size_t i = 0; i < dh; ++i) g[i] += p * drow[i];
                            }
                            const S ds = p * (dprow[t2] - dot_pd) * scale;
                            if (ds == S(0)) continue;
                            const S* krow = pk2 + off + static_cast<std::size_t>(t2) * d;
                            if (dq) {
                                S* g = dq + off + static_cast<std::size_t>(t) * d;
                                for (std::size_t i = 0; i < dh; ++i) g[i] += ds * krow[i];
                            }
                            if (dk) {
                                S* g = dk + off + static_cast<std::size_t>(t2) * d;
                                for (std::size_t i = 0; i < dh; ++i) g[i] += ds * qrow[i];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Row gather with leading axes flattened: out[i,:] = h[rows[i],:].
template <typename S>
Tensor<S> gather_rows(Tensor<S> h, const std::vector<std::size_t>& rows, Tape<S>* tape) {
    if (h.rank() < 2) throw ShapeError("gather_rows expects rank >= 2");
    const std::size_t d = static_cast<std::size_t>(h.dim(h.rank() - 1));
    const std::size_t n_rows = detail::leading_rows(h.shape());
    if (rows.empty()) throw ContractError("gather_rows needs at least one row");
    Tensor<S> out = Tensor<S>::uninitialized({static_cast<int>(rows.size()), static_cast<int>(d)});
    const S* ph = h.data();
    S* po = out.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n_rows) throw ContractError("gather_rows index out of range");
        std::copy_n(ph + rows[i] * d, d, po + i * d);
    }
    if (tracing(tape, h.requires_grad())) {
        out.set_requires_grad(true);
        auto idx = std::make_shared<std::vector<std::size_t>>(rows);
        tape->record([h, out, idx, d]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            S* dh = h.ensure_grad();
            for (std::size_t i = 0; i < idx->size(); ++i) {
                S* g = dh + (*idx)[i] * d;
                const S* src = dout + i * d;
                for (std::size_t c = 0; c < d; ++c) g[c] += src[c];
            }
        });
    }
    return out;
}

// Final-position representation: out[b,:] = h[b,T-1,:].
template <typename S>
Tensor<S> take_last(Tensor<S> h, Tape<S>* tape) {
    if (h.rank() != 3)
        throw ShapeError("take_last expects [B,T,d], got " + detail::shape_string(h.shape()));
    const std::size_t bsz = static_cast<std::size_t>(h.dim(0));
    const std::size_t t_len = static_cast<std::size_t>(h.dim(1));
    const std::size_t d = static_cast<std::size_t>(h.dim(2));
    Tensor<S> out = Tensor<S>::uninitialized({static_cast<int>(bsz), static_cast<int>(d)});
    const S* ph = h.data();
    S* po = out.data();
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t i = 0; i < d; ++i) po[b * d + i] = ph[(b * t_len + t_len - 1) * d + i];
    if (tracing(tape, h.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([h, out, bsz, t_len, d]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            S* dh = h.ensure_grad();
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t i = 0; i < d; ++i)
                    dh[(b * t_len + t_len - 1) * d + i] += dout[b * d + i];
        });
    }
    return out;
}

// Relevance logits of every real item: out[b, j] = h[b] . item_table[j+1].
// The padding row 0 is excluded, so column j scores item id j+1.
template <typename S>
Tensor<S> score_items(Tensor<S> h, Tensor<S> item_table, Tape<S>* tape) {
    if (h.rank() != 2 || item_table.rank() != 2 || h.dim(1) != item_table.dim(1))
        throw ShapeError("score_items expects h [B,d] and item table [V,d]");
    const std::size_t bsz = static_cast<std::size_t>(h.dim(0));
    const std::size_t d = static_cast<std::size_t>(h.dim(1));
    const std::size_t n_items = static_cast<std::size_t>(item_table.dim(0)) - 1;
    if (n_items == 0) throw ContractError("item table holds only the padding row");
    Tensor<S> out = Tensor<S>::uninitialized({static_cast<int>(bsz), static_cast<int>(n_items)});
    detail::gemm_nt(h.data(), item_table.data() + d, out.data(), bsz, d, n_items, false);
    if (tracing(tape, h.requires_grad() || item_table.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([h, item_table, out, bsz, d, n_items]() mutable {
            if (!out.has_grad()) return;
            const S* dout = out.grad_data();
            if (h.requires_grad())
                detail::gemm_nn(dout, item_table.data() + d, h.ensure_grad(), bsz, n_items, d, true);
            if (item_table.requires_grad())
                detail::gemm_tn(dout, h.data(), item_table.ensure_grad() + d, bsz, n_items, d, true);
        });
    }
    return out;
}

}  // namespace flame
