#pragma once

// Plain index-loop reference for the encoder, written against the additive
// -1e9 masking convention. Padded query rows come out as attention over a
// uniform distribution (all scores masked), so comparisons are only
// meaningful at valid positions.

#include <cmath>
#include <cstdint>
#include <vector>

#include <flame/flame.hpp>

namespace testsupport {

template <class S>
std::vector<S> naive_softmax_row(const std::vector<S>& row) {
    S mx = row[0];
    for (S v : row) mx = std::max(mx, v);
    std::vector<S> out(row.size());
    S denom = 0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = std::exp(row[i] - mx);
        denom += out[i];
    }
    for (S& v : out) v /= denom;
    return out;
}

template <class S>
void naive_layer_norm_row(S* x, int d, const S* gain, const S* bias) {
    S mean = 0;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= d;
    S var = 0;
    for (int i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= d;
    const S rstd = S(1) / std::sqrt(var + S(flame::kLayerNormEps));
    for (int i = 0; i < d; ++i) x[i] = gain[i] * ((x[i] - mean) * rstd) + bias[i];
}

// out[r,:] += x[r,:] . w  for row-major w [d,d]
template <class S>
std::vector<S> naive_project(const std::vector<S>& x, const flame::Tensor<S>& w, int rows, int d) {
    std::vector<S> out(static_cast<std::size_t>(rows) * d, S(0));
    const S* wd = w.data();
    for (int r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i) {
            const S v = x[static_cast<std::size_t>(r) * d + i];
            for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(r) * d + j] += v * wd[i * d + j];
        }
    return out;
}

// Eval-mode forward of the full network; returns the dense [B,T,d] hidden.
template <class S>
std::vector<S> naive_encode(const flame::NetworkParams<S>& net, const std::vector<int>& padded_ids,
                            int B, int T) {
    const int d = net.hyper.width;
    const int heads = net.hyper.heads;
    const int hd = d / heads;
    const S scale = S(1) / std::sqrt(S(hd));
    std::vector<S> x(static_cast<std::size_t>(B) * T * d, S(0));
    const S* items = net.item_table.data();
    const S* pos = net.pos_table.data();
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            const int id = padded_ids[static_cast<std::size_t>(b) * T + t];
            if (id == 0) continue;
            S* row = x.data() + (static_cast<std::size_t>(b) * T + t) * d;
            for (int i = 0; i < d; ++i) row[i] = items[static_cast<std::size_t>(id) * d + i] + pos[t * d + i];
        }

    for (const flame::LayerParams<S>& layer : net.layers) {
        for (int b = 0; b < B; ++b) {
            const std::size_t base = static_cast<std::size_t>(b) * T * d;
            std::vector<S> xb(x.begin() + base, x.begin() + base + static_cast<std::size_t>(T) * d);
            std::vector<S> q = naive_project(xb, layer.wq, T, d);
            std::vector<S> k = naive_project(xb, layer.wk, T, d);
            std::vector<S> v = naive_project(xb, layer.wv, T, d);
            std::vector<S> attn(static_cast<std::size_t>(T) * d, S(0));
            for (int h = 0; h < heads; ++h) {
                const int off = h * hd;
                for (int t = 0; t < T; ++t) {
                    std::vector<S> row(T);
                    for (int u = 0; u < T; ++u) {
                        S dot = 0;
                        for (int i = 0; i < hd; ++i)
                            dot += q[static_cast<std::size_t>(t) * d + off + i] *
                                   k[static_cast<std::size_t>(u) * d + off + i];
                        const bool key_ok =
                            u <= t && padded_ids[static_cast<std::size_t>(b) * T + u] != 0;
                        row[u] = key_ok ? dot * scale : S(-1e9);
                    }
                    const std::vector<S> p = naive_softmax_row(row);
                    for (int u = 0; u < T; ++u)
                        for (int i = 0; i < hd; ++i)
                            attn[static_cast<std::size_t>(t) * d + off + i] +=
                                p[u] * v[static_cast<std::size_t>(u) * d + off + i];
                }
            }
            std::vector<S> proj = naive_project(attn, layer.wo, T, d);
            for (int t = 0; t < T; ++t) {
                S* row = proj.data() + static_cast<std::size_t>(t) * d;
                for (int i = 0; i < d; ++i) row[i] += xb[static_cast<std::size_t>(t) * d + i];
                naive_layer_norm_row(row, d, layer.ln1_gain.data(), layer.ln1_bias.data());
            }
            std::vector<S> mid = naive_project(proj, layer.w1, T, d);
            for (S& s : mid) s = std::max(s, S(0));
            std::vector<S> ffn = naive_project(mid, layer.w2, T, d);
            for (int t = 0; t < T; ++t) {
                S* row = ffn.data() + static_cast<std::size_t>(t) * d;
                for (int i = 0; i < d; ++i) row[i] += proj[static_cast<std::size_t>(t) * d + i];
                naive_layer_norm_row(row, d, layer.ln2_gain.data(), layer.ln2_bias.data());
                for (int i = 0; i < d; ++i) x[base + static_cast<std::size_t>(t) * d + i] = row[i];
            }
        }
    }
    return x;
}

}  // namespace testsupport
