#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "data.hpp"
#include "error.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace flame {

struct ModelHyper {
    int width = 64;       // embedding / hidden size d
    int layers = 2;       // encoder blocks L
    int heads = 2;
    int max_len = 50;     // window length T
    int n_items = 0;      // real items; table row 0 is padding
    double dropout = 0.5;

    bool operator==(const ModelHyper&) const = default;

    void validate() const {
        if (width <= 0 || layers < 0 || max_len < 3 || n_items <= 0)
            throw ConfigError("invalid model hyperparameters");
        if (heads <= 0 || width % heads != 0)
            throw ConfigError("heads must divide width: " + std::to_string(heads) + " vs " +
                              std::to_string(width));
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("dropout must lie in [0,1)");
    }
};

template <typename S>
struct LayerParams {
    Tensor<S> wq, wk, wv, wo;       // [d,d] projections
    Tensor<S> w1, w2;               // feed-forward [d,d] and [d,d]
    Tensor<S> ln1_gain, ln1_bias;   // post-attention layer norm
    Tensor<S> ln2_gain, ln2_bias;   // post-feed-forward layer norm
};

// One SASRec-style network: item and position tables plus L identical
// causal encoder blocks (post-layer-norm, ReLU feed-forward of inner size
// d, no other biases).
template <typename S>
struct NetworkParams {
    ModelHyper hyper;
    Tensor<S> item_table;  // [n_items+1, d], row 0 is the zero padding row
    Tensor<S> pos_table;   // [T, d]
    std::vector<LayerParams<S>> layers;

    static NetworkParams init(const ModelHyper& hyper, Rng& rng) {
        hyper.validate();
        NetworkParams net;
        net.hyper = hyper;
        const int d = hyper.width;
        auto xavier = [&rng](std::vector<int> shape, int fan_in, int fan_out) {
            Tensor<S> t = Tensor<S>::uninitialized(std::move(shape));
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            S* p = t.data();
            for (std::size_t i = 0; i < t.numel(); ++i)
                p[i] = static_cast<S>(rng.next_uniform(-limit, limit));
            return t;
        };
        net.item_table = xavier({hyper.n_items + 1, d}, hyper.n_items + 1, d);
        for (int i = 0; i < d; ++i) net.item_table.data()[i] = S(0);
        net.pos_table = xavier({hyper.max_len, d}, hyper.max_len, d);
        net.layers.resize(static_cast<std::size_t>(hyper.layers));
        for (auto& l : net.layers) {
            l.wq = xavier({d, d}, d, d);
            l.wk = xavier({d, d}, d, d);
            l.wv = xavier({d, d}, d, d);
            l.wo = xavier({d, d}, d, d);
            l.w1 = xavier({d, d}, d, d);
            l.w2 = xavier({d, d}, d, d);
            l.ln1_gain = Tensor<S>::full({d}, S(1));
            l.ln1_bias = Tensor<S>::zeros({d});
            l.ln2_gain = Tensor<S>::full({d}, S(1));
            l.ln2_bias = Tensor<S>::zeros({d});
        }
        return net;
    }

    std::vector<std::pair<std::string, Tensor<S>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<S>*>> out;
        out.emplace_back("item_table", &item_table);
        out.emplace_back("pos_table", &pos_table);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layer" + std::to_string(i) + ".";
            auto& l = layers[i];
            out.emplace_back(p + "wq", &l.wq);
            out.emplace_back(p + "wk", &l.wk);
            out.emplace_back(p + "wv", &l.wv);
            out.emplace_back(p + "wo", &l.wo);
            out.emplace_back(p + "w1", &l.w1);
            out.emplace_back(p + "w2", &l.w2);
            out.emplace_back(p + "ln1_gain", &l.ln1_gain);
            out.emplace_back(p + "ln1_bias", &l.ln1_bias);
            out.emplace_back(p + "ln2_gain", &l.ln2_gain);
            out.emplace_back(p + "ln2_bias", &l.ln2_bias);
        }
        return out;
    }

    std::vector<std::pair<std::string, const Tensor<S>*>> named_params() const {
        auto mutable_view = const_cast<NetworkParams*>(this)->named_params();
        std::vector<std::pair<std::string, const Tensor<S>*>> out;
        out.reserve(mutable_view.size());
        for (auto& [name, t] : mutable_view) out.emplace_back(name, t);
        return out;
    }

    void set_requires_grad(bool v) {
        for (auto& [name, t] : named_params()) t->set_requires_grad(v);
    }

    NetworkParams clone() const {
        NetworkParams net;
        net.hyper = hyper;
        net.item_table = item_table.clone();
        net.pos_table = pos_table.clone();
        net.layers.reserve(layers.size());
        for (const auto& l : layers)
            net.layers.push_back({l.wq.clone(), l.wk.clone(), l.wv.clone(), l.wo.clone(),
                                  l.w1.clone(), l.w2.clone(), l.ln1_gain.clone(), l.ln1_bias.clone(),
                                  l.ln2_gain.clone(), l.ln2_bias.clone()});
        return net;
    }
};

template <typename S>
Tensor<S> embed(NetworkParams<S>& net, const Batch& batch, bool training, Rng* rng, Tape<S>* tape) {
    Tensor<S> e = embed_sequence(net.item_table, net.pos_table, batch.padded_ids,
                                 batch.size, batch.max_len, tape);
    return dropout(e, net.hyper.dropout, training, rng, tape);
}

// One post-LN encoder block: causal attention and ReLU feed-forward, each
// followed by dropout, residual add, and layer norm.
template <typename S>
Tensor<S> encoder_block(NetworkParams<S>& net, int layer, Tensor<S> h, const Batch& batch,
                        bool training, Rng* rng, Tape<S>* tape) {
    auto& l = net.layers[static_cast<std::size_t>(layer)];
    const S att_scale = S(1) / std::sqrt(static_cast<S>(net.hyper.width / net.hyper.heads));
    Tensor<S> q = matmul(h, l.wq, tape);
    Tensor<S> k = matmul(h, l.wk, tape);
    Tensor<S> v = matmul(h, l.wv, tape);
    Tensor<S> a = causal_attention(q, k, v, net.hyper.heads, batch.valid_mask, att_scale, tape);
    a = matmul(a, l.wo, tape);
    a = dropout(a, net.hyper.dropout, training, rng, tape);
    h = layer_norm(add(h, a, tape), l.ln1_gain, l.ln1_bias, tape);
    Tensor<S> f = matmul(relu(matmul(h, l.w1, tape), tape), l.w2, tape);
    f = dropout(f, net.hyper.dropout, training, rng, tape);
    return layer_norm(add(h, f, tape), l.ln2_gain, l.ln2_bias, tape);
}

// Applies encoder blocks [layer_begin, layer_end). An empty range is the
// identity.
template <typename S>
Tensor<S> encode(NetworkParams<S>& net, Tensor<S> h, const Batch& batch, bool training,
                 Rng* rng, Tape<S>* tape, int layer_begin, int layer_end) {
    if (layer_begin < 0 || layer_end > net.hyper.layers || layer_begin > layer_end)
        throw ContractError("encoder layer range [" + std::to_string(layer_begin) + "," +
                            std::to_string(layer_end) + ") out of bounds");
    for (int i = layer_begin; i < layer_end; ++i)
        h = encoder_block(net, i, h, batch, training, rng, tape);
    return h;
}

template <typename S>
Tensor<S> encode(NetworkParams<S>& net, Tensor<S> h, const Batch& batch, bool training,
                 Rng* rng, Tape<S>* tape) {
    return encode(net, h, batch, training, rng, tape, 0, net.hyper.layers);
}

// Full forward to the final-position representation [B,d].
template <typename S>
Tensor<S> monolithic_forward(NetworkParams<S>& net, const Batch& batch, bool training,
                             Rng* rng, Tape<S>* tape) {
    Tensor<S> h = embed(net, batch, training, rng, tape);
    h = encode(net, h, batch, training, rng, tape);
    return take_last(h, tape);
}

// Contiguous split of the network's components (component 0 = embedding,
// components 1..L = encoder blocks) into M stages. For M >= 2 stage 0 is the
// embedding alone and the L blocks fill the remaining M-1 stages, earlier
// stages taking the remainder; M=1 treats the whole network as one stage
// (the path machinery then degenerates to whole-network selection).
struct SubModuleBoundary {
    int n_components = 0;
    std::vector<std::pair<int, int>> stages;  // [begin, end) component ranges

    int n_stages() const { return static_cast<int>(stages.size()); }
};

inline SubModuleBoundary split_into_submodules(int layers, int m) {
    if (m < 1) throw ConfigError("sub-module count M must be >= 1, got " + std::to_string(m));
    if (m > layers + 1)
        throw ConfigError("sub-module count M = " + std::to_string(m) +
                          " exceeds component count L+1 = " + std::to_string(layers + 1));
    SubModuleBoundary b;
    b.n_components = layers + 1;
    if (m == 1) {
        b.stages.emplace_back(0, layers + 1);
        return b;
    }
    b.stages.emplace_back(0, 1);
    const int groups = m - 1;
    const int base = layers / groups;
    const int rem = layers % groups;
    int at = 1;
    for (int g = 0; g < groups; ++g) {
        const int len = base + (g < rem ? 1 : 0);
        b.stages.emplace_back(at, at + len);
        at += len;
    }
    return b;
}

// Runs components [begin, end) of one network. A range containing the
// embedding ignores `input` and starts from the batch.
template <typename S>
Tensor<S> forward_components(NetworkParams<S>& net, const Batch& batch, Tensor<S> input,
                             int comp_begin, int comp_end, bool training, Rng* rng,
                             Tape<S>* tape) {
    Tensor<S> h;
    int layer_begin;
    if (comp_begin == 0) {
        h = embed(net, batch, training, rng, tape);
        layer_begin = 0;
    } else {
        if (!input.defined()) throw ContractError("non-initial stage requires an input tensor");
        h = input;
        layer_begin = comp_begin - 1;
    }
    return encode(net, h, batch, training, rng, tape, layer_begin, comp_end - 1);
}

}  // namespace flame
