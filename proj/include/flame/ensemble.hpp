#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "backbone.hpp"
#include "data.hpp"
#include "error.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace flame {

enum class Owner : std::uint8_t { frozen = 0, learnable = 1 };

// A decision path assigns each stage to one of the two networks.
using Path = std::vector<Owner>;

// All 2^M paths in lexicographic order with frozen < learnable and stage 0
// most significant: all-frozen first, all-learnable last.
inline std::vector<Path> enumerate_paths(int m) {
    if (m < 1) throw ContractError("path enumeration needs at least one stage");
    if (m > 20) throw ContractError("refusing to enumerate 2^" + std::to_string(m) + " paths");
    std::vector<Path> out;
    const std::uint32_t n = 1u << m;
    out.reserve(n);
    for (std::uint32_t bits = 0; bits < n; ++bits) {
        Path p(static_cast<std::size_t>(m));
        for (int s = 0; s < m; ++s)
            p[static_cast<std::size_t>(s)] =
                (bits >> (m - 1 - s)) & 1u ? Owner::learnable : Owner::frozen;
        out.push_back(std::move(p));
    }
    return out;
}

inline std::string path_label(const Path& p) {
    std::string s;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (i) s += '-';
        s += p[i] == Owner::frozen ? "frz" : "lrn";
    }
    return s;
}

inline std::uint64_t path_bits(const Path& p) {
    std::uint64_t bits = 0;
    for (Owner o : p) bits = (bits << 1) | (o == Owner::learnable ? 1u : 0u);
    return bits;
}

// The two same-architecture networks plus the agreed stage split. The
// frozen network never requires gradients.
template <typename S>
struct EnsembleState {
    NetworkParams<S> frozen;
    NetworkParams<S> learnable;
    SubModuleBoundary boundary;

    static EnsembleState make(NetworkParams<S> frozen_net, NetworkParams<S> learnable_net, int m) {
        if (!(frozen_net.hyper == learnable_net.hyper))
            throw ConfigError("frozen and learnable networks must share hyperparameters");
        EnsembleState st;
        st.boundary = split_into_submodules(frozen_net.hyper.layers, m);
        st.frozen = std::move(frozen_net);
        st.learnable = std::move(learnable_net);
        st.frozen.set_requires_grad(false);
        st.learnable.set_requires_grad(true);
        return st;
    }

    NetworkParams<S>& net(Owner o) { return o == Owner::frozen ? frozen : learnable; }
};

// Final-position representation of every path, in enumerate_paths order.
// hiddens keeps the pre-pooling [B,T,d] outputs for consumers that need
// representations at every position.
template <typename S>
struct RepresentationBundle {
    std::vector<Path> paths;
    std::vector<Tensor<S>> reps;     // each [B,d]
    std::vector<Tensor<S>> hiddens;  // each [B,T,d]

    std::size_t size() const { return reps.size(); }

    const Tensor<S>& at(const Path& p) const {
        for (std::size_t i = 0; i < paths.size(); ++i)
            if (paths[i] == p) return reps[i];
        throw ContractError("path " + path_label(p) + " not present in bundle");
    }

    const Tensor<S>& all_learnable() const { return reps.back(); }
};

namespace detail {

// Dropout stream of one stage execution. The seed depends on the stage and
// the owner sequence up to and including it, so a cached execution and its
// naive per-path recomputation draw identical masks.
inline std::uint64_t exec_seed(std::uint64_t step_seed, int stage, std::uint64_t ext_prefix_bits) {
    return derive_seed(step_seed, "exec", static_cast<std::uint64_t>(stage), ext_prefix_bits);
}

template <typename S>
Tensor<S> run_stage(EnsembleState<S>& st, const Batch& batch, Tensor<S> input, int stage,
                    Owner owner, std::uint64_t ext_prefix_bits, bool training,
                    std::uint64_t step_seed, Tape<S>* tape) {
    const auto [begin, end] = st.boundary.stages[static_cast<std::size_t>(stage)];
    const bool train_here = training && owner == Owner::learnable;
    Rng rng(exec_seed(step_seed, stage, ext_prefix_bits));
    return forward_components(st.net(owner), batch, input, begin, end, train_here,
                              train_here ? &rng : nullptr, tape);
}

}  // namespace detail

// Runs one decision path to its final-position representation [B,d].
template <typename S>
Tensor<S> forward_path(EnsembleState<S>& st, const Batch& batch, const Path& path,
                       bool training, std::uint64_t step_seed, Tape<S>* tape) {
    if (static_cast<int>(path.size()) != st.boundary.n_stages())
        throw ContractError("path length " + std::to_string(path.size()) +
                            " does not match stage count " + std::to_string(st.boundary.n_stages()));
    Tensor<S> h;
    std::uint64_t bits = 0;
    for (int s = 0; s < st.boundary.n_stages(); ++s) {
        const Owner o = path[static_cast<std::size_t>(s)];
        bits = (bits << 1) | (o == Owner::learnable ? 1u : 0u);
        h = detail::run_stage(st, batch, h, s, o, bits, training, step_seed, tape);
    }
    return take_last(h, tape);
}

// Runs all 2^M paths with shared-prefix caching: each distinct (stage,
// owner-prefix) pair executes once and feeds every path that extends it,
// for a total of 2*(2^M - 1) stage executions. stage_executions, when
// given, receives that count.
template <typename S>
RepresentationBundle<S> forward_all(EnsembleState<S>& st, const Batch& batch, bool training,
                                    std::uint64_t step_seed, Tape<S>* tape,
                                    std::size_t* stage_executions = nullptr) {
    const int m = st.boundary.n_stages();
    std::size_t execs = 0;
    std::unordered_map<std::uint64_t, Tensor<S>> level;  // prefix bits -> stage output
    level.emplace(0, Tensor<S>());
    for (int s = 0; s < m; ++s) {
        std::unordered_map<std::uint64_t, Tensor<S>> next;
        const std::uint64_t n_prefixes = 1ull << s;
        for (std::uint64_t prefix = 0; prefix < n_prefixes; ++prefix) {
            Tensor<S> input = level.at(prefix);
            for (Owner o : {Owner::frozen, Owner::learnable}) {
                const std::uint64_t ext = (prefix << 1) | (o == Owner::learnable ? 1u : 0u);
                next.emplace(ext, detail::run_stage(st, batch, input, s, o, ext, training,
                                                    step_seed, tape));
                ++execs;
            }
        }
        level = std::move(next);
    }
    RepresentationBundle<S> bundle;
    bundle.paths = enumerate_paths(m);
    bundle.reps.reserve(bundle.paths.size());
    for (const Path& p : bundle.paths) {
        bundle.hiddens.push_back(level.at(path_bits(p)));
        bundle.reps.push_back(take_last(bundle.hiddens.back(), tape));
    }
    if (stage_executions) *stage_executions = execs;
    return bundle;
}

}  // namespace flame
