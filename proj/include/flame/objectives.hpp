#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ensemble.hpp"
#include "error.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace flame {

// Next-item objective: full softmax over all real items against the
// final-position representation. Targets are 1-based item ids.
template <typename S>
Tensor<S> rec_loss(Tensor<S> h, Tensor<S> item_table, const std::vector<int>& targets,
                   Tape<S>* tape) {
    std::vector<int> classes(targets.size());
    const int n_items = item_table.dim(0) - 1;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 1 || targets[i] > n_items)
            throw ContractError("target item id " + std::to_string(targets[i]) +
                                " outside [1," + std::to_string(n_items) + "]");
        classes[i] = targets[i] - 1;
    }
    return cross_entropy(score_items(h, item_table, tape), classes, tape);
}

// Directional InfoNCE: row u of h_p against all rows of h_q (including
// u itself) at temperature tau.
template <typename S>
Tensor<S> nce_loss_directional(Tensor<S> h_p, Tensor<S> h_q, double tau, Tape<S>* tape) {
    if (tau <= 0.0) throw ContractError("temperature must be positive");
    if (h_p.rank() != 2 || !h_p.same_shape(h_q))
        throw ShapeError("nce inputs must be matching [B,d] matrices");
    const int bsz = h_p.dim(0);
    if (bsz < 2) throw ContractError("contrastive loss needs batch size >= 2");
    Tensor<S> logits = scale(matmul_nt(h_p, h_q, tape), static_cast<S>(1.0 / tau), tape);
    std::vector<int> diag(static_cast<std::size_t>(bsz));
    for (int i = 0; i < bsz; ++i) diag[static_cast<std::size_t>(i)] = i;
    return cross_entropy(logits, diag, tape);
}

// Symmetrized pairwise alignment: mean of the two directional losses.
template <typename S>
Tensor<S> nce_loss(Tensor<S> h_p, Tensor<S> h_q, double tau, Tape<S>* tape) {
    Tensor<S> fwd = nce_loss_directional(h_p, h_q, tau, tape);
    Tensor<S> bwd = nce_loss_directional(h_q, h_p, tau, tape);
    return scale(add(fwd, bwd, tape), S(0.5), tape);
}

// Batch-mean dot-product similarity of two representation matrices.
// Diagnostic input to the pair weighting; never part of the gradient.
template <typename S>
double pair_similarity(const Tensor<S>& h_p, const Tensor<S>& h_q) {
    if (h_p.rank() != 2 || !h_p.same_shape(h_q))
        throw ShapeError("pair_similarity inputs must be matching [B,d] matrices");
    const std::size_t bsz = static_cast<std::size_t>(h_p.dim(0));
    const std::size_t d = static_cast<std::size_t>(h_p.dim(1));
    const S* a = h_p.data();
    const S* b = h_q.data();
    double total = 0.0;
    for (std::size_t u = 0; u < bsz; ++u) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            dot += static_cast<double>(a[u * d + i]) * static_cast<double>(b[u * d + i]);
        total += dot;
    }
    return total / static_cast<double>(bsz);
}

// Stop-gradient weights of every unordered path pair: softmax of the
// negated similarities, so less similar pairs get more alignment pressure.
struct PairWeightTable {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // indices into bundle order
    std::vector<double> similarity;
    std::vector<double> weight;

    std::size_t size() const { return pairs.size(); }
};

inline void fill_softmax_weights(PairWeightTable& table) {
    double m = -table.similarity[0];
    for (double s : table.similarity) m = std::max(m, -s);
    double sum = 0.0;
    table.weight.resize(table.similarity.size());
    for (std::size_t i = 0; i < table.similarity.size(); ++i) {
        table.weight[i] = std::exp(-table.similarity[i] - m);
        sum += table.weight[i];
    }
    for (double& w : table.weight) w /= sum;
}

template <typename S>
PairWeightTable pair_weights(const RepresentationBundle<S>& bundle) {
    const std::size_t n = bundle.size();
    if (n < 2) throw ContractError("pair weighting needs at least two representations");
    PairWeightTable table;
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t q = p + 1; q < n; ++q) {
            table.pairs.emplace_back(p, q);
            table.similarity.push_back(pair_similarity(bundle.reps[p], bundle.reps[q]));
        }
    fill_softmax_weights(table);
    return table;
}

// Weighted modular alignment loss with the weights supplied by the caller
// (they are constants to the tape).
template <typename S>
Tensor<S> mkt_loss_weighted(const RepresentationBundle<S>& bundle, const PairWeightTable& table,
                            double tau, Tape<S>* tape) {
    if (table.size() == 0) throw ContractError("empty pair weight table");
    Tensor<S> total;
    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto [p, q] = table.pairs[i];
        Tensor<S> term = scale(nce_loss(bundle.reps[p], bundle.reps[q], tau, tape),
                               static_cast<S>(table.weight[i]), tape);
        total = total.defined() ? add(total, term, tape) : term;
    }
    return total;
}

// Similarity-weighted modular alignment loss over all unordered path pairs.
template <typename S>
Tensor<S> mkt_loss(const RepresentationBundle<S>& bundle, double tau, Tape<S>* tape,
                   PairWeightTable* table_out = nullptr) {
    PairWeightTable table = pair_weights(bundle);
    Tensor<S> loss = mkt_loss_weighted(bundle, table, tau, tape);
    if (table_out) *table_out = std::move(table);
    return loss;
}

// Plain mutual alignment: unweighted sum of symmetrized NCE over all
// unordered pairs of representations.
template <typename S>
Tensor<S> conventional_mkt(const std::vector<Tensor<S>>& reps, double tau, Tape<S>* tape) {
    if (reps.size() < 2) throw ContractError("mutual alignment needs at least two representations");
    Tensor<S> total;
    for (std::size_t p = 0; p < reps.size(); ++p)
        for (std::size_t q = p + 1; q < reps.size(); ++q) {
            Tensor<S> term = nce_loss(reps[p], reps[q], tau, tape);
            total = total.defined() ? add(total, term, tape) : term;
        }
    return total;
}

// Unweighted contrastive alignment over the bundle (ablation form).
template <typename S>
Tensor<S> cl_loss(const RepresentationBundle<S>& bundle, double tau, Tape<S>* tape) {
    return conventional_mkt(bundle.reps, tau, tape);
}

// Geometric interpolation of the alignment coefficient from lambda0 at
// round 0 to lambdaR at round R. Both endpoints zero disables alignment.
struct AnnealSchedule {
    double lambda0 = 0.1;
    double lambdaR = 1e-5;
    int rounds = 200;

    void validate() const {
        if (rounds < 1) throw ConfigError("annealing needs at least one round");
        const bool off = lambda0 == 0.0 && lambdaR == 0.0;
        if (!off && (lambda0 <= 0.0 || lambdaR <= 0.0))
            throw ConfigError("lambda endpoints must both be positive, or both zero to disable");
    }
};

inline double anneal(int round, const AnnealSchedule& sched) {
    sched.validate();
    if (round < 0) throw ContractError("annealing round must be non-negative");
    if (round >= sched.rounds) return sched.lambdaR;
    if (round == 0) return sched.lambda0;
    if (sched.lambda0 == 0.0) return 0.0;
    const double t = static_cast<double>(round) / static_cast<double>(sched.rounds);
    return sched.lambda0 * std::pow(sched.lambdaR / sched.lambda0, t);
}

// L = L_rec + lambda * L_mkt.
template <typename S>
Tensor<S> total_loss(Tensor<S> rec, Tensor<S> mkt, double lambda, Tape<S>* tape) {
    if (lambda < 0.0) throw ContractError("lambda must be non-negative");
    return add(rec, scale(mkt, static_cast<S>(lambda), tape), tape);
}

}  // namespace flame
