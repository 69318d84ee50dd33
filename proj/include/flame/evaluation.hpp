#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "data.hpp"
#include "ensemble.hpp"
#include "error.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace flame {

// Full-ranking position of the target among all real items: one plus the
// number of items scoring strictly higher plus tied items with a smaller
// id. scores[j] is the relevance of item id j+1. Ranking on raw logits is
// used throughout; the softmax over them is strictly monotone, so ranks
// and ties are identical.
template <typename S>
int rank_of_target(const S* scores, int n_items, int target,
                   const std::uint8_t* exclude = nullptr) {
    if (target < 1 || target > n_items)
        throw ContractError("rank target " + std::to_string(target) + " outside item range");
    const S st = scores[target - 1];
    int ahead = 0;
    for (int j = 1; j <= n_items; ++j) {
        if (j == target) continue;
        if (exclude && exclude[j]) continue;
        const S sj = scores[j - 1];
        if (sj > st || (sj == st && j < target)) ++ahead;
    }
    return 1 + ahead;
}

// Eq. 15 probability scores: softmax over all real items. Ranking uses the
// raw logits elsewhere (rank_of_target note above); this is the probability
// report form.
template <typename S>
Tensor<S> score_all_items(Tensor<S> h, Tensor<S> item_table) {
    Tensor<S> logits = score_items(h, item_table, static_cast<Tape<S>*>(nullptr));
    return softmax(logits, -1, static_cast<Tape<S>*>(nullptr));
}

inline double hr_at_k(const std::vector<int>& ranks, int k) {
    if (k < 1) throw ContractError("K must be >= 1");
    if (ranks.empty()) throw ContractError("metrics need at least one ranked user");
    double hits = 0.0;
    for (int r : ranks)
        if (r <= k) hits += 1.0;
    return hits / static_cast<double>(ranks.size());
}

inline double ndcg_at_k(const std::vector<int>& ranks, int k) {
    if (k < 1) throw ContractError("K must be >= 1");
    if (ranks.empty()) throw ContractError("metrics need at least one ranked user");
    double gain = 0.0;
    for (int r : ranks)
        if (r <= k) gain += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    return gain / static_cast<double>(ranks.size());
}

struct MetricReport {
    std::vector<int> ks;
    std::vector<double> hr;
    std::vector<double> ndcg;
    std::size_t users = 0;

    double hr_at(int k) const {
        for (std::size_t i = 0; i < ks.size(); ++i)
            if (ks[i] == k) return hr[i];
        throw ContractError("HR@" + std::to_string(k) + " not computed");
    }
    double ndcg_at(int k) const {
        for (std::size_t i = 0; i < ks.size(); ++i)
            if (ks[i] == k) return ndcg[i];
        throw ContractError("NDCG@" + std::to_string(k) + " not computed");
    }
};

inline const std::vector<int> kDefaultKs = {5, 10, 20};

inline MetricReport metrics_from_ranks(const std::vector<int>& ranks, std::vector<int> ks) {
    if (ranks.empty()) throw ContractError("metrics need at least one ranked user");
    MetricReport r;
    r.ks = std::move(ks);
    r.users = ranks.size();
    for (int k : r.ks) {
        r.hr.push_back(hr_at_k(ranks, k));
        r.ndcg.push_back(ndcg_at_k(ranks, k));
    }
    return r;
}

// Asymmetric disagreement between two hit sets (per-user flags):
// |H_i \ H_j| / |H_i|, NaN when H_i is empty.
inline double per_value(const std::vector<std::uint8_t>& h_i, const std::vector<std::uint8_t>& h_j) {
    if (h_i.size() != h_j.size()) throw ContractError("hit sets cover different user counts");
    std::size_t size_i = 0, only_i = 0;
    for (std::size_t u = 0; u < h_i.size(); ++u) {
        if (h_i[u]) {
            ++size_i;
            if (!h_j[u]) ++only_i;
        }
    }
    if (size_i == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(only_i) / static_cast<double>(size_i);
}

inline std::vector<std::vector<double>> per_matrix(const std::vector<std::vector<std::uint8_t>>& hits) {
    std::vector<std::vector<double>> m(hits.size(), std::vector<double>(hits.size(), 0.0));
    for (std::size_t i = 0; i < hits.size(); ++i)
        for (std::size_t j = 0; j < hits.size(); ++j)
            m[i][j] = i == j ? (std::count(hits[i].begin(), hits[i].end(), std::uint8_t(1)) == 0
                                    ? std::numeric_limits<double>::quiet_NaN()
                                    : 0.0)
                             : per_value(hits[i], hits[j]);
    return m;
}

namespace detail {

inline Batch eval_batch(const SequenceDataset& ds, EvalSplit split, std::size_t begin,
                        std::size_t end) {
    Batch b;
    b.size = static_cast<int>(end - begin);
    b.max_len = ds.max_len;
    b.padded_ids.reserve(static_cast<std::size_t>(b.size) * ds.max_len);
    for (std::size_t u = begin; u < end; ++u) {
        std::vector<int> window = pad_or_truncate(eval_history(ds, u, split), ds.max_len);
        b.padded_ids.insert(b.padded_ids.end(), window.begin(), window.end());
        b.targets.push_back(eval_target(ds, u, split));
    }
    b.valid_mask.resize(b.padded_ids.size());
    for (std::size_t i = 0; i < b.padded_ids.size(); ++i)
        b.valid_mask[i] = b.padded_ids[i] != 0 ? 1 : 0;
    return b;
}

template <typename S>
std::vector<int> ranks_from_scores(const Tensor<S>& logits, const SequenceDataset& ds,
                                   EvalSplit split, std::size_t begin, const Batch& batch,
                                   bool exclude_history) {
    const int n_items = static_cast<int>(ds.n_items());
    std::vector<int> ranks;
    std::vector<std::uint8_t> seen;
    for (int r = 0; r < batch.size; ++r) {
        const S* row = logits.data() + static_cast<std::size_t>(r) * n_items;
        const std::uint8_t* excl = nullptr;
        if (exclude_history) {
            seen.assign(static_cast<std::size_t>(n_items) + 1, 0);
            for (int id : eval_history(ds, begin + static_cast<std::size_t>(r), split))
                seen[static_cast<std::size_t>(id)] = 1;
            excl = seen.data();
        }
        ranks.push_back(rank_of_target(row, n_items, batch.targets[static_cast<std::size_t>(r)], excl));
    }
    return ranks;
}

}  // namespace detail

// Full-ranking evaluation of one network (no negative sampling, and by
// default no masking of already-seen items; exclude_history enables the
// masked variant).
template <typename S>
std::vector<int> evaluation_ranks(NetworkParams<S>& net, const SequenceDataset& ds,
                                  EvalSplit split, int eval_batch_size,
                                  bool exclude_history = false) {
    if (eval_batch_size < 1) throw ContractError("eval batch size must be positive");
    std::vector<int> ranks;
    ranks.reserve(ds.n_users());
    for (std::size_t begin = 0; begin < ds.n_users();
         begin += static_cast<std::size_t>(eval_batch_size)) {
        const std::size_t end =
            std::min(ds.n_users(), begin + static_cast<std::size_t>(eval_batch_size));
        Batch batch = detail::eval_batch(ds, split, begin, end);
        Tensor<S> h = monolithic_forward(net, batch, false, nullptr, static_cast<Tape<S>*>(nullptr));
        Tensor<S> logits = score_items(h, net.item_table, static_cast<Tape<S>*>(nullptr));
        auto part = detail::ranks_from_scores(logits, ds, split, begin, batch, exclude_history);
        ranks.insert(ranks.end(), part.begin(), part.end());
    }
    return ranks;
}

template <typename S>
MetricReport evaluate(NetworkParams<S>& net, const SequenceDataset& ds, EvalSplit split,
                      std::vector<int> ks = kDefaultKs, int eval_batch_size = 256,
                      bool exclude_history = false) {
    return metrics_from_ranks(evaluation_ranks(net, ds, split, eval_batch_size, exclude_history),
                              std::move(ks));
}

// Per-path evaluation of the full ensemble, plus pairwise prediction error
// rates over the hit sets at per_k.
struct PathEvalReport {
    std::vector<std::string> labels;
    std::vector<MetricReport> reports;
    std::vector<std::vector<std::uint8_t>> hits;  // [path][user], rank <= per_k
    std::vector<std::vector<double>> per;
    int per_k = 20;
};

template <typename S>
PathEvalReport evaluate_paths(EnsembleState<S>& st, const SequenceDataset& ds, EvalSplit split,
                              std::vector<int> ks = kDefaultKs, int per_k = 20,
                              int eval_batch_size = 256, bool exclude_history = false) {
    const int m = st.boundary.n_stages();
    const std::size_t n_paths = std::size_t(1) << m;
    std::vector<std::vector<int>> ranks(n_paths);
    PathEvalReport out;
    out.per_k = per_k;
    for (const Path& p : enumerate_paths(m)) out.labels.push_back(path_label(p));
    for (std::size_t begin = 0; begin < ds.n_users();
         begin += static_cast<std::size_t>(eval_batch_size)) {
        const std::size_t end =
            std::min(ds.n_users(), begin + static_cast<std::size_t>(eval_batch_size));
        Batch batch = detail::eval_batch(ds, split, begin, end);
        RepresentationBundle<S> bundle =
            forward_all(st, batch, false, 0, static_cast<Tape<S>*>(nullptr));
        for (std::size_t pi = 0; pi < n_paths; ++pi) {
            // A path's representation lives in the output space of the
            // network owning its final stage; score with that item table.
            Tensor<S>& table = st.net(bundle.paths[pi].back()).item_table;
            Tensor<S> logits = score_items(bundle.reps[pi], table, static_cast<Tape<S>*>(nullptr));
            auto part = detail::ranks_from_scores(logits, ds, split, begin, batch, exclude_history);
            ranks[pi].insert(ranks[pi].end(), part.begin(), part.end());
        }
    }
    out.hits.assign(n_paths, std::vector<std::uint8_t>(ds.n_users(), 0));
    for (std::size_t pi = 0; pi < n_paths; ++pi) {
        out.reports.push_back(metrics_from_ranks(ranks[pi], ks));
        for (std::size_t u = 0; u < ds.n_users(); ++u)
            out.hits[pi][u] = ranks[pi][u] <= per_k ? 1 : 0;
    }
    out.per = per_matrix(out.hits);
    return out;
}

}  // namespace flame
