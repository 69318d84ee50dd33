#pragma once

// Small fixtures shared across the test binaries.

#include <cstdint>
#include <string>
#include <vector>

#include <flame/flame.hpp>

namespace testsupport {

template <class S>
flame::NetworkParams<S> tiny_net(std::uint64_t seed, int width = 4, int layers = 2, int heads = 2,
                                 int max_len = 6, int n_items = 12, double dropout = 0.0) {
    flame::ModelHyper hyper{width, layers, heads, max_len, n_items, dropout};
    flame::Rng rng(flame::derive_seed(seed, "init"));
    return flame::NetworkParams<S>::init(hyper, rng);
}

inline flame::Batch tiny_batch(std::uint64_t seed, int batch = 3, int max_len = 6,
                               int n_items = 12) {
    flame::Rng rng(flame::derive_seed(seed, "batch"));
    flame::Batch b;
    b.size = batch;
    b.max_len = max_len;
    b.padded_ids.assign(static_cast<std::size_t>(batch) * max_len, 0);
    b.valid_mask.assign(static_cast<std::size_t>(batch) * max_len, 0);
    b.targets.resize(batch);
    for (int i = 0; i < batch; ++i) {
        const int len = 2 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_len - 1)));
        for (int t = max_len - len; t < max_len; ++t) {
            b.padded_ids[static_cast<std::size_t>(i) * max_len + t] =
                1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n_items)));
            b.valid_mask[static_cast<std::size_t>(i) * max_len + t] = 1;
        }
        b.targets[i] = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n_items)));
    }
    return b;
}

// Hand-assembled dataset that skips the 5-core filter, for metric oracles on
// arbitrarily small populations. Sequences are (train..., valid, test).
inline flame::SequenceDataset random_tiny_dataset(std::uint64_t seed, int n_users, int n_items,
                                                  int max_len) {
    flame::Rng rng(flame::derive_seed(seed, "tiny-ds"));
    flame::SequenceDataset ds;
    ds.max_len = max_len;
    for (int i = 0; i < n_items; ++i) ds.item_keys.push_back("i" + std::to_string(i));
    for (int u = 0; u < n_users; ++u) {
        ds.user_keys.push_back("u" + std::to_string(u));
        // length >= 2 keeps the training window non-empty after the target drop
        const int train_len = 2 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_len + 1)));
        std::vector<int> train(train_len);
        for (int& id : train) id = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n_items)));
        ds.train.push_back(std::move(train));
        ds.valid_target.push_back(1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n_items))));
        ds.test_target.push_back(1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n_items))));
    }
    return ds;
}

template <class A, class B>
bool bitwise_equal(const A& a, const B& b) {
    if (a.numel() != b.numel()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

template <class S>
bool nets_bitwise_equal(const flame::NetworkParams<S>& a, const flame::NetworkParams<S>& b) {
    auto pa = a.named_params();
    auto pb = b.named_params();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].first != pb[i].first) return false;
        if (!bitwise_equal(*pa[i].second, *pb[i].second)) return false;
    }
    return true;
}

template <class S>
std::vector<S> snapshot_values(const flame::NetworkParams<S>& net) {
    std::vector<S> out;
    for (auto& [name, t] : net.named_params())
        out.insert(out.end(), t->data(), t->data() + t->numel());
    return out;
}

}  // namespace testsupport
