#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace flame {

// Chronological interaction events grouped per user, ids densified from 1.
// Index 0 is reserved for padding everywhere downstream, so key lookup for
// id k reads keys[k-1].
struct InteractionLog {
    std::vector<std::string> user_keys;
    std::vector<std::string> item_keys;
    // events_by_user[u] lists item ids of user u+1 in ascending timestamp
    // order, ties kept in input order.
    std::vector<std::vector<int>> events_by_user;
    std::size_t event_count = 0;
};

// Parses user<TAB>item<TAB>timestamp lines; blank lines and lines
// starting with '#' are skipped. Repeated items are kept; ordering per
// user is a stable sort on the integer timestamp.
inline InteractionLog parse_interactions(std::istream& in, char delimiter = '\t') {
    InteractionLog log;
    std::unordered_map<std::string, int> user_ids, item_ids;
    struct Raw {
        long long ts;
        std::size_t seq;
        int item;
    };
    std::vector<std::vector<Raw>> raw;
    std::string line;
    std::size_t line_no = 0, seq = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const std::size_t p1 = line.find(delimiter);
        const std::size_t p2 = p1 == std::string::npos ? std::string::npos : line.find(delimiter, p1 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos)
            throw DataError("line " + std::to_string(line_no) + ": expected user, item, timestamp fields");
        const std::string user = line.substr(0, p1);
        const std::string item = line.substr(p1 + 1, p2 - p1 - 1);
        const std::string ts_text = line.substr(p2 + 1);
        if (user.empty() || item.empty() || ts_text.empty())
            throw DataError("line " + std::to_string(line_no) + ": empty field");
        long long ts = 0;
        try {
            std::size_t used = 0;
            ts = std::stoll(ts_text, &used);
            if (used != ts_text.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw DataError("line " + std::to_string(line_no) + ": bad timestamp '" + ts_text + "'");
        }
        auto [uit, u_new] = user_ids.try_emplace(user, static_cast<int>(user_ids.size()) + 1);
        if (u_new) {
            log.user_keys.push_back(user);
            raw.emplace_back();
        }
        auto [iit, i_new] = item_ids.try_emplace(item, static_cast<int>(item_ids.size()) + 1);
        if (i_new) log.item_keys.push_back(item);
        raw[static_cast<std::size_t>(uit->second) - 1].push_back({ts, seq++, iit->second});
    }
    if (seq == 0) throw DataError("no interaction events in input");
    log.event_count = seq;
    log.events_by_user.resize(raw.size());
    for (std::size_t u = 0; u < raw.size(); ++u) {
        auto& ev = raw[u];
        std::stable_sort(ev.begin(), ev.end(),
                         [](const Raw& a, const Raw& b) { return a.ts < b.ts; });
        log.events_by_user[u].reserve(ev.size());
        for (const Raw& r : ev) log.events_by_user[u].push_back(r.item);
    }
    return log;
}

// Filtered, split, id-densified sequences ready for training. Per user the
// chronological sequence s of length n is split leave-one-out: train =
// s[0..n-3], validation target = s[n-2], test target = s[n-1].
struct SequenceDataset {
    int max_len = 0;  // window length T
    std::vector<std::string> user_keys;
    std::vector<std::string> item_keys;
    std::vector<std::vector<int>> train;
    std::vector<int> valid_target;
    std::vector<int> test_target;

    std::size_t n_users() const { return train.size(); }
    std::size_t n_items() const { return item_keys.size(); }
    std::size_t interactions() const {
        std::size_t n = 0;
        for (const auto& s : train) n += s.size() + 2;
        return n;
    }
};

// Iterative min-count co-filtering to a fixpoint (drop users with fewer
// than min_count surviving events and items with fewer than min_count
// surviving occurrences, repeat), then leave-one-out split.
inline SequenceDataset build_sequences(const InteractionLog& log, int min_count, int max_len) {
    if (max_len < 3) throw ContractError("window length must be >= 3, got " + std::to_string(max_len));
    if (min_count < 5)
        throw ContractError("min_count must be >= 5 so split train sequences keep length >= 3");
    const std::size_t n_users = log.events_by_user.size();
    const std::size_t n_items = log.item_keys.size();
    std::vector<std::uint8_t> user_kept(n_users, 1), item_kept(n_items + 1, 1);
    for (;;) {
        bool changed = false;
        std::vector<std::size_t> item_count(n_items + 1, 0);
        for (std::size_t u = 0; u < n_users; ++u) {
            if (!user_kept[u]) continue;
            std::size_t len = 0;
            for (int id : log.events_by_user[u])
                if (item_kept[static_cast<std::size_t>(id)]) ++len;
            if (len < static_cast<std::size_t>(min_count)) {
                user_kept[u] = 0;
                changed = true;
            } else {
                for (int id : log.events_by_user[u])
                    if (item_kept[static_cast<std::size_t>(id)]) ++item_count[static_cast<std::size_t>(id)];
            }
        }
        for (std::size_t i = 1; i <= n_items; ++i) {
            if (item_kept[i] && item_count[i] > 0 && item_count[i] < static_cast<std::size_t>(min_count)) {
                item_kept[i] = 0;
                changed = true;
            }
            if (item_kept[i] && item_count[i] == 0) item_kept[i] = 0;
        }
        if (!changed) break;
    }
    std::vector<int> item_new(n_items + 1, 0);
    SequenceDataset ds;
    ds.max_len = max_len;
    for (std::size_t i = 1; i <= n_items; ++i) {
        if (!item_kept[i]) continue;
        item_new[i] = static_cast<int>(ds.item_keys.size()) + 1;
        ds.item_keys.push_back(log.item_keys[i - 1]);
    }
    for (std::size_t u = 0; u < n_users; ++u) {
        if (!user_kept[u]) continue;
        std::vector<int> seq;
        for (int id : log.events_by_user[u])
            if (item_kept[static_cast<std::size_t>(id)]) seq.push_back(item_new[static_cast<std::size_t>(id)]);
        ds.user_keys.push_back(log.user_keys[u]);
        ds.test_target.push_back(seq.back());
        ds.valid_target.push_back(seq[seq.size() - 2]);
        seq.resize(seq.size() - 2);
        ds.train.push_back(std::move(seq));
    }
    if (ds.train.empty()) throw DataError("dataset empty after min-count filtering");
    return ds;
}

// Left-pads with id 0, or keeps the most recent max_len items.
inline std::vector<int> pad_or_truncate(const std::vector<int>& seq, int max_len) {
    if (seq.empty()) throw ContractError("cannot window an empty sequence");
    std::vector<int> out(static_cast<std::size_t>(max_len), 0);
    const std::size_t keep = std::min(seq.size(), static_cast<std::size_t>(max_len));
    std::copy(seq.end() - static_cast<std::ptrdiff_t>(keep), seq.end(),
              out.end() - static_cast<std::ptrdiff_t>(keep));
    return out;
}

// One training batch. padded_ids is row-major [B,T]; targets holds the
// next-item label of each row's final position; valid_mask marks non-pad
// slots.
struct Batch {
    int size = 0;
    int max_len = 0;
    std::vector<int> padded_ids;
    std::vector<int> targets;
    std::vector<std::uint8_t> valid_mask;
};

// Builds shuffled (or id-ordered) training batches covering every user
// exactly once. The window drops the last train item, which becomes the
// target of the final position.
inline std::vector<Batch> make_batches(const SequenceDataset& ds, int batch_size,
                                       bool shuffle, std::uint64_t seed) {
    if (batch_size < 1) throw ContractError("batch_size must be positive");
    std::vector<std::size_t> order(ds.n_users());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (shuffle) {
        Rng rng(seed);
        rng.shuffle(order);
    }
    const int t_len = ds.max_len;
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        Batch b;
        b.size = static_cast<int>(end - start);
        b.max_len = t_len;
        b.padded_ids.reserve(static_cast<std::size_t>(b.size) * t_len);
        for (std::size_t r = start; r < end; ++r) {
            const auto& seq = ds.train[order[r]];
            std::vector<int> input(seq.begin(), seq.end() - 1);
            std::vector<int> window = pad_or_truncate(input, t_len);
            b.padded_ids.insert(b.padded_ids.end(), window.begin(), window.end());
            b.targets.push_back(seq.back());
        }
        b.valid_mask.resize(b.padded_ids.size());
        for (std::size_t i = 0; i < b.padded_ids.size(); ++i)
            b.valid_mask[i] = b.padded_ids[i] != 0 ? 1 : 0;
        batches.push_back(std::move(b));
    }
    return batches;
}

// The items a user has consumed before the given evaluation split point.
enum class EvalSplit { validation, test };

inline std::vector<int> eval_history(const SequenceDataset& ds, std::size_t user, EvalSplit split) {
    std::vector<int> h = ds.train[user];
    if (split == EvalSplit::test) h.push_back(ds.valid_target[user]);
    return h;
}

inline int eval_target(const SequenceDataset& ds, std::size_t user, EvalSplit split) {
    return split == EvalSplit::validation ? ds.valid_target[user] : ds.test_target[user];
}

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_i32(std::ostream& out, std::int32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_f64(std::ostream& out, double v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct BinReader {
    std::istream& in;
    std::string what;
    void raw(void* p, std::size_t n) {
        in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw FormatError(what + ": truncated file");
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::int32_t i32() {
        std::int32_t v;
        raw(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        raw(&v, sizeof v);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        if (n) raw(s.data(), n);
        return s;
    }
};

}  // namespace detail

inline constexpr char kDataMagic[] = "FLAMEDATA";
inline constexpr std::uint32_t kDataVersion = 1;

// Serializes the processed dataset (little-endian, versioned).
inline void save_dataset(std::ostream& out, const SequenceDataset& ds) {
    out.write(kDataMagic, sizeof kDataMagic - 1);
    detail::write_u32(out, kDataVersion);
    detail::write_u32(out, static_cast<std::uint32_t>(ds.max_len));
    detail::write_u64(out, ds.n_users());
    detail::write_u64(out, ds.n_items());
    for (const auto& k : ds.item_keys) detail::write_string(out, k);
    for (std::size_t u = 0; u < ds.n_users(); ++u) {
        detail::write_string(out, ds.user_keys[u]);
        detail::write_u32(out, static_cast<std::uint32_t>(ds.train[u].size()));
        for (int id : ds.train[u]) detail::write_i32(out, id);
        detail::write_i32(out, ds.valid_target[u]);
        detail::write_i32(out, ds.test_target[u]);
    }
    if (!out) throw FormatError("dataset cache: write failure");
}

inline void save_dataset(const std::string& path, const SequenceDataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    save_dataset(out, ds);
}

inline SequenceDataset load_dataset(std::istream& in) {
    detail::BinReader r{in, "dataset cache"};
    char magic[sizeof kDataMagic - 1];
    r.raw(magic, sizeof magic);
    if (std::string(magic, sizeof magic) != kDataMagic)
        throw FormatError("dataset cache: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kDataVersion)
        throw FormatError("dataset cache: unsupported version " + std::to_string(version));
    SequenceDataset ds;
    ds.max_len = static_cast<int>(r.u32());
    const std::uint64_t n_users = r.u64();
    const std::uint64_t n_items = r.u64();
    ds.item_keys.reserve(n_items);
    for (std::uint64_t i = 0; i < n_items; ++i) ds.item_keys.push_back(r.str());
    for (std::uint64_t u = 0; u < n_users; ++u) {
        ds.user_keys.push_back(r.str());
        const std::uint32_t len = r.u32();
        if (len < 3) throw FormatError("dataset cache: train sequence shorter than 3");
        std::vector<int> seq(len);
        for (auto& id : seq) {
            id = r.i32();
            if (id < 1 || static_cast<std::uint64_t>(id) > n_items)
                throw FormatError("dataset cache: item id out of range");
        }
        ds.train.push_back(std::move(seq));
        ds.valid_target.push_back(r.i32());
        ds.test_target.push_back(r.i32());
        if (ds.valid_target.back() < 1 || static_cast<std::uint64_t>(ds.valid_target.back()) > n_items ||
            ds.test_target.back() < 1 || static_cast<std::uint64_t>(ds.test_target.back()) > n_items)
            throw FormatError("dataset cache: split target out of range");
    }
    if (ds.train.empty()) throw FormatError("dataset cache: no users");
    return ds;
}

// Loads either a serialized cache (recognized by magic) or raw TSV.
inline SequenceDataset load_dataset_auto(const std::string& path, int min_count, int max_len) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    char magic[sizeof kDataMagic - 1];
    in.read(magic, sizeof magic);
    const bool cached = static_cast<std::size_t>(in.gcount()) == sizeof magic &&
                        std::string(magic, sizeof magic) == kDataMagic;
    in.clear();
    in.seekg(0);
    if (cached) return load_dataset(in);
    InteractionLog log = parse_interactions(in);
    return build_sequences(log, min_count, max_len);
}

struct DatasetStats {
    std::size_t users = 0;
    std::size_t items = 0;
    std::size_t interactions = 0;
    double avg_length = 0.0;
    double sparsity = 0.0;
};

inline DatasetStats dataset_stats(const SequenceDataset& ds) {
    DatasetStats s;
    s.users = ds.n_users();
    s.items = ds.n_items();
    s.interactions = ds.interactions();
    s.avg_length = static_cast<double>(s.interactions) / static_cast<double>(s.users);
    s.sparsity = 1.0 - static_cast<double>(s.interactions) /
                           (static_cast<double>(s.users) * static_cast<double>(s.items));
    return s;
}

}  // namespace flame
