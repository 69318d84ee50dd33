#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "backbone.hpp"
#include "data.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace flame {

inline constexpr char kCheckpointMagic[] = "FLAMECKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::uint32_t epoch = 0;     // 1-based count of the best epoch
    double best_ndcg = 0.0;      // validation NDCG@20 at that epoch
    std::uint64_t rng_seed = 0;  // run seed; all streams derive from it
};

// Layout (little-endian): magic, u32 version, hyperparameters, metadata,
// tensor directory of (name, dtype tag, rank, dims, byte offset), then raw
// row-major f32 payloads.
template <typename S>
void save_checkpoint(std::ostream& out, NetworkParams<S>& net, const CheckpointMeta& meta) {
    out.write(kCheckpointMagic, sizeof kCheckpointMagic - 1);
    detail::write_u32(out, kCheckpointVersion);
    detail::write_u32(out, static_cast<std::uint32_t>(net.hyper.width));
    detail::write_u32(out, static_cast<std::uint32_t>(net.hyper.layers));
    detail::write_u32(out, static_cast<std::uint32_t>(net.hyper.heads));
    detail::write_u32(out, static_cast<std::uint32_t>(net.hyper.max_len));
    detail::write_u32(out, static_cast<std::uint32_t>(net.hyper.n_items));
    detail::write_f64(out, net.hyper.dropout);
    detail::write_u32(out, meta.epoch);
    detail::write_f64(out, meta.best_ndcg);
    detail::write_u64(out, meta.rng_seed);
    auto params = net.named_params();
    detail::write_u32(out, static_cast<std::uint32_t>(params.size()));
    std::uint64_t offset = 0;
    for (auto& [name, t] : params) {
        detail::write_string(out, name);
        out.put(0);  // dtype tag 0 = f32
        detail::write_u32(out, static_cast<std::uint32_t>(t->rank()));
        for (int i = 0; i < t->rank(); ++i)
            detail::write_u32(out, static_cast<std::uint32_t>(t->dim(i)));
        detail::write_u64(out, offset);
        offset += t->numel() * sizeof(float);
    }
    detail::write_u64(out, offset);
    for (auto& [name, t] : params) {
        const S* p = t->data();
        std::vector<float> row(t->numel());
        for (std::size_t i = 0; i < t->numel(); ++i) row[i] = static_cast<float>(p[i]);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) throw FormatError("checkpoint: write failure");
}

template <typename S>
void save_checkpoint(const std::string& path, NetworkParams<S>& net, const CheckpointMeta& meta) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    save_checkpoint(out, net, meta);
}

namespace detail {

struct TensorEntry {
    std::string name;
    std::vector<int> dims;
    std::uint64_t offset = 0;
};

struct CheckpointHeader {
    ModelHyper hyper;
    CheckpointMeta meta;
    std::vector<TensorEntry> entries;
    std::uint64_t payload_bytes = 0;
};

inline CheckpointHeader read_checkpoint_header(BinReader& r) {
    char magic[sizeof kCheckpointMagic - 1];
    r.raw(magic, sizeof magic);
    if (std::string(magic, sizeof magic) != kCheckpointMagic)
        throw FormatError("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    CheckpointHeader h;
    h.hyper.width = static_cast<int>(r.u32());
    h.hyper.layers = static_cast<int>(r.u32());
    h.hyper.heads = static_cast<int>(r.u32());
    h.hyper.max_len = static_cast<int>(r.u32());
    h.hyper.n_items = static_cast<int>(r.u32());
    h.hyper.dropout = r.f64();
    h.meta.epoch = r.u32();
    h.meta.best_ndcg = r.f64();
    h.meta.rng_seed = r.u64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorEntry e;
        e.name = r.str();
        char tag;
        r.raw(&tag, 1);
        if (tag != 0) throw FormatError("checkpoint: unknown dtype tag for '" + e.name + "'");
        const std::uint32_t rank = r.u32();
        for (std::uint32_t k = 0; k < rank; ++k) e.dims.push_back(static_cast<int>(r.u32()));
        e.offset = r.u64();
        h.entries.push_back(std::move(e));
    }
    h.payload_bytes = r.u64();
    return h;
}

}  // namespace detail

template <typename S>
struct LoadedCheckpoint {
    NetworkParams<S> net;
    CheckpointMeta meta;
};

// Reads a checkpoint into a fresh network built from the stored
// hyperparameters. Nothing is returned on any failure (no partial state).
template <typename S>
LoadedCheckpoint<S> load_checkpoint(std::istream& in) {
    detail::BinReader r{in, "checkpoint"};
    detail::CheckpointHeader h = detail::read_checkpoint_header(r);
    std::vector<char> payload(h.payload_bytes);
    if (h.payload_bytes) r.raw(payload.data(), payload.size());
    LoadedCheckpoint<S> out;
    h.hyper.validate();
    Rng dummy(0);
    out.net = NetworkParams<S>::init(h.hyper, dummy);
    out.meta = h.meta;
    auto params = out.net.named_params();
    if (params.size() != h.entries.size())
        throw FormatError("checkpoint: tensor count " + std::to_string(h.entries.size()) +
                          " does not match architecture (" + std::to_string(params.size()) + ")");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, t] = params[i];
        const auto& e = h.entries[i];
        if (e.name != name)
            throw FormatError("checkpoint: unexpected tensor '" + e.name + "', wanted '" + name + "'");
        if (e.dims != t->shape())
            throw ConfigError("checkpoint: tensor '" + e.name + "' has shape " +
                              detail::shape_string(e.dims) + ", model expects " +
                              detail::shape_string(t->shape()));
        const std::uint64_t bytes = t->numel() * sizeof(float);
        if (e.offset + bytes > h.payload_bytes)
            throw FormatError("checkpoint: tensor '" + e.name + "' overruns payload");
        const float* src = reinterpret_cast<const float*>(payload.data() + e.offset);
        S* dst = t->data();
        for (std::size_t k = 0; k < t->numel(); ++k) dst[k] = static_cast<S>(src[k]);
    }
    return out;
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    return load_checkpoint<S>(in);
}

// Loads parameters into an existing network, validating shapes against it;
// the first disagreeing tensor is named in the error.
template <typename S>
CheckpointMeta load_checkpoint_into(const std::string& path, NetworkParams<S>& net) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    detail::BinReader r{in, "checkpoint"};
    detail::CheckpointHeader h = detail::read_checkpoint_header(r);
    std::vector<char> payload(h.payload_bytes);
    if (h.payload_bytes) r.raw(payload.data(), payload.size());
    auto params = net.named_params();
    // Stage everything before touching the model so a bad file leaves it
    // intact.
    std::vector<std::vector<S>> staged(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, t] = params[i];
        const detail::TensorEntry* entry = nullptr;
        for (const auto& e : h.entries)
            if (e.name == name) {
                entry = &e;
                break;
            }
        if (!entry) throw ConfigError("checkpoint: tensor '" + name + "' missing from file");
        if (entry->dims != t->shape())
            throw ConfigError("checkpoint: tensor '" + name + "' has shape " +
                              detail::shape_string(entry->dims) + ", model expects " +
                              detail::shape_string(t->shape()));
        const std::uint64_t bytes = t->numel() * sizeof(float);
        if (entry->offset + bytes > h.payload_bytes)
            throw FormatError("checkpoint: tensor '" + name + "' overruns payload");
        const float* src = reinterpret_cast<const float*>(payload.data() + entry->offset);
        staged[i].resize(t->numel());
        for (std::size_t k = 0; k < t->numel(); ++k) staged[i][k] = static_cast<S>(src[k]);
    }
    for (std::size_t i = 0; i < params.size(); ++i)
        std::copy(staged[i].begin(), staged[i].end(), params[i].second->data());
    return h.meta;
}

}  // namespace flame
