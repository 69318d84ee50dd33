#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "backbone.hpp"
#include "checkpoint.hpp"
#include "data.hpp"
#include "ensemble.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "objectives.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace flame {

enum class TrainMode { single, ensemble_scratch, ensemble_guide, flame };

inline const char* mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::single: return "single";
        case TrainMode::ensemble_scratch: return "ensemble_scratch";
        case TrainMode::ensemble_guide: return "ensemble_guide";
        case TrainMode::flame: return "flame";
    }
    throw ContractError("unreachable mode");
}

inline TrainMode parse_mode(const std::string& s) {
    if (s == "single") return TrainMode::single;
    if (s == "ensemble_scratch") return TrainMode::ensemble_scratch;
    if (s == "ensemble_guide") return TrainMode::ensemble_guide;
    if (s == "flame") return TrainMode::flame;
    throw ConfigError("unknown mode '" + s + "'");
}

struct TrainConfig {
    TrainMode mode = TrainMode::flame;
    int width = 64;
    int layers = 2;
    int heads = 2;
    int max_len = 50;
    int sub_modules = 2;  // M
    double dropout = 0.5;
    double tau = 1.0;
    double lambda0 = 0.1;
    double lambda_r = 1e-5;
    bool uniform_weighting = false;  // ablation: cl_loss instead of mkt_loss
    bool per_position = false;       // shifted-target supervision at every valid position
    double lr = 1e-3;
    int batch_size = 256;
    int epochs = 200;  // R
    int patience = 30;
    int eval_batch = 256;
    std::uint64_t seed = 42;

    ModelHyper hyper(int n_items) const {
        return ModelHyper{width, layers, heads, max_len, n_items, dropout};
    }

    AnnealSchedule schedule() const { return AnnealSchedule{lambda0, lambda_r, epochs}; }

    void validate() const {
        hyper(1).validate();
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (patience < 1 || patience > epochs)
            throw ConfigError("patience must lie in [1, epochs]");
        if (lr <= 0.0) throw ConfigError("learning rate must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
        if (tau <= 0.0) throw ConfigError("tau must be positive");
        const bool contrastive = mode != TrainMode::single;
        if (contrastive && batch_size < 2)
            throw ConfigError("contrastive objectives need batch_size >= 2");
        if (mode == TrainMode::flame) {
            schedule().validate();
            if (sub_modules < 2 || sub_modules > layers + 1)
                throw ConfigError("sub-module count M must lie in [2, L+1]");
        }
    }
};

struct EpochRow {
    int epoch = 0;  // 0-based
    double lambda = 0.0;
    double train_loss = 0.0;
    double rec_loss = 0.0;
    double mkt_loss = 0.0;
    double hr5 = 0.0, hr10 = 0.0, hr20 = 0.0;
    double ndcg5 = 0.0, ndcg10 = 0.0, ndcg20 = 0.0;
    double wall_seconds = 0.0;
};

inline const char* metrics_csv_header() {
    return "epoch,lambda,train_loss,rec_loss,mkt_loss,val_HR@5,val_HR@10,val_HR@20,"
           "val_NDCG@5,val_NDCG@10,val_NDCG@20,wall_seconds";
}

// One CSV line. Deterministic mode reports wall_seconds as 0 so that
// equal-seed runs produce bitwise-identical files.
inline std::string metrics_csv_line(const EpochRow& r, bool deterministic) {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g",
                  r.epoch, r.lambda, r.train_loss, r.rec_loss, r.mkt_loss, r.hr5, r.hr10,
                  r.hr20, r.ndcg5, r.ndcg10, r.ndcg20,
                  deterministic ? 0.0 : r.wall_seconds);
    return buf;
}

inline std::string metrics_csv(const std::vector<EpochRow>& rows, bool deterministic) {
    std::string out = metrics_csv_header();
    out += '\n';
    for (const EpochRow& r : rows) {
        out += metrics_csv_line(r, deterministic);
        out += '\n';
    }
    return out;
}

// Standard bias-corrected Adam over an explicit parameter list. Frozen
// parameters are never passed in; the padding row receives zero gradient
// from every op, so its update is exactly zero.
template <typename S>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step = 0;
    std::vector<std::vector<double>> m, v;
};

template <typename S>
void adam_step(const std::vector<Tensor<S>*>& params, AdamState<S>& state, double lr) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->numel(), 0.0);
            state.v[i].assign(params[i]->numel(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw ContractError("optimizer state does not match parameter list");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<S>& t = *params[i];
        if (!t.requires_grad()) throw ContractError("adam_step given a non-trainable tensor");
        if (!t.has_grad()) throw ContractError("missing gradient for a trainable parameter");
        const S* g = t.grad_data();
        S* x = t.data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < t.numel(); ++k) {
            const double gk = static_cast<double>(g[k]);
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            const double update = lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + state.eps);
            x[k] = static_cast<S>(static_cast<double>(x[k]) - update);
        }
    }
}

// Next-item supervision at every valid window position (shifted targets),
// the standard SASRec form behind the per_position flag.
template <typename S>
Tensor<S> rec_loss_per_position(Tensor<S> hidden, Tensor<S> item_table, const Batch& batch,
                                Tape<S>* tape) {
    std::vector<std::size_t> rows;
    std::vector<int> labels;
    const int t_len = batch.max_len;
    for (int b = 0; b < batch.size; ++b) {
        for (int t = 0; t < t_len; ++t) {
            const std::size_t flat = static_cast<std::size_t>(b) * t_len + t;
            if (!batch.valid_mask[flat]) continue;
            rows.push_back(flat);
            labels.push_back(t + 1 < t_len ? batch.padded_ids[flat + 1]
                                           : batch.targets[static_cast<std::size_t>(b)]);
        }
    }
    return rec_loss(gather_rows(hidden, rows, tape), item_table, labels, tape);
}

template <typename S>
struct TrainResult {
    NetworkParams<S> best;
    std::optional<NetworkParams<S>> best_second;  // ensemble_scratch only
    CheckpointMeta meta;
    std::vector<EpochRow> trace;
    std::vector<EpochRow> trace_second;  // two-network modes
};

using EpochCallback = std::function<void(const EpochRow&, const EpochRow*)>;

namespace detail {

struct StepLoss {
    double total = 0.0;
    double rec = 0.0;
    double mkt = 0.0;
};

inline EpochRow make_row(int epoch, double lambda, const StepLoss& sums, double users,
                         const MetricReport& rep, double wall) {
    EpochRow row;
    row.epoch = epoch;
    row.lambda = lambda;
    row.train_loss = sums.total / users;
    row.rec_loss = sums.rec / users;
    row.mkt_loss = sums.mkt / users;
    row.hr5 = rep.hr_at(5);
    row.hr10 = rep.hr_at(10);
    row.hr20 = rep.hr_at(20);
    row.ndcg5 = rep.ndcg_at(5);
    row.ndcg10 = rep.ndcg_at(10);
    row.ndcg20 = rep.ndcg_at(20);
    row.wall_seconds = wall;
    return row;
}

template <typename S>
void check_finite(const Tensor<S>& loss, int epoch) {
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
}

// Full [B,T,d] forward in training mode, drawing dropout sequentially from
// the given stream.
template <typename S>
Tensor<S> monolithic_hidden(NetworkParams<S>& net, const Batch& batch, Rng* rng, Tape<S>* tape) {
    Tensor<S> h = embed(net, batch, true, rng, tape);
    return encode(net, h, batch, true, rng, tape);
}

template <typename S>
Tensor<S> rec_from_hidden(Tensor<S> hidden, NetworkParams<S>& net, const Batch& batch,
                          bool per_position, Tape<S>* tape) {
    if (per_position) return rec_loss_per_position(hidden, net.item_table, batch, tape);
    return rec_loss(take_last(hidden, tape), net.item_table, batch.targets, tape);
}

}  // namespace detail

// Generic epoch loop shared by every mode. step_fn runs one optimization
// step and reports the loss parts; eval_fn produces the canonical metric
// report plus an optional second-network report.
template <typename S, typename StepFn, typename EvalFn, typename SnapshotFn>
TrainResult<S> run_training(const TrainConfig& cfg, const SequenceDataset& ds, StepFn step_fn,
                            EvalFn eval_fn, SnapshotFn snapshot_fn,
                            const EpochCallback& on_epoch) {
    TrainResult<S> result;
    double best_ndcg = -1.0;
    int best_epoch = -1;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto batches = make_batches(ds, cfg.batch_size, true,
                                    derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        detail::StepLoss sums;
        for (std::size_t step = 0; step < batches.size(); ++step) {
            const std::uint64_t step_seed =
                derive_seed(cfg.seed, "dropout", static_cast<std::uint64_t>(epoch), step);
            const detail::StepLoss part = step_fn(epoch, batches[step], step_seed);
            sums.total += part.total * batches[step].size;
            sums.rec += part.rec * batches[step].size;
            sums.mkt += part.mkt * batches[step].size;
        }
        std::pair<MetricReport, std::optional<MetricReport>> reports = eval_fn();
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const double users = static_cast<double>(ds.n_users());
        const double lambda = cfg.mode == TrainMode::flame ? anneal(epoch, cfg.schedule())
                              : cfg.mode == TrainMode::single ? 0.0
                                                              : 1.0;
        result.trace.push_back(detail::make_row(epoch, lambda, sums, users, reports.first, wall));
        const EpochRow* second = nullptr;
        if (reports.second) {
            result.trace_second.push_back(
                detail::make_row(epoch, lambda, sums, users, *reports.second, wall));
            second = &result.trace_second.back();
        }
        if (on_epoch) on_epoch(result.trace.back(), second);
        double selection = reports.first.ndcg_at(20);
        if (reports.second) selection = std::max(selection, reports.second->ndcg_at(20));
        if (selection > best_ndcg) {
            best_ndcg = selection;
            best_epoch = epoch;
            snapshot_fn(result);
        }
        if (epoch - best_epoch >= cfg.patience) break;
    }
    result.meta.epoch = static_cast<std::uint32_t>(best_epoch + 1);
    result.meta.best_ndcg = best_ndcg;
    result.meta.rng_seed = cfg.seed;
    return result;
}

// Single-network training with the next-item objective only. Also the
// frozen network's pretraining procedure (same objective, same budget).
template <typename S>
TrainResult<S> train_single(const TrainConfig& cfg, const SequenceDataset& ds,
                            const EpochCallback& on_epoch = nullptr) {
    cfg.validate();
    Rng init_rng(derive_seed(cfg.seed, "init"));
    NetworkParams<S> net = NetworkParams<S>::init(cfg.hyper(static_cast<int>(ds.n_items())), init_rng);
    net.set_requires_grad(true);
    std::vector<Tensor<S>*> trainables;
    for (auto& [name, t] : net.named_params()) trainables.push_back(t);
    AdamState<S> adam;
    Tape<S> tape;
    auto step_fn = [&](int epoch, const Batch& batch, std::uint64_t step_seed) {
        Rng rng(step_seed);
        Tensor<S> hidden = detail::monolithic_hidden(net, batch, &rng, &tape);
        Tensor<S> loss = detail::rec_from_hidden(hidden, net, batch, cfg.per_position, &tape);
        detail::check_finite(loss, epoch);
        tape.backward(loss);
        adam_step(trainables, adam, cfg.lr);
        for (Tensor<S>* t : trainables) t->zero_grad();
        tape.clear();
        const double value = static_cast<double>(loss.item());
        return detail::StepLoss{value, value, 0.0};
    };
    auto eval_fn = [&]() {
        return std::pair<MetricReport, std::optional<MetricReport>>(
            evaluate(net, ds, EvalSplit::validation, kDefaultKs, cfg.eval_batch), std::nullopt);
    };
    auto snapshot_fn = [&](TrainResult<S>& r) { r.best = net.clone(); };
    return run_training<S>(cfg, ds, step_fn, eval_fn, snapshot_fn, on_epoch);
}

template <typename S>
TrainResult<S> pretrain_frozen(const TrainConfig& cfg, const SequenceDataset& ds,
                               const EpochCallback& on_epoch = nullptr) {
    TrainConfig c = cfg;
    c.mode = TrainMode::single;
    return train_single<S>(c, ds, on_epoch);
}

// FLAME joint training: Eq. 12 on the all-learnable path plus the annealed
// similarity-weighted alignment over all 2^M paths. When lambda is zero for
// an epoch the combinatorial forward is skipped entirely, which reduces the
// step to mode=single bitwise (identical rng consumption).
template <typename S>
TrainResult<S> train_flame(const TrainConfig& cfg, const SequenceDataset& ds,
                           NetworkParams<S> frozen, const EpochCallback& on_epoch = nullptr) {
    cfg.validate();
    if (cfg.mode != TrainMode::flame) throw ConfigError("train_flame requires mode=flame");
    const ModelHyper want = cfg.hyper(static_cast<int>(ds.n_items()));
    if (!(frozen.hyper == want))
        throw ConfigError("frozen checkpoint hyperparameters do not match the run configuration");
    Rng init_rng(derive_seed(cfg.seed, "init"));
    NetworkParams<S> learnable = NetworkParams<S>::init(want, init_rng);
    EnsembleState<S> state = EnsembleState<S>::make(std::move(frozen), std::move(learnable),
                                                    cfg.sub_modules);
    std::vector<Tensor<S>*> trainables;
    for (auto& [name, t] : state.learnable.named_params()) trainables.push_back(t);
    AdamState<S> adam;
    Tape<S> tape;
    auto step_fn = [&](int epoch, const Batch& batch, std::uint64_t step_seed) {
        const double lambda = anneal(epoch, cfg.schedule());
        detail::StepLoss part;
        Tensor<S> loss;
        if (lambda == 0.0) {
            Rng rng(step_seed);
            Tensor<S> hidden = detail::monolithic_hidden(state.learnable, batch, &rng, &tape);
            loss = detail::rec_from_hidden(hidden, state.learnable, batch, cfg.per_position, &tape);
            part.rec = static_cast<double>(loss.item());
        } else {
            RepresentationBundle<S> bundle = forward_all(state, batch, true, step_seed, &tape);
            Tensor<S> rec = cfg.per_position
                                ? rec_loss_per_position(bundle.hiddens.back(),
                                                        state.learnable.item_table, batch, &tape)
                                : rec_loss(bundle.all_learnable(), state.learnable.item_table,
                                           batch.targets, &tape);
            Tensor<S> mkt = cfg.uniform_weighting ? cl_loss(bundle, cfg.tau, &tape)
                                                  : mkt_loss(bundle, cfg.tau, &tape);
            loss = total_loss(rec, mkt, lambda, &tape);
            part.rec = static_cast<double>(rec.item());
            part.mkt = static_cast<double>(mkt.item());
        }
        part.total = static_cast<double>(loss.item());
        detail::check_finite(loss, epoch);
        tape.backward(loss);
        adam_step(trainables, adam, cfg.lr);
        for (Tensor<S>* t : trainables) t->zero_grad();
        tape.clear();
        return part;
    };
    auto eval_fn = [&]() {
        return std::pair<MetricReport, std::optional<MetricReport>>(
            evaluate(state.learnable, ds, EvalSplit::validation, kDefaultKs, cfg.eval_batch),
            std::nullopt);
    };
    auto snapshot_fn = [&](TrainResult<S>& r) { r.best = state.learnable.clone(); };
    return run_training<S>(cfg, ds, step_fn, eval_fn, snapshot_fn, on_epoch);
}

// Conventional ensemble baselines (Fig. 1 shapes): two networks trained
// from scratch with mutual alignment, or one frozen guide plus a learnable
// network. mode=single delegates to train_single.
template <typename S>
TrainResult<S> train_baseline(const TrainConfig& cfg, const SequenceDataset& ds,
                              const NetworkParams<S>* frozen = nullptr,
                              const EpochCallback& on_epoch = nullptr) {
    cfg.validate();
    if (cfg.mode == TrainMode::single) return train_single<S>(cfg, ds, on_epoch);
    if (cfg.mode == TrainMode::flame)
        throw ConfigError("train_baseline covers baseline modes only; use train_flame");
    const ModelHyper want = cfg.hyper(static_cast<int>(ds.n_items()));
    Rng init_rng(derive_seed(cfg.seed, "init"));
    if (cfg.mode == TrainMode::ensemble_scratch) {
        NetworkParams<S> net1 = NetworkParams<S>::init(want, init_rng);
        NetworkParams<S> net2 = NetworkParams<S>::init(want, init_rng);
        net1.set_requires_grad(true);
        net2.set_requires_grad(true);
        std::vector<Tensor<S>*> trainables;
        for (auto& [name, t] : net1.named_params()) trainables.push_back(t);
        for (auto& [name, t] : net2.named_params()) trainables.push_back(t);
        AdamState<S> adam;
        Tape<S> tape;
        auto step_fn = [&](int epoch, const Batch& batch, std::uint64_t step_seed) {
            Rng rng(step_seed);
            Tensor<S> hid1 = detail::monolithic_hidden(net1, batch, &rng, &tape);
            Tensor<S> hid2 = detail::monolithic_hidden(net2, batch, &rng, &tape);
            Tensor<S> h1 = take_last(hid1, &tape);
            Tensor<S> h2 = take_last(hid2, &tape);
            Tensor<S> rec1 = cfg.per_position
                                 ? rec_loss_per_position(hid1, net1.item_table, batch, &tape)
                                 : rec_loss(h1, net1.item_table, batch.targets, &tape);
            Tensor<S> rec2 = cfg.per_position
                                 ? rec_loss_per_position(hid2, net2.item_table, batch, &tape)
                                 : rec_loss(h2, net2.item_table, batch.targets, &tape);
            Tensor<S> rec = add(rec1, rec2, &tape);
            Tensor<S> mkt = conventional_mkt<S>({h1, h2}, cfg.tau, &tape);
            Tensor<S> loss = add(rec, mkt, &tape);
            detail::check_finite(loss, epoch);
            tape.backward(loss);
            adam_step(trainables, adam, cfg.lr);
            for (Tensor<S>* t : trainables) t->zero_grad();
            tape.clear();
            return detail::StepLoss{static_cast<double>(loss.item()),
                                    static_cast<double>(rec.item()),
                                    static_cast<double>(mkt.item())};
        };
        auto eval_fn = [&]() {
            return std::pair<MetricReport, std::optional<MetricReport>>(
                evaluate(net1, ds, EvalSplit::validation, kDefaultKs, cfg.eval_batch),
                evaluate(net2, ds, EvalSplit::validation, kDefaultKs, cfg.eval_batch));
        };
        auto snapshot_fn = [&](TrainResult<S>& r) {
            r.best = net1.clone();
            r.best_second = net2.clone();
        };
        return run_training<S>(cfg, ds, step_fn, eval_fn, snapshot_fn, on_epoch);
    }
    // ensemble_guide
    if (frozen == nullptr)
        throw ConfigError("ensemble_guide requires a pretrained frozen checkpoint");
    if (!(frozen->hyper == want))
        throw ConfigError("frozen checkpoint hyperparameters do not match the run configuration");
    NetworkParams<S> guide = frozen->clone();
    guide.set_requires_grad(false);
    NetworkParams<S> net = NetworkParams<S>::init(want, init_rng);
    net.set_requires_grad(true);
    std::vector<Tensor<S>*> trainables;
    for (auto& [name, t] : net.named_params()) trainables.push_back(t);
    AdamState<S> adam;
    Tape<S> tape;
    auto step_fn = [&](int epoch, const Batch& batch, std::uint64_t step_seed) {
        Tensor<S> h_frz = monolithic_forward(guide, batch, false, nullptr, &tape);
        Rng rng(step_seed);
        Tensor<S> hid = detail::monolithic_hidden(net, batch, &rng, &tape);
        Tensor<S> h_lrn = take_last(hid, &tape);
        Tensor<S> rec = detail::rec_from_hidden(hid, net, batch, cfg.per_position, &tape);
        Tensor<S> mkt = conventional_mkt<S>({h_frz, h_lrn}, cfg.tau, &tape);
        Tensor<S> loss = add(rec, mkt, &tape);
        detail::check_finite(loss, epoch);
        tape.backward(loss);
        adam_step(trainables, adam, cfg.lr);
        for (Tensor<S>* t : trainables) t->zero_grad();
        tape.clear();
        return detail::StepLoss{static_cast<double>(loss.item()),
                                static_cast<double>(rec.item()),
                                static_cast<double>(mkt.item())};
    };
    auto eval_fn = [&]() {
        return std::pair<MetricReport, std::optional<MetricReport>>(
            evaluate(net, ds, EvalSplit::validation, kDefaultKs, cfg.eval_batch),
            evaluate(guide, ds, EvalSplit::validation, kDefaultKs, cfg.eval_batch));
    };
    auto snapshot_fn = [&](TrainResult<S>& r) { r.best = net.clone(); };
    return run_training<S>(cfg, ds, step_fn, eval_fn, snapshot_fn, on_epoch);
}

}  // namespace flame
