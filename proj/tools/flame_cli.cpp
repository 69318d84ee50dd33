#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <flame/flame.hpp>

namespace fs = std::filesystem;
using Scalar = float;

namespace {

const char* kUsage =
    "usage: flame <ingest|pretrain|train|eval|diagnose> [--config FILE] [--key=value ...]\n"
    "\n"
    "  ingest     parse a user<TAB>item<TAB>timestamp log, filter, split, cache\n"
    "             (keys: input, output, min_count, max_len)\n"
    "  pretrain   train a single network on the next-item objective\n"
    "             (keys: data, out, seed, d, layers, heads, max_len, ...)\n"
    "  train      train per `mode` (single, ensemble_scratch, ensemble_guide, flame)\n"
    "             flame/ensemble_guide need frozen_checkpoint= or pretrain_first=true\n"
    "  eval       score a checkpoint (keys: data, checkpoint, split, source,\n"
    "             frozen_checkpoint for source=all_paths, exclude_history)\n"
    "  diagnose   run the modes listed in `modes`, emit traces and PER matrices\n"
    "\n"
    "global flags: --config FILE, --seed N, --out DIR, --deterministic\n"
    "exit codes: 0 ok, 1 usage/config, 2 data/format, 3 numeric/runtime\n";

bool is_flag_key(const std::string& k) {
    return k == "deterministic" || k == "pretrain_first" || k == "per_position" ||
           k == "exclude_history";
}

flame::RunConfig parse_args(int argc, char** argv) {
    flame::RunConfig cfg;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::optional<std::string> config_path;
    for (int i = 2; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) != 0) throw flame::ConfigError("unexpected argument '" + arg + "'");
        arg = arg.substr(2);
        std::string key, value;
        const std::size_t eq = arg.find('=');
        if (eq != std::string::npos) {
            key = arg.substr(0, eq);
            value = arg.substr(eq + 1);
        } else if (is_flag_key(arg)) {
            key = arg;
            value = "true";
        } else {
            if (i + 1 >= argc) throw flame::ConfigError("flag --" + arg + " needs a value");
            key = arg;
            value = argv[++i];
        }
        if (key == "config")
            config_path = value;
        else
            overrides.emplace_back(key, value);
    }
    if (config_path) cfg.load_file(*config_path);
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw flame::DataError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw flame::DataError("write failure on '" + path.string() + "'");
}

std::string format_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

flame::SequenceDataset load_data(const flame::RunConfig& cfg) {
    const std::string& path = cfg.get("data");
    if (path.empty()) throw flame::ConfigError("key 'data' is required");
    flame::SequenceDataset ds = flame::load_dataset_auto(
        path, static_cast<int>(cfg.get_int("min_count")), static_cast<int>(cfg.get_int("max_len")));
    if (ds.max_len != static_cast<int>(cfg.get_int("max_len")))
        throw flame::ConfigError("dataset cache was built with max_len=" +
                                 std::to_string(ds.max_len) + ", config says " + cfg.get("max_len"));
    return ds;
}

// Per-epoch CSV appender plus a progress line on stdout.
struct MetricsWriter {
    std::ofstream csv;
    std::ofstream csv_second;
    bool deterministic = false;

    MetricsWriter(const fs::path& path, const fs::path& second_path, bool det)
        : deterministic(det) {
        csv.open(path);
        if (!csv) throw flame::DataError("cannot open '" + path.string() + "' for writing");
        csv << flame::metrics_csv_header() << "\n";
        if (!second_path.empty()) {
            csv_second.open(second_path);
            if (!csv_second)
                throw flame::DataError("cannot open '" + second_path.string() + "' for writing");
            csv_second << flame::metrics_csv_header() << "\n";
        }
    }

    flame::EpochCallback callback() {
        return [this](const flame::EpochRow& row, const flame::EpochRow* second) {
            csv << flame::metrics_csv_line(row, deterministic) << "\n";
            csv.flush();
            if (second && csv_second.is_open()) {
                csv_second << flame::metrics_csv_line(*second, deterministic) << "\n";
                csv_second.flush();
            }
            std::printf("epoch %3d  loss %.5f  rec %.5f  mkt %.5f  val NDCG@20 %.5f\n",
                        row.epoch, row.train_loss, row.rec_loss, row.mkt_loss, row.ndcg20);
            std::fflush(stdout);
        };
    }
};

void write_metric_report(const fs::path& path, const flame::MetricReport& rep) {
    std::ostringstream out;
    out << "metric,K,value\n";
    for (std::size_t i = 0; i < rep.ks.size(); ++i)
        out << "hr," << rep.ks[i] << "," << format_g(rep.hr[i]) << "\n";
    for (std::size_t i = 0; i < rep.ks.size(); ++i)
        out << "ndcg," << rep.ks[i] << "," << format_g(rep.ndcg[i]) << "\n";
    write_text(path, out.str());
}

void write_per_csv(const fs::path& path, const std::vector<std::string>& labels,
                   const std::vector<std::vector<double>>& matrix) {
    std::ostringstream out;
    out << "path";
    for (const auto& l : labels) out << "," << l;
    out << "\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
        out << labels[i];
        for (double v : matrix[i]) out << "," << (std::isnan(v) ? "nan" : format_g(v));
        out << "\n";
    }
    write_text(path, out.str());
}

void print_report(const std::string& name, const flame::MetricReport& rep) {
    std::printf("%s over %zu users:", name.c_str(), rep.users);
    for (std::size_t i = 0; i < rep.ks.size(); ++i)
        std::printf("  HR@%d %.5f NDCG@%d %.5f", rep.ks[i], rep.hr[i], rep.ks[i], rep.ndcg[i]);
    std::printf("\n");
}

int cmd_ingest(const flame::RunConfig& cfg) {
    const std::string& input = cfg.get("input");
    const std::string& output = cfg.get("output");
    if (input.empty() || output.empty())
        throw flame::ConfigError("ingest needs input= and output= paths");
    std::ifstream in(input, std::ios::binary);
    if (!in) throw flame::DataError("cannot open '" + input + "'");
    flame::InteractionLog log = flame::parse_interactions(in);
    flame::SequenceDataset ds = flame::build_sequences(
        log, static_cast<int>(cfg.get_int("min_count")), static_cast<int>(cfg.get_int("max_len")));
    flame::save_dataset(output, ds);
    const flame::DatasetStats st = flame::dataset_stats(ds);
    std::printf("users %zu\nitems %zu\ninteractions %zu\navg_length %.4f\nsparsity %.4f%%\n",
                st.users, st.items, st.interactions, st.avg_length, 100.0 * st.sparsity);
    std::printf("cache written to %s\n", output.c_str());
    return 0;
}

// Loads the frozen network from frozen_checkpoint, or pretrains one into
// <out>/frozen.ckpt when pretrain_first is set.
flame::NetworkParams<Scalar> resolve_frozen(flame::RunConfig& cfg, const flame::SequenceDataset& ds,
                                            const fs::path& out_dir, bool deterministic) {
    const std::string path = cfg.get("frozen_checkpoint");
    if (!path.empty()) {
        auto loaded = flame::load_checkpoint<Scalar>(path);
        return std::move(loaded.net);
    }
    if (!cfg.get_bool("pretrain_first"))
        throw flame::ConfigError("this mode needs frozen_checkpoint= or pretrain_first=true");
    flame::TrainConfig tc = cfg.to_train_config();
    tc.mode = flame::TrainMode::single;
    tc.seed = flame::derive_seed(tc.seed, "pretrain");
    std::printf("pretraining frozen network (%d epochs max)...\n", tc.epochs);
    MetricsWriter w(out_dir / "pretrain_metrics.csv", {}, deterministic);
    auto result = flame::pretrain_frozen<Scalar>(tc, ds, w.callback());
    flame::CheckpointMeta meta = result.meta;
    flame::save_checkpoint((out_dir / "frozen.ckpt").string(), result.best, meta);
    cfg.set("frozen_checkpoint", (out_dir / "frozen.ckpt").string());
    std::printf("frozen checkpoint: %s (best epoch %u, NDCG@20 %.5f)\n",
                (out_dir / "frozen.ckpt").string().c_str(), meta.epoch, meta.best_ndcg);
    return result.best;
}

int run_one_mode(flame::RunConfig& cfg, const flame::SequenceDataset& ds, const fs::path& out_dir,
                 const std::string& command) {
    const bool deterministic = cfg.get_bool("deterministic");
    flame::TrainConfig tc = cfg.to_train_config();
    fs::create_directories(out_dir);
    std::optional<flame::NetworkParams<Scalar>> frozen;
    if (tc.mode == flame::TrainMode::flame || tc.mode == flame::TrainMode::ensemble_guide)
        frozen = resolve_frozen(cfg, ds, out_dir, deterministic);
    cfg.set("checkpoint", (out_dir / "checkpoint.ckpt").string());
    write_text(out_dir / "manifest.cfg", cfg.manifest(command));
    const bool two_series = tc.mode == flame::TrainMode::ensemble_scratch ||
                            tc.mode == flame::TrainMode::ensemble_guide;
    MetricsWriter w(out_dir / "metrics.csv",
                    two_series ? out_dir / "metrics_second.csv" : fs::path(), deterministic);
    flame::TrainResult<Scalar> result;
    switch (tc.mode) {
        case flame::TrainMode::single:
            result = flame::train_single<Scalar>(tc, ds, w.callback());
            break;
        case flame::TrainMode::flame:
            // diagnose needs the frozen network again for the path report below
            result = flame::train_flame<Scalar>(
                tc, ds, command == "diagnose" ? frozen->clone() : std::move(*frozen),
                w.callback());
            break;
        default:
            result = flame::train_baseline<Scalar>(tc, ds, frozen ? &*frozen : nullptr,
                                                   w.callback());
            break;
    }
    flame::save_checkpoint((out_dir / "checkpoint.ckpt").string(), result.best, result.meta);
    if (result.best_second)
        flame::save_checkpoint((out_dir / "checkpoint_second.ckpt").string(), *result.best_second,
                               result.meta);
    std::printf("best epoch %u, validation NDCG@20 %.5f\n", result.meta.epoch,
                result.meta.best_ndcg);
    std::printf("checkpoint: %s\n", (out_dir / "checkpoint.ckpt").string().c_str());

    // Diagnostics: pairwise PER matrices over test-split hit sets.
    if (command == "diagnose") {
        const int per_k = static_cast<int>(cfg.get_int("per_k"));
        if (tc.mode == flame::TrainMode::flame) {
            auto st = flame::EnsembleState<Scalar>::make(std::move(*frozen),
                                                         std::move(result.best), tc.sub_modules);
            auto paths = flame::evaluate_paths(st, ds, flame::EvalSplit::test, flame::kDefaultKs,
                                               per_k, tc.eval_batch);
            write_per_csv(out_dir / "per.csv", paths.labels, paths.per);
            std::ostringstream rep;
            rep << "path,HR@20,NDCG@20\n";
            for (std::size_t i = 0; i < paths.labels.size(); ++i)
                rep << paths.labels[i] << "," << format_g(paths.reports[i].hr_at(20)) << ","
                    << format_g(paths.reports[i].ndcg_at(20)) << "\n";
            write_text(out_dir / "path_metrics.csv", rep.str());
        } else if (two_series) {
            flame::NetworkParams<Scalar>& first =
                tc.mode == flame::TrainMode::ensemble_guide ? *frozen : result.best;
            flame::NetworkParams<Scalar>& second = tc.mode == flame::TrainMode::ensemble_guide
                                                       ? result.best
                                                       : *result.best_second;
            const std::vector<std::string> labels =
                tc.mode == flame::TrainMode::ensemble_guide
                    ? std::vector<std::string>{"frz", "lrn"}
                    : std::vector<std::string>{"net1", "net2"};
            std::vector<std::vector<std::uint8_t>> hits(2);
            flame::NetworkParams<Scalar>* nets[2] = {&first, &second};
            for (int n = 0; n < 2; ++n) {
                auto ranks = flame::evaluation_ranks(*nets[n], ds, flame::EvalSplit::test,
                                                     tc.eval_batch);
                hits[n].resize(ranks.size());
                for (std::size_t u = 0; u < ranks.size(); ++u)
                    hits[n][u] = ranks[u] <= per_k ? 1 : 0;
            }
            write_per_csv(out_dir / "per.csv", labels, flame::per_matrix(hits));
        }
    }
    return 0;
}

int cmd_train(flame::RunConfig& cfg, const std::string& command) {
    flame::SequenceDataset ds = load_data(cfg);
    return run_one_mode(cfg, ds, cfg.get("out"), command);
}

int cmd_pretrain(flame::RunConfig& cfg) {
    cfg.set("mode", "single");
    return cmd_train(cfg, "pretrain");
}

int cmd_eval(flame::RunConfig& cfg) {
    flame::SequenceDataset ds = load_data(cfg);
    const std::string& ckpt = cfg.get("checkpoint");
    if (ckpt.empty()) throw flame::ConfigError("eval needs checkpoint=");
    const std::string& split_name = cfg.get("split");
    flame::EvalSplit split;
    if (split_name == "valid")
        split = flame::EvalSplit::validation;
    else if (split_name == "test")
        split = flame::EvalSplit::test;
    else
        throw flame::ConfigError("split must be 'valid' or 'test', got '" + split_name + "'");
    const bool exclude = cfg.get_bool("exclude_history");
    const int eval_batch = static_cast<int>(cfg.get_int("eval_batch"));
    const fs::path out_dir = cfg.get("out");
    fs::create_directories(out_dir);
    auto loaded = flame::load_checkpoint<Scalar>(ckpt);
    if (loaded.net.hyper.n_items != static_cast<int>(ds.n_items()))
        throw flame::ConfigError("checkpoint item count " +
                                 std::to_string(loaded.net.hyper.n_items) +
                                 " does not match dataset (" + std::to_string(ds.n_items()) + ")");
    const std::string& source = cfg.get("source");
    if (source == "lrn_only") {
        flame::MetricReport rep =
            flame::evaluate(loaded.net, ds, split, flame::kDefaultKs, eval_batch, exclude);
        print_report(split_name, rep);
        write_metric_report(out_dir / ("eval_" + split_name + ".csv"), rep);
    } else if (source == "all_paths") {
        const std::string& frozen_path = cfg.get("frozen_checkpoint");
        if (frozen_path.empty())
            throw flame::ConfigError("source=all_paths needs frozen_checkpoint=");
        auto frozen = flame::load_checkpoint<Scalar>(frozen_path);
        auto st = flame::EnsembleState<Scalar>::make(std::move(frozen.net), std::move(loaded.net),
                                                     static_cast<int>(cfg.get_int("sub_modules")));
        auto paths = flame::evaluate_paths(st, ds, split, flame::kDefaultKs,
                                           static_cast<int>(cfg.get_int("per_k")), eval_batch,
                                           exclude);
        for (std::size_t i = 0; i < paths.labels.size(); ++i)
            print_report(paths.labels[i], paths.reports[i]);
        std::ostringstream rep;
        rep << "path,metric,K,value\n";
        for (std::size_t i = 0; i < paths.labels.size(); ++i) {
            const auto& r = paths.reports[i];
            for (std::size_t k = 0; k < r.ks.size(); ++k)
                rep << paths.labels[i] << ",hr," << r.ks[k] << "," << format_g(r.hr[k]) << "\n";
            for (std::size_t k = 0; k < r.ks.size(); ++k)
                rep << paths.labels[i] << ",ndcg," << r.ks[k] << "," << format_g(r.ndcg[k]) << "\n";
        }
        write_text(out_dir / ("eval_paths_" + split_name + ".csv"), rep.str());
        write_per_csv(out_dir / ("per_" + split_name + ".csv"), paths.labels, paths.per);
    } else {
        throw flame::ConfigError("source must be 'lrn_only' or 'all_paths', got '" + source + "'");
    }
    return 0;
}

int cmd_diagnose(flame::RunConfig& cfg) {
    flame::SequenceDataset ds = load_data(cfg);
    const fs::path out_root = cfg.get("out");
    fs::create_directories(out_root);
    std::vector<std::string> modes;
    std::stringstream list(cfg.get("modes"));
    std::string item;
    while (std::getline(list, item, ','))
        if (!item.empty()) modes.push_back(item);
    if (modes.empty()) throw flame::ConfigError("diagnose needs a non-empty modes= list");
    for (const std::string& mode : modes) {
        std::printf("== mode %s ==\n", mode.c_str());
        flame::RunConfig mode_cfg = cfg;
        mode_cfg.set("mode", mode);
        mode_cfg.set("out", (out_root / mode).string());
        run_one_mode(mode_cfg, ds, out_root / mode, "diagnose");
        // Share one pretrained frozen network across modes.
        if (cfg.get("frozen_checkpoint").empty() &&
            !mode_cfg.get("frozen_checkpoint").empty())
            cfg.set("frozen_checkpoint", mode_cfg.get("frozen_checkpoint"));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Large activation buffers churn every step; keep them off mmap so the
    // allocator reuses pages.
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
    if (argc < 2) {
        std::fputs(kUsage, stderr);
        return 1;
    }
    const std::string command = argv[1];
    try {
        flame::RunConfig cfg = parse_args(argc, argv);
        if (command == "ingest") return cmd_ingest(cfg);
        if (command == "pretrain") return cmd_pretrain(cfg);
        if (command == "train") return cmd_train(cfg, "train");
        if (command == "eval") return cmd_eval(cfg);
        if (command == "diagnose") return cmd_diagnose(cfg);
        std::fputs(kUsage, stderr);
        throw flame::ConfigError("unknown command '" + command + "'");
    } catch (const flame::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const flame::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const flame::FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
