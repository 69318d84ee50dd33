#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <flame/flame.hpp>

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr combined
};

const fs::path& workspace() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "flame_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

CliResult run_cli(const std::string& args) {
    const fs::path log = workspace() / "last_run.log";
    const std::string cmd = std::string(FLAME_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream in(log);
    std::stringstream buf;
    buf << in.rdbuf();
    r.output = buf.str();
    return r;
}

// Dense little interaction log: every user logs ten items, every item shows
// up dozens of times, so the whole log survives 5-core filtering.
std::string toy_log_text() {
    std::ostringstream out;
    for (int u = 0; u < 30; ++u)
        for (int t = 0; t < 10; ++t)
            out << "u" << u << "\ti" << (u + t * (1 + u % 3)) % 12 << "\t" << 100 + t << "\n";
    return out.str();
}

const fs::path& toy_tsv() {
    static const fs::path p = [] {
        const fs::path path = workspace() / "toy.tsv";
        std::ofstream out(path);
        out << toy_log_text();
        return path;
    }();
    return p;
}

const fs::path& toy_cache() {
    static const fs::path p = [] {
        const fs::path path = workspace() / "toy.bin";
        auto r = run_cli("ingest --input " + toy_tsv().string() + " --output " + path.string() +
                         " --max_len 10");
        REQUIRE(r.exit_code == 0);
        return path;
    }();
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// tiny, fast hyperparameters shared by the training invocations
std::string small_train_flags() {
    return " --d 8 --layers 1 --heads 2 --max_len 10 --batch_size 16 --eval_batch 64"
           " --epochs 2 --patience 2 --dropout 0.2 --deterministic";
}

std::map<std::string, double> parse_metric_csv(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "metric,K,value");
    std::map<std::string, double> out;
    while (std::getline(in, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        out[line.substr(0, c1) + "@" + line.substr(c1 + 1, c2 - c1 - 1)] =
            std::stod(line.substr(c2 + 1));
    }
    return out;
}

double best_val_ndcg20(const fs::path& metrics_csv) {
    std::ifstream in(metrics_csv);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);  // header
    double best = -1.0;
    while (std::getline(in, line)) {
        std::stringstream row(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(row, cell, ',')) cells.push_back(cell);
        REQUIRE(cells.size() == 12);
        best = std::max(best, std::stod(cells[10]));  // val_NDCG@20 column
    }
    return best;
}

}  // namespace

TEST_CASE("cli rejects empty and unknown invocations") {
    auto none = run_cli("");
    REQUIRE(none.exit_code == 1);
    REQUIRE(none.output.find("usage: flame") != std::string::npos);

    auto bad = run_cli("frobnicate");
    REQUIRE(bad.exit_code == 1);
    REQUIRE(bad.output.find("unknown command 'frobnicate'") != std::string::npos);

    auto badkey = run_cli("train --widht 3");
    REQUIRE(badkey.exit_code == 1);
    REQUIRE(badkey.output.find("unknown configuration key 'widht'") != std::string::npos);

    auto dangling = run_cli("train --seed");
    REQUIRE(dangling.exit_code == 1);
    REQUIRE(dangling.output.find("needs a value") != std::string::npos);
}

TEST_CASE("ingest reports the stats of the cache it writes") {
    auto r = run_cli("ingest --input " + toy_tsv().string() + " --output " +
                     (workspace() / "stats.bin").string() + " --max_len 10");
    REQUIRE(r.exit_code == 0);

    // independent expectation straight from the library
    std::istringstream in(toy_log_text());
    auto ds = flame::build_sequences(flame::parse_interactions(in), 5, 10);
    auto st = flame::dataset_stats(ds);
    char expect[128];
    std::snprintf(expect, sizeof expect, "users %zu\nitems %zu\ninteractions %zu", st.users,
                  st.items, st.interactions);
    REQUIRE(r.output.find(expect) != std::string::npos);

    auto cached = flame::load_dataset_auto((workspace() / "stats.bin").string(), 5, 10);
    REQUIRE(cached.n_users() == ds.n_users());
    REQUIRE(cached.train == ds.train);

    SECTION("missing input is a data error") {
        auto miss = run_cli("ingest --input /nonexistent.tsv --output " +
                            (workspace() / "x.bin").string());
        REQUIRE(miss.exit_code == 2);
    }
    SECTION("both paths are required") {
        auto noout = run_cli("ingest --input " + toy_tsv().string());
        REQUIRE(noout.exit_code == 1);
    }
}

TEST_CASE("training writes metrics, a manifest, and a reusable checkpoint") {
    const fs::path run_a = workspace() / "runA";
    auto r = run_cli("train --data " + toy_cache().string() + " --out " + run_a.string() +
                     " --mode single --seed 7" + small_train_flags());
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(run_a / "metrics.csv"));
    REQUIRE(fs::exists(run_a / "checkpoint.ckpt"));
    REQUIRE(fs::exists(run_a / "manifest.cfg"));
    REQUIRE_FALSE(fs::exists(run_a / "metrics_second.csv"));

    // two epochs -> header plus two rows
    std::istringstream csv(slurp(run_a / "metrics.csv"));
    std::string line;
    int lines = 0;
    std::getline(csv, line);
    REQUIRE(line == flame::metrics_csv_header());
    while (std::getline(csv, line)) ++lines;
    REQUIRE(lines == 2);

    // the manifest reloads into a working configuration
    flame::RunConfig manifest;
    manifest.load_file((run_a / "manifest.cfg").string());
    REQUIRE(manifest.get("mode") == "single");
    REQUIRE(manifest.get_int("d") == 8);
    REQUIRE(manifest.get("checkpoint") == (run_a / "checkpoint.ckpt").string());

    auto loaded = flame::load_checkpoint<float>((run_a / "checkpoint.ckpt").string());
    REQUIRE(loaded.net.hyper.width == 8);
    REQUIRE(loaded.net.hyper.max_len == 10);

    SECTION("equal seeds reproduce the metrics file byte for byte") {
        const fs::path run_b = workspace() / "runB";
        auto r2 = run_cli("train --data " + toy_cache().string() + " --out " + run_b.string() +
                          " --mode single --seed 7" + small_train_flags());
        REQUIRE(r2.exit_code == 0);
        REQUIRE(slurp(run_a / "metrics.csv") == slurp(run_b / "metrics.csv"));
        REQUIRE(slurp(run_a / "checkpoint.ckpt") == slurp(run_b / "checkpoint.ckpt"));
    }
    SECTION("evaluation reproduces the selected epoch's validation numbers") {
        const fs::path eval_dir = workspace() / "evalA";
        auto ev = run_cli("eval --data " + toy_cache().string() + " --checkpoint " +
                          (run_a / "checkpoint.ckpt").string() + " --split valid --out " +
                          eval_dir.string() + " --max_len 10");
        INFO(ev.output);
        REQUIRE(ev.exit_code == 0);
        auto metrics = parse_metric_csv(eval_dir / "eval_valid.csv");
        REQUIRE(metrics.at("ndcg@20") == best_val_ndcg20(run_a / "metrics.csv"));
    }
    SECTION("checkpoints from another item universe are refused") {
        const fs::path other_tsv = workspace() / "other.tsv";
        std::ofstream out(other_tsv);
        for (int u = 0; u < 8; ++u)
            for (int t = 0; t < 8; ++t) out << "u" << u << "\ti" << (u + t) % 6 << "\t" << t << "\n";
        out.close();
        const fs::path other_bin = workspace() / "other.bin";
        REQUIRE(run_cli("ingest --input " + other_tsv.string() + " --output " +
                        other_bin.string() + " --max_len 10")
                    .exit_code == 0);
        auto ev = run_cli("eval --data " + other_bin.string() + " --checkpoint " +
                          (run_a / "checkpoint.ckpt").string() + " --out " +
                          (workspace() / "evalX").string() + " --max_len 10");
        REQUIRE(ev.exit_code == 1);
        REQUIRE(ev.output.find("does not match dataset") != std::string::npos);
    }
}

TEST_CASE("flame training bootstraps its frozen network when asked") {
    const fs::path run_dir = workspace() / "runFlame";
    auto r = run_cli("train --data " + toy_cache().string() + " --out " + run_dir.string() +
                     " --mode flame --sub_modules 2 --pretrain_first --seed 9" +
                     small_train_flags());
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(run_dir / "pretrain_metrics.csv"));
    REQUIRE(fs::exists(run_dir / "frozen.ckpt"));
    REQUIRE(fs::exists(run_dir / "checkpoint.ckpt"));
    REQUIRE(fs::exists(run_dir / "metrics.csv"));

    // the manifest records where the frozen network landed
    flame::RunConfig manifest;
    manifest.load_file((run_dir / "manifest.cfg").string());
    REQUIRE(manifest.get("frozen_checkpoint") == (run_dir / "frozen.ckpt").string());

    SECTION("all-path evaluation emits per-path metrics and the PER matrix") {
        const fs::path eval_dir = workspace() / "evalPaths";
        auto ev = run_cli("eval --data " + toy_cache().string() + " --checkpoint " +
                          (run_dir / "checkpoint.ckpt").string() + " --frozen_checkpoint " +
                          (run_dir / "frozen.ckpt").string() +
                          " --source all_paths --split test --out " + eval_dir.string() +
                          " --max_len 10 --sub_modules 2");
        INFO(ev.output);
        REQUIRE(ev.exit_code == 0);
        const std::string paths_csv = slurp(eval_dir / "eval_paths_test.csv");
        REQUIRE(paths_csv.rfind("path,metric,K,value\n", 0) == 0);
        for (const char* label : {"frz-frz", "frz-lrn", "lrn-frz", "lrn-lrn"})
            REQUIRE(paths_csv.find(label) != std::string::npos);
        const std::string per_csv = slurp(eval_dir / "per_test.csv");
        REQUIRE(per_csv.rfind("path,frz-frz,frz-lrn,lrn-frz,lrn-lrn\n", 0) == 0);
    }
    SECTION("all-path evaluation demands the frozen checkpoint") {
        auto ev = run_cli("eval --data " + toy_cache().string() + " --checkpoint " +
                          (run_dir / "checkpoint.ckpt").string() +
                          " --source all_paths --out " + (workspace() / "evalY").string() +
                          " --max_len 10");
        REQUIRE(ev.exit_code == 1);
        REQUIRE(ev.output.find("frozen_checkpoint") != std::string::npos);
    }
}

TEST_CASE("diagnose sweeps the requested modes into separate run directories") {
    const fs::path out = workspace() / "diag";
    auto r = run_cli("diagnose --data " + toy_cache().string() + " --out " + out.string() +
                     " --modes single,flame --sub_modules 2 --pretrain_first --seed 11" +
                     small_train_flags());
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(out / "single" / "metrics.csv"));
    REQUIRE(fs::exists(out / "single" / "checkpoint.ckpt"));
    REQUIRE(fs::exists(out / "flame" / "metrics.csv"));
    REQUIRE(fs::exists(out / "flame" / "per.csv"));
    REQUIRE(fs::exists(out / "flame" / "path_metrics.csv"));
    REQUIRE(slurp(out / "flame" / "path_metrics.csv").rfind("path,HR@20,NDCG@20\n", 0) == 0);
    // the flame stage pretrains once, inside its own directory
    REQUIRE(fs::exists(out / "flame" / "frozen.ckpt"));

    SECTION("an empty mode list is rejected") {
        auto bad = run_cli("diagnose --data " + toy_cache().string() + " --out " +
                           (out / "none").string() + " --modes , --max_len 10");
        REQUIRE(bad.exit_code == 1);
    }
}

TEST_CASE("cli distinguishes data, config, and runtime failures") {
    SECTION("missing cache file") {
        auto r = run_cli("train --data /nonexistent.bin --out " + (workspace() / "z").string());
        REQUIRE(r.exit_code == 2);
    }
    SECTION("corrupted cache file") {
        std::string bytes = slurp(toy_cache());
        bytes[0] = 'X';
        const fs::path bad = workspace() / "bad.bin";
        std::ofstream(bad, std::ios::binary).write(bytes.data(),
                                                   static_cast<std::streamsize>(bytes.size()));
        // a clobbered magic makes the loader treat the file as text
        auto r = run_cli("train --data " + bad.string() + " --out " +
                         (workspace() / "z2").string() + " --max_len 10");
        REQUIRE(r.exit_code == 2);
    }
    SECTION("cached window length must match the requested one") {
        auto r = run_cli("train --data " + toy_cache().string() + " --out " +
                         (workspace() / "z3").string() + " --mode single --epochs 1 --patience 1");
        REQUIRE(r.exit_code == 1);  // cache was built with max_len 10, config wants 50
        REQUIRE(r.output.find("max_len") != std::string::npos);
    }
    SECTION("unwritable output directory surfaces as a runtime failure") {
        auto r = run_cli("train --data " + toy_cache().string() + " --out " +
                         toy_tsv().string() + " --mode single --max_len 10" +
                         " --epochs 1 --patience 1 --d 8 --layers 1 --batch_size 16");
        REQUIRE(r.exit_code == 3);  // out path exists as a regular file
    }
}
