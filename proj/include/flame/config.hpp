#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "training.hpp"

namespace flame {

inline constexpr char kVersionString[] = "0.1.0";

// Flat key=value run configuration: file lines plus command-line overrides
// (overrides win). Unknown keys are rejected by name; absent keys fall back
// to the published defaults.
class RunConfig {
public:
    RunConfig() {
        // Defaults: training hyperparameters follow the published setup
        // (d=64, T=50, L=2, 2 heads, dropout 0.5, Adam 1e-3, batch 256,
        // R=200, patience 30, tau=1, lambda geometric 0.1 -> 1e-5).
        set_default("mode", "flame");
        set_default("d", "64");
        set_default("layers", "2");
        set_default("heads", "2");
        set_default("max_len", "50");
        set_default("sub_modules", "2");
        set_default("dropout", "0.5");
        set_default("tau", "1");
        set_default("lambda0", "0.1");
        set_default("lambda_r", "1e-5");
        set_default("weighting", "similarity");
        set_default("per_position", "false");
        set_default("lr", "0.001");
        set_default("batch_size", "256");
        set_default("epochs", "200");
        set_default("patience", "30");
        set_default("eval_batch", "256");
        set_default("seed", "42");
        set_default("min_count", "5");
        set_default("deterministic", "false");
        set_default("data", "");
        set_default("out", "run");
        set_default("input", "");
        set_default("output", "");
        set_default("frozen_checkpoint", "");
        set_default("pretrain_first", "false");
        set_default("checkpoint", "");
        set_default("split", "test");
        set_default("source", "lrn_only");
        set_default("exclude_history", "false");
        set_default("per_k", "20");
        set_default("modes", "single,ensemble_scratch,ensemble_guide,flame");
    }

    void set(const std::string& key, const std::string& value) {
        if (values_.find(key) == values_.end())
            throw ConfigError("unknown configuration key '" + key + "'");
        values_[key] = value;
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const std::string trimmed = trim(line);
            if (trimmed.empty() || trimmed[0] == '#') continue;
            const std::size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
            set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
        }
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
        return it->second;
    }

    long long get_int(const std::string& key) const {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(get(key), &used);
            if (used != get(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' needs an integer, got '" + get(key) + "'");
        }
    }

    std::uint64_t get_u64(const std::string& key) const {
        try {
            std::size_t used = 0;
            // stoull would wrap a negative token around instead of failing
            if (!get(key).empty() && get(key)[0] == '-') throw std::invalid_argument("negative");
            const std::uint64_t v = std::stoull(get(key), &used);
            if (used != get(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' needs an unsigned integer, got '" + get(key) + "'");
        }
    }

    double get_double(const std::string& key) const {
        try {
            std::size_t used = 0;
            const double v = std::stod(get(key), &used);
            if (used != get(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' needs a number, got '" + get(key) + "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("key '" + key + "' needs a boolean, got '" + v + "'");
    }

    TrainConfig to_train_config() const {
        TrainConfig cfg;
        cfg.mode = parse_mode(get("mode"));
        cfg.width = static_cast<int>(get_int("d"));
        cfg.layers = static_cast<int>(get_int("layers"));
        cfg.heads = static_cast<int>(get_int("heads"));
        cfg.max_len = static_cast<int>(get_int("max_len"));
        cfg.sub_modules = static_cast<int>(get_int("sub_modules"));
        cfg.dropout = get_double("dropout");
        cfg.tau = get_double("tau");
        cfg.lambda0 = get_double("lambda0");
        cfg.lambda_r = get_double("lambda_r");
        const std::string& w = get("weighting");
        if (w == "uniform")
            cfg.uniform_weighting = true;
        else if (w == "similarity")
            cfg.uniform_weighting = false;
        else
            throw ConfigError("weighting must be 'similarity' or 'uniform', got '" + w + "'");
        cfg.per_position = get_bool("per_position");
        cfg.lr = get_double("lr");
        cfg.batch_size = static_cast<int>(get_int("batch_size"));
        cfg.epochs = static_cast<int>(get_int("epochs"));
        cfg.patience = static_cast<int>(get_int("patience"));
        cfg.eval_batch = static_cast<int>(get_int("eval_batch"));
        cfg.seed = get_u64("seed");
        cfg.validate();
        return cfg;
    }

    // Effective configuration as reloadable key=value text, prefixed with
    // version comments.
    std::string manifest(const std::string& command) const {
        std::ostringstream out;
        out << "# flame " << kVersionString << "\n";
        out << "# command: " << command << "\n";
        out << "# data format " << kDataVersion << ", checkpoint format " << kCheckpointVersion
            << "\n";
        for (const auto& [key, value] : values_) out << key << " = " << value << "\n";
        return out.str();
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r");
        std::size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }

    void set_default(const std::string& key, const std::string& value) { values_[key] = value; }

    std::map<std::string, std::string> values_;
};

}  // namespace flame
