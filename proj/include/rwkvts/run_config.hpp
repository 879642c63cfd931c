#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rwkvts/data_io.hpp"
#include "rwkvts/error.hpp"
#include "rwkvts/model.hpp"
#include "rwkvts/training.hpp"

namespace rwkvts {

/// Everything a command needs: architecture, data, training and output paths.
///
/// Text form is one `key = value` per line; `#` starts a comment. Keys:
///
///   input_len horizon patch_len stride d_model n_heads n_layers ffn_mult
///   eps mode(parallel|recurrent) precision(f32|f64) seed
///   data dataset_name split(auto | months:<rows> | fractions:<a>,<b>,<c>)
///   window_stride lr epochs patience batch_size weight_decay clip_norm
///   out checkpoint_precision(f32|f64)
///
/// Unknown or repeated keys are errors.
struct RunConfig {
    ModelConfig model;
    std::string data;
    std::string dataset_name;  // defaults to the data file stem
    std::string split = "auto";
    std::size_t window_stride = 1;
    TrainOptions train;
    std::string out = "model.ckpt";
    Precision checkpoint_precision = Precision::f32;

    void validate() const {
        model.validate();
        if (window_stride == 0) throw ConfigError("window_stride must be >= 1");
        if (train.batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (!(train.lr >= 0)) throw ConfigError("lr must be non-negative");
        if (train.weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
        if (train.clip_norm < 0) throw ConfigError("clip_norm must be non-negative");
        split_rule();
    }

    std::string resolved_dataset_name() const {
        if (!dataset_name.empty()) return dataset_name;
        std::string stem = data;
        if (const auto slash = stem.find_last_of("/\\"); slash != std::string::npos) stem = stem.substr(slash + 1);
        if (const auto dot = stem.find_last_of('.'); dot != std::string::npos) stem = stem.substr(0, dot);
        return stem;
    }

    SplitRule split_rule() const {
        if (split == "auto") return default_split_rule(resolved_dataset_name());
        if (split.rfind("months:", 0) == 0) {
            std::size_t rows = 0;
            const std::string_view v = std::string_view(split).substr(7);
            const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), rows);
            if (ec != std::errc() || p != v.data() + v.size() || rows == 0) {
                throw ConfigError("split: bad month size in '" + split + "'");
            }
            return SplitRule::months(rows);
        }
        if (split.rfind("fractions:", 0) == 0) {
            const auto parts = detail::split_commas(std::string_view(split).substr(10));
            double f[3] = {0, 0, 0};
            if (parts.size() != 3) throw ConfigError("split: expected three fractions in '" + split + "'");
            for (int i = 0; i < 3; ++i) {
                if (!detail::parse_double(parts[i], f[i])) throw ConfigError("split: bad fraction in '" + split + "'");
            }
            return SplitRule::fractions(f[0], f[1], f[2]);
        }
        throw ConfigError("split: expected auto, months:<rows> or fractions:<a>,<b>,<c>, got '" + split + "'");
    }
};

namespace detail {

inline std::size_t parse_count(std::string_view key, std::string_view v) {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("key '" + std::string(key) + "': expected a non-negative integer, got '" + std::string(v) + "'");
    }
    return out;
}

inline double parse_real(std::string_view key, std::string_view v) {
    double out = 0;
    if (!parse_double(v, out)) {
        throw ConfigError("key '" + std::string(key) + "': expected a real number, got '" + std::string(v) + "'");
    }
    return out;
}

inline std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("key '" + std::string(key) + "': expected an unsigned integer, got '" + std::string(v) + "'");
    }
    return out;
}

}  // namespace detail

inline Precision parse_precision(std::string_view v) {
    if (v == "f32") return Precision::f32;
    if (v == "f64") return Precision::f64;
    throw ConfigError("precision: expected f32 or f64, got '" + std::string(v) + "'");
}

inline ExecMode parse_mode(std::string_view v) {
    if (v == "parallel") return ExecMode::parallel;
    if (v == "recurrent") return ExecMode::recurrent;
    throw ConfigError("mode: expected parallel or recurrent, got '" + std::string(v) + "'");
}

namespace detail {

struct KeySpec {
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<std::pair<std::string, KeySpec>>& config_schema() {
    using C = RunConfig;
    auto count = [](const char* key, std::size_t ModelConfig::*field) {
        return KeySpec{[key, field](C& c, std::string_view v) { c.model.*field = parse_count(key, v); },
                       [field](const C& c) { return std::to_string(c.model.*field); }};
    };
    static const std::vector<std::pair<std::string, KeySpec>> schema = {
        {"input_len", count("input_len", &ModelConfig::input_len)},
        {"horizon", count("horizon", &ModelConfig::horizon)},
        {"patch_len", count("patch_len", &ModelConfig::patch_len)},
        {"stride", count("stride", &ModelConfig::stride)},
        {"d_model", count("d_model", &ModelConfig::d_model)},
        {"n_heads", count("n_heads", &ModelConfig::n_heads)},
        {"n_layers", count("n_layers", &ModelConfig::n_layers)},
        {"ffn_mult", count("ffn_mult", &ModelConfig::ffn_mult)},
        {"eps", {[](C& c, std::string_view v) { c.model.eps = parse_real("eps", v); },
                 [](const C& c) { return format_double(c.model.eps); }}},
        {"mode", {[](C& c, std::string_view v) { c.model.mode = parse_mode(v); },
                  [](const C& c) { return std::string(to_string(c.model.mode)); }}},
        {"precision", {[](C& c, std::string_view v) { c.model.precision = parse_precision(v); },
                       [](const C& c) { return std::string(to_string(c.model.precision)); }}},
        {"seed", {[](C& c, std::string_view v) { c.model.seed = c.train.seed = parse_u64("seed", v); },
                  [](const C& c) { return std::to_string(c.model.seed); }}},
        {"data", {[](C& c, std::string_view v) { c.data = v; }, [](const C& c) { return c.data; }}},
        {"dataset_name", {[](C& c, std::string_view v) { c.dataset_name = v; }, [](const C& c) { return c.dataset_name; }}},
        {"split", {[](C& c, std::string_view v) { c.split = v; }, [](const C& c) { return c.split; }}},
        {"window_stride", {[](C& c, std::string_view v) { c.window_stride = parse_count("window_stride", v); },
                           [](const C& c) { return std::to_string(c.window_stride); }}},
        {"lr", {[](C& c, std::string_view v) { c.train.lr = parse_real("lr", v); },
                [](const C& c) { return format_double(c.train.lr); }}},
        {"epochs", {[](C& c, std::string_view v) { c.train.epochs = parse_count("epochs", v); },
                    [](const C& c) { return std::to_string(c.train.epochs); }}},
        {"patience", {[](C& c, std::string_view v) { c.train.patience = parse_count("patience", v); },
                      [](const C& c) { return std::to_string(c.train.patience); }}},
        {"batch_size", {[](C& c, std::string_view v) { c.train.batch_size = parse_count("batch_size", v); },
                        [](const C& c) { return std::to_string(c.train.batch_size); }}},
        {"weight_decay", {[](C& c, std::string_view v) { c.train.weight_decay = parse_real("weight_decay", v); },
                          [](const C& c) { return format_double(c.train.weight_decay); }}},
        {"clip_norm", {[](C& c, std::string_view v) { c.train.clip_norm = parse_real("clip_norm", v); },
                       [](const C& c) { return format_double(c.train.clip_norm); }}},
        {"out", {[](C& c, std::string_view v) { c.out = v; }, [](const C& c) { return c.out; }}},
        {"checkpoint_precision", {[](C& c, std::string_view v) { c.checkpoint_precision = parse_precision(v); },
                                  [](const C& c) { return std::string(to_string(c.checkpoint_precision)); }}},
    };
    return schema;
}

}  // namespace detail

/// Sets one key; throws ConfigError for unknown keys or malformed values.
inline void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
    for (const auto& [name, spec] : detail::config_schema()) {
        if (name == key) {
            spec.set(cfg, detail::trim(value));
            return;
        }
    }
    throw ConfigError("unknown configuration key '" + std::string(key) + "'");
}

/// Parses the flat key-value format (unvalidated; call validate()).
inline RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>") {
    RunConfig cfg;
    std::map<std::string, std::size_t> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view body = line;
        if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
        body = detail::trim(body);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key(detail::trim(body.substr(0, eq)));
        if (const auto it = seen.find(key); it != seen.end()) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": key '" + key + "' repeats line " +
                              std::to_string(it->second));
        }
        seen[key] = line_no;
        try {
            set_config_value(cfg, key, body.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    return parse_run_config(in, path);
}

/// Every key in schema order as (key, value) pairs.
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [name, spec] : detail::config_schema()) out.emplace_back(name, spec.get(cfg));
    return out;
}

inline std::string format_run_config(const RunConfig& cfg) {
    std::ostringstream os;
    for (const auto& [k, v] : config_entries(cfg)) os << k << " = " << v << "\n";
    return os.str();
}

}  // namespace rwkvts
