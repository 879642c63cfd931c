#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rwkvts/bench.hpp"
#include "rwkvts/checkpoint.hpp"
#include "rwkvts/data_io.hpp"
#include "rwkvts/error.hpp"
#include "rwkvts/model.hpp"
#include "rwkvts/run_config.hpp"
#include "rwkvts/training.hpp"
#include "rwkvts/verification.hpp"

namespace rwkvts::cli {

enum ExitCode : int {
    exit_ok = 0,
    exit_usage = 1,
    exit_config = 2,
    exit_io = 3,
    exit_data = 4,
    exit_divergence = 5,
    exit_check_failed = 6,
};

/// Runs fn and maps library exceptions to exit codes, printing the message to err.
inline int guarded(const std::function<int()>& fn, std::ostream& err) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return exit_io;
    } catch (const DivergenceError& e) {
        err << "training diverged: " << e.what() << "\n";
        return exit_divergence;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_data;
    }
}

struct PreparedData {
    Dataset dataset;  // values already standardized
    Standardizer scaler;
};

/// Loads the CSV named by cfg.data, splits it chronologically and z-scores
/// every channel with statistics of the training split (or the given scaler).
inline PreparedData prepare_data(const RunConfig& cfg, const std::optional<Standardizer>& scaler = std::nullopt) {
    if (cfg.data.empty()) throw ConfigError("no data file configured (key 'data')");
    TimeSeries ts = load_csv(cfg.data);
    Dataset ds = chronological_split(std::move(ts), cfg.split_rule(), cfg.resolved_dataset_name());
    Standardizer sc = scaler ? *scaler : Standardizer::fit(ds.series, ds.train);
    if (sc.mean.size() != ds.series.channels()) {
        throw DataError("scaler has " + std::to_string(sc.mean.size()) + " channels, data has " +
                        std::to_string(ds.series.channels()));
    }
    ds.series = sc.apply(std::move(ds.series));
    return {std::move(ds), std::move(sc)};
}

template <std::floating_point T>
WindowSet<T> split_windows(const PreparedData& data, const RunConfig& cfg, Split split) {
    // The training split stays self-contained; evaluation splits may look back
    // into the preceding rows for context.
    const WindowContext ctx = split == Split::train ? WindowContext::within_split : WindowContext::reach_back;
    const std::size_t stride = split == Split::train ? cfg.window_stride : 1;
    return make_windows<T>(data.dataset, split, cfg.model.input_len, cfg.model.horizon, stride, ctx);
}

inline std::string format_metrics(const Metrics& m) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "mse=%.9g mae=%.9g", m.mse, m.mae);
    return buf;
}

template <std::floating_point T>
int train_impl(const RunConfig& cfg, std::ostream& out) {
    const PreparedData data = prepare_data(cfg);
    for (const auto& w : data.dataset.warnings) out << "warning: " << w << "\n";
    const WindowSet<T> tr = split_windows<T>(data, cfg, Split::train);
    const WindowSet<T> va = split_windows<T>(data, cfg, Split::val);
    const WindowSet<T> te = split_windows<T>(data, cfg, Split::test);
    if (tr.samples.empty()) throw DataError("training split yields no windows: " + tr.warning);
    if (!va.warning.empty()) out << "warning: validation " << va.warning << "\n";
    if (!te.warning.empty()) out << "warning: test " << te.warning << "\n";
    out << "windows train=" << tr.samples.size() << " val=" << va.samples.size() << " test=" << te.samples.size()
        << "\n";

    std::ofstream log(cfg.out + ".log", std::ios::trunc);
    if (!log) throw IoError("cannot write '" + cfg.out + ".log'");
    ModelParams<T> params = init_params<T>(cfg.model, cfg.model.seed);
    const TrainResult<T> result =
        train(cfg.model, std::move(params), std::span<const Sample<T>>(tr.samples),
              std::span<const Sample<T>>(va.samples), cfg.train, [&](const EpochRecord& r) {
                  out << format_epoch(r) << "\n";
                  log << format_epoch(r) << "\n";
              });
    out << "best_epoch=" << result.report.best_epoch << " stop=" << result.report.stop_reason << "\n";

    nlohmann::json report;
    report["best_epoch"] = result.report.best_epoch;
    report["best_val_mse"] = result.report.best_val_mse;
    report["stop_reason"] = result.report.stop_reason;
    report["epochs"] = nlohmann::json::array();
    for (const auto& e : result.report.epochs) {
        report["epochs"].push_back({{"epoch", e.epoch}, {"train_mse", e.train_mse}, {"val_mse", e.val_mse}, {"lr", e.lr}});
    }
    if (!te.samples.empty()) {
        ModelConfig eval = cfg.model;
        const Metrics m = evaluate(result.params, eval, std::span<const Sample<T>>(te.samples));
        out << "test " << format_metrics(m) << "\n";
        report["test"] = {{"mse", m.mse}, {"mae", m.mae}, {"count", m.count}};
    }
    save_checkpoint(cfg.out, result.params, cfg, cfg.checkpoint_precision, data.scaler);
    std::ofstream rep(cfg.out + ".report.json", std::ios::trunc);
    if (!rep) throw IoError("cannot write '" + cfg.out + ".report.json'");
    rep << report.dump(2) << "\n";
    out << "checkpoint " << cfg.out << "\n";
    return exit_ok;
}

/// Trains from scratch and writes <out>, <out>.log and <out>.report.json.
inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
    cfg.validate();
    return cfg.model.precision == Precision::f32 ? train_impl<float>(cfg, out) : train_impl<double>(cfg, out);
}

template <std::floating_point T>
Metrics evaluate_impl(const Checkpoint& ck, const RunConfig& cfg) {
    const PreparedData data = prepare_data(cfg, ck.scaler);
    const WindowSet<T> te = split_windows<T>(data, cfg, Split::test);
    if (te.samples.empty()) throw DataError("test split yields no windows: " + te.warning);
    const ModelParams<T> params = cast_params<T>(ck.params);
    return evaluate(params, cfg.model, std::span<const Sample<T>>(te.samples));
}

/// Test-split metrics of a checkpoint; prints `mse=<v> mae=<v>` and writes the
/// same line to record_path when non-empty. data_override replaces the stored
/// data path when non-empty.
inline int cmd_evaluate(const std::string& checkpoint, const std::string& data_override,
                        std::optional<ExecMode> mode, const std::string& record_path, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    RunConfig cfg = ck.config;
    if (!data_override.empty()) cfg.data = data_override;
    if (mode) cfg.model.mode = *mode;
    const Metrics m = cfg.model.precision == Precision::f32 ? evaluate_impl<float>(ck, cfg) : evaluate_impl<double>(ck, cfg);
    out << format_metrics(m) << "\n";
    if (!record_path.empty()) {
        std::ofstream f(record_path, std::ios::trunc);
        if (!f) throw IoError("cannot write '" + record_path + "'");
        f << format_metrics(m) << "\n";
    }
    return exit_ok;
}

template <std::floating_point T>
TimeSeries predict_impl(const Checkpoint& ck, const ModelConfig& config, const TimeSeries& input) {
    const std::size_t L = config.input_len, M = input.channels();
    if (input.length() < L) {
        throw DataError("predict: input has " + std::to_string(input.length()) + " rows, model needs " + std::to_string(L));
    }
    if (ck.scaler && ck.scaler->mean.size() != M) {
        throw DataError("predict: input has " + std::to_string(M) + " channels, checkpoint expects " +
                        std::to_string(ck.scaler->mean.size()));
    }
    std::vector<Matrix<T>> window{Matrix<T>(L, M)};
    const std::size_t start = input.length() - L;
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t c = 0; c < M; ++c) {
            double v = input.values(start + i, c);
            if (ck.scaler) v = (v - ck.scaler->mean[c]) / ck.scaler->std[c];
            window[0](i, c) = static_cast<T>(v);
        }
    }
    const auto pred = forward(std::span<const Matrix<T>>(window), cast_params<T>(ck.params), config);
    TimeSeries ts;
    ts.time_column = "step";
    ts.names = input.names;
    ts.values = Matrix<double>(config.horizon, M);
    for (std::size_t t = 0; t < config.horizon; ++t) {
        ts.timestamps.push_back("+" + std::to_string(t + 1));
        for (std::size_t c = 0; c < M; ++c) {
            double v = static_cast<double>(pred[0](t, c));
            if (ck.scaler) v = v * ck.scaler->std[c] + ck.scaler->mean[c];
            ts.values(t, c) = v;
        }
    }
    return ts;
}

/// Forecasts the horizon following the last input_len rows of input_csv.
/// Writes CSV to output_csv, or to out when output_csv is empty.
inline int cmd_predict(const std::string& checkpoint, const std::string& input_csv, const std::string& output_csv,
                       std::optional<ExecMode> mode, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    ModelConfig config = ck.config.model;
    if (mode) config.mode = *mode;
    const TimeSeries input = load_csv(input_csv);
    const TimeSeries pred = config.precision == Precision::f32 ? predict_impl<float>(ck, config, input)
                                                               : predict_impl<double>(ck, config, input);
    if (output_csv.empty()) {
        write_csv(out, pred);
    } else {
        write_csv(output_csv, pred);
        out << "wrote " << pred.length() << " rows to " << output_csv << "\n";
    }
    return exit_ok;
}

struct BenchOptions {
    std::vector<std::size_t> lengths{128, 256, 512, 1024, 2048, 4096};
    LatencyOptions latency;
    bool with_backward = false;
    std::string json_out;  // empty: no JSON file
};

/// Latency and state-memory scaling over patch counts for the configured architecture.
inline int cmd_bench(const RunConfig& cfg, const BenchOptions& opt, std::ostream& out) {
    cfg.model.validate();
    auto run = [&]<std::floating_point T>() {
        ScalingReport lat = measure_forward_latency<T>(cfg.model, opt.lengths, opt.latency, opt.with_backward);
        MemoryReport mem = measure_state_memory<T>(cfg.model, opt.lengths);
        for (std::size_t i = 0; i < lat.points.size(); ++i) lat.points[i].mem_bytes = mem.parallel.points[i].mem_bytes;
        return std::pair{lat, mem};
    };
    const auto [lat, mem] = cfg.model.precision == Precision::f32 ? run.template operator()<float>()
                                                                   : run.template operator()<double>();
    out << "# latency (parallel " << (opt.with_backward ? "forward+backward" : "forward")
        << "), mem_bytes = transient tape values\n";
    out << format_report(lat);
    out << "# recurrent state bytes\n";
    out << format_report(mem.recurrent);
    out << "environment: " << lat.environment << "\n";
    for (const auto& n : lat.notes) out << "note: " << n << "\n";
    if (!opt.json_out.empty()) {
        nlohmann::json j;
        j["latency"] = to_json(lat);
        j["recurrent_state"] = to_json(mem.recurrent);
        std::ofstream f(opt.json_out, std::ios::trunc);
        if (!f) throw IoError("cannot write '" + opt.json_out + "'");
        f << j.dump(2) << "\n";
    }
    return exit_ok;
}

/// Parallel vs recurrent agreement on random models; exit 6 when any trial
/// deviates beyond tolerance.
inline int cmd_check_equivalence(std::size_t trials, double tolerance, Precision precision, std::uint64_t seed,
                                 std::ostream& out) {
    const EquivalenceReport r = precision == Precision::f32 ? check_equivalence<float>(trials, tolerance, seed)
                                                            : check_equivalence<double>(trials, tolerance, seed);
    out << "trials=" << r.trials.size() << " precision=" << to_string(precision) << " tolerance=" << tolerance
        << " max_deviation=" << r.max_deviation << " worst_seed=" << r.worst_seed << "\n";
    out << (r.passed ? "PASS" : "FAIL") << "\n";
    return r.passed ? exit_ok : exit_check_failed;
}

/// Finite-difference check of every parameter group on a tiny model.
/// corrupt_op scales that primitive's backward rule (self-test of the check).
inline int cmd_check_gradients(std::uint64_t seed, const std::string& corrupt_op, std::ostream& out) {
    std::optional<ad::Tape<double>::Fault> fault;
    if (!corrupt_op.empty()) {
        const auto op = ad::op_from_name(corrupt_op);
        if (!op) throw ConfigError("unknown primitive '" + corrupt_op + "'");
        fault = ad::Tape<double>::Fault{*op, 1.5};
    }
    const GradCheckReport r = model_grad_check(tiny_gradcheck_config(), seed, 1e-5, 1e-4, fault);
    for (const auto& g : r.groups) {
        out << g.name << " size=" << g.size << " max_rel_error=" << g.max_rel_error
            << (g.max_rel_error < r.threshold ? "" : "  <-- FAIL") << "\n";
    }
    out << "max_rel_error=" << r.max_rel_error << " threshold=" << r.threshold << "\n";
    out << (r.passed ? "PASS" : "FAIL") << "\n";
    return r.passed ? exit_ok : exit_check_failed;
}

}  // namespace rwkvts::cli
