#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rwkvts/autodiff.hpp"
#include "rwkvts/error.hpp"
#include "rwkvts/model.hpp"

namespace rwkvts {

struct ScalingPoint {
    std::size_t n = 0;
    double latency_us = 0;
    std::size_t mem_bytes = 0;
};

struct ScalingReport {
    std::vector<ScalingPoint> points;  // strictly increasing n
    std::optional<double> slope;
    std::optional<double> residual;
    std::string environment;
    std::vector<std::string> notes;
};

struct ScalingFit {
    double slope = 0;
    double residual = 0;  // sum of squared residuals in log-log space
};

/// Least-squares line through (log n, log y).
inline ScalingFit fit_scaling_exponent(std::span<const double> lengths, std::span<const double> measurements) {
    if (lengths.size() != measurements.size()) throw ShapeError("fit_scaling_exponent: length mismatch");
    if (lengths.size() < 3) throw DataError("fit_scaling_exponent: need at least 3 points");
    const std::size_t n = lengths.size();
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(lengths[i] > 0) || !(measurements[i] > 0)) {
            throw DataError("fit_scaling_exponent: non-positive value at point " + std::to_string(i));
        }
        x[i] = std::log(lengths[i]);
        y[i] = std::log(measurements[i]);
    }
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0) throw DataError("fit_scaling_exponent: all lengths are equal");
    const double slope = sxy / sxx;
    const double intercept = my - slope * mx;
    double rss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = y[i] - (intercept + slope * x[i]);
        rss += e * e;
    }
    return {slope, rss};
}

inline std::string environment_descriptor() {
    std::ostringstream os;
#if defined(__clang__)
    os << "clang " << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
    os << "gcc " << __GNUC__ << "." << __GNUC_MINOR__;
#else
    os << "unknown-compiler";
#endif
    os << "; hw_threads=" << std::thread::hardware_concurrency() << "; timed_threads=1";
    return os.str();
}

namespace detail {

inline void fit_report(ScalingReport& report, bool use_latency) {
    if (report.points.size() < 3) {
        report.notes.push_back("fewer than 3 lengths; scaling fit skipped");
        return;
    }
    std::vector<double> xs, ys;
    for (const auto& p : report.points) {
        xs.push_back(static_cast<double>(p.n));
        ys.push_back(use_latency ? p.latency_us : static_cast<double>(p.mem_bytes));
    }
    const ScalingFit fit = fit_scaling_exponent(xs, ys);
    report.slope = fit.slope;
    report.residual = fit.residual;
}

inline void check_lengths(std::span<const std::size_t> lengths) {
    if (lengths.empty()) throw ConfigError("bench: no lengths requested");
    for (std::size_t i = 1; i < lengths.size(); ++i) {
        if (lengths[i] <= lengths[i - 1]) throw ConfigError("bench: lengths must be strictly increasing");
    }
}

}  // namespace detail

struct LatencyOptions {
    std::size_t repeats = 7;
    std::size_t warmup = 2;
    /// Timed regions shorter than this are batched internally.
    double min_region_us = 2000;
};

/// Median latency of workload(n) per requested length, plus the log-log slope.
/// Clock is injectable so the fit can be checked against synthetic timings.
template <class Clock = std::chrono::steady_clock, class Workload>
ScalingReport measure_latency(std::span<const std::size_t> lengths, Workload&& workload, LatencyOptions opt = {}) {
    detail::check_lengths(lengths);
    if (opt.repeats < 5) throw ConfigError("measure_latency: at least 5 repeats required");
    ScalingReport report;
    report.environment = environment_descriptor();
    auto time_us = [&](std::size_t n, std::size_t inner) {
        const auto t0 = Clock::now();
        for (std::size_t i = 0; i < inner; ++i) workload(n);
        const auto t1 = Clock::now();
        return std::chrono::duration<double, std::micro>(t1 - t0).count();
    };
    for (std::size_t n : lengths) {
        for (std::size_t w = 0; w < opt.warmup; ++w) workload(n);
        std::size_t inner = 1;
        const double probe = time_us(n, 1);
        if (probe < opt.min_region_us) {
            inner = static_cast<std::size_t>(std::ceil(opt.min_region_us / std::max(probe, 1e-3)));
            inner = std::min<std::size_t>(inner, 1000000);
            report.notes.push_back("N=" + std::to_string(n) + ": timer resolution too coarse, batched x" +
                                   std::to_string(inner));
        }
        std::vector<double> samples;
        for (std::size_t r = 0; r < opt.repeats; ++r) samples.push_back(time_us(n, inner) / static_cast<double>(inner));
        std::nth_element(samples.begin(), samples.begin() + samples.size() / 2, samples.end());
        report.points.push_back(ScalingPoint{n, samples[samples.size() / 2], 0});
    }
    detail::fit_report(report, true);
    return report;
}

/// Config whose patch count is exactly n (input length (n - 2) * S + P).
inline ModelConfig config_for_patches(ModelConfig base, std::size_t n) {
    if (n < 2) throw ConfigError("bench: patch count must be >= 2");
    base.input_len = (n - 2) * base.stride + base.patch_len;
    base.validate();
    return base;
}

/// Latency of the parallel forward (optionally with backward) over one
/// single-channel window per patch count.
template <std::floating_point T>
ScalingReport measure_forward_latency(const ModelConfig& base, std::span<const std::size_t> lengths,
                                      LatencyOptions opt = {}, bool with_backward = false) {
    struct Case {
        ModelConfig config;
        ModelParams<T> params;
        std::vector<Matrix<T>> window;
        std::vector<Matrix<T>> target;
    };
    std::vector<Case> cases;
    std::mt19937_64 rng(base.seed);
    std::normal_distribution<double> normal;
    for (std::size_t n : lengths) {
        Case c{config_for_patches(base, n), {}, {}, {}};
        c.config.mode = ExecMode::parallel;
        c.params = init_params<T>(c.config, base.seed, {.zero_head = false});
        c.window.emplace_back(c.config.input_len, 1);
        c.target.emplace_back(c.config.horizon, 1);
        for (auto& x : c.window[0].values()) x = static_cast<T>(normal(rng));
        for (auto& x : c.target[0].values()) x = static_cast<T>(normal(rng));
        cases.push_back(std::move(c));
    }
    std::size_t idx = 0;
    auto workload = [&](std::size_t n) {
        while (cases[idx].config.num_patches() != n) idx = (idx + 1) % cases.size();
        Case& c = cases[idx];
        ad::Tape<T> tape;
        const PreparedBatch<T> batch = prepare_batch(std::span<const Matrix<T>>(c.window), c.config);
        const auto vars = to_tape(tape, c.params, with_backward);
        ad::Var out = forward_on_tape(tape, vars, batch, c.config);
        if (with_backward) {
            out = ad::mse(tape, out, tape.constant(stack_targets(std::span<const Matrix<T>>(c.target), c.config.horizon)));
            tape.backward(out);
        }
    };
    ScalingReport report = measure_latency(lengths, workload, opt);
    report.notes.push_back(with_backward ? "workload: forward+backward" : "workload: forward");
    return report;
}

struct MemoryReport {
    ScalingReport parallel;   // transient forward buffers, expected linear in N
    ScalingReport recurrent;  // streaming state, expected constant in N
};

/// Allocation accounting: bytes of intermediate tape values in one parallel
/// forward, and InferenceState bytes after streaming all N patches.
template <std::floating_point T>
MemoryReport measure_state_memory(const ModelConfig& base, std::span<const std::size_t> lengths) {
    detail::check_lengths(lengths);
    MemoryReport out;
    out.parallel.environment = out.recurrent.environment = environment_descriptor();
    for (std::size_t n : lengths) {
        const ModelConfig config = config_for_patches(base, n);
        const ModelParams<T> params = init_params<T>(config, base.seed);
        std::vector<Matrix<T>> window{Matrix<T>(config.input_len, 1)};
        for (std::size_t i = 0; i < config.input_len; ++i) window[0][i] = static_cast<T>(std::sin(0.1 * static_cast<double>(i)));

        ad::Tape<T> tape;
        const PreparedBatch<T> batch = prepare_batch(std::span<const Matrix<T>>(window), config);
        forward_on_tape(tape, to_tape(tape, params, false), batch, config);
        out.parallel.points.push_back(ScalingPoint{n, 0, tape.value_bytes(true)});

        InferenceState<T> st = begin_stream<T>(config, batch.stats.front());
        const PatchSequence<T> seq = make_patches(std::span<const T>(window[0].values()), config.patch_len, config.stride);
        for (std::size_t p = 0; p < seq.patches.rows(); ++p) forward_streaming(st, seq.patches.row(p), params, config);
        out.recurrent.points.push_back(ScalingPoint{n, 0, st.byte_size()});
    }
    detail::fit_report(out.parallel, false);
    detail::fit_report(out.recurrent, false);
    return out;
}

/// `N=<n> latency_us=<v> mem_bytes=<v>` per point, then `slope=<v> residual=<v>`.
inline std::string format_report(const ScalingReport& r) {
    std::ostringstream os;
    for (const auto& p : r.points) os << "N=" << p.n << " latency_us=" << p.latency_us << " mem_bytes=" << p.mem_bytes << "\n";
    if (r.slope) {
        os << "slope=" << *r.slope << " residual=" << *r.residual << "\n";
    } else {
        os << "slope=n/a residual=n/a\n";
    }
    return os.str();
}

inline nlohmann::json to_json(const ScalingReport& r) {
    nlohmann::json j;
    j["points"] = nlohmann::json::array();
    for (const auto& p : r.points) j["points"].push_back({{"n", p.n}, {"latency_us", p.latency_us}, {"mem_bytes", p.mem_bytes}});
    j["slope"] = r.slope ? nlohmann::json(*r.slope) : nlohmann::json(nullptr);
    j["residual"] = r.residual ? nlohmann::json(*r.residual) : nlohmann::json(nullptr);
    j["environment"] = r.environment;
    j["notes"] = r.notes;
    return j;
}

inline ScalingReport scaling_report_from_json(const nlohmann::json& j) {
    ScalingReport r;
    try {
        for (const auto& p : j.at("points")) {
            r.points.push_back(ScalingPoint{p.at("n").get<std::size_t>(), p.at("latency_us").get<double>(),
                                            p.at("mem_bytes").get<std::size_t>()});
        }
        if (!j.at("slope").is_null()) r.slope = j.at("slope").get<double>();
        if (!j.at("residual").is_null()) r.residual = j.at("residual").get<double>();
        r.environment = j.at("environment").get<std::string>();
        r.notes = j.at("notes").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("scaling report: ") + e.what());
    }
    return r;
}

}  // namespace rwkvts
