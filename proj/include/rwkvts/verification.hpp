#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rwkvts/autodiff.hpp"
#include "rwkvts/model.hpp"
#include "rwkvts/training.hpp"

namespace rwkvts {

struct EquivalenceTrial {
    std::uint64_t seed = 0;
    ModelConfig config;
    std::size_t windows = 0;
    std::size_t channels = 0;
    double max_deviation = 0;
};

/// Random architecture for one equivalence trial: D in {8, 16, 32},
/// H in {1, 2, 4}, patch count in [2, 64].
inline ModelConfig random_trial_config(std::mt19937_64& rng) {
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    ModelConfig c;
    const std::size_t widths[] = {8, 16, 32};
    const std::size_t heads[] = {1, 2, 4};
    c.d_model = widths[pick(0, 2)];
    c.n_heads = heads[pick(0, 2)];
    c.n_layers = pick(1, 2);
    c.ffn_mult = pick(1, 4);
    c.patch_len = pick(1, 8);
    c.stride = pick(1, 8);
    const std::size_t n = pick(2, 64);
    c.input_len = (n - 2) * c.stride + c.patch_len + pick(0, c.stride - 1);
    c.horizon = pick(1, 16);
    c.validate();
    return c;
}

/// Max elementwise deviation between the parallel forward and the streaming
/// recurrent forward for random parameters and inputs drawn from seed.
template <std::floating_point T>
EquivalenceTrial equivalence_trial(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    EquivalenceTrial trial;
    trial.seed = seed;
    trial.config = random_trial_config(rng);
    trial.windows = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
    trial.channels = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
    ModelConfig config = trial.config;
    const ModelParams<T> params = init_params<T>(config, rng(), {.randomize_all = true});
    std::normal_distribution<double> normal;
    std::vector<Matrix<T>> windows(trial.windows, Matrix<T>(config.input_len, trial.channels));
    for (auto& w : windows)
        for (auto& x : w.values()) x = static_cast<T>(normal(rng));

    config.mode = ExecMode::parallel;
    const auto par = forward(std::span<const Matrix<T>>(windows), params, config);
    config.mode = ExecMode::recurrent;
    const auto rec = forward(std::span<const Matrix<T>>(windows), params, config);
    for (std::size_t i = 0; i < par.size(); ++i) {
        trial.max_deviation = std::max(trial.max_deviation, static_cast<double>(max_abs_diff(par[i], rec[i])));
    }
    return trial;
}

struct EquivalenceReport {
    std::vector<EquivalenceTrial> trials;
    double tolerance = 0;
    double max_deviation = 0;
    std::uint64_t worst_seed = 0;
    bool passed = false;
};

template <std::floating_point T>
EquivalenceReport check_equivalence(std::size_t trials, double tolerance, std::uint64_t seed) {
    if (trials == 0) throw ConfigError("check_equivalence: trials must be >= 1");
    EquivalenceReport report;
    report.tolerance = tolerance;
    std::mt19937_64 seeds(seed);
    for (std::size_t i = 0; i < trials; ++i) {
        EquivalenceTrial t = equivalence_trial<T>(seeds());
        if (i == 0 || t.max_deviation > report.max_deviation) {
            report.max_deviation = t.max_deviation;
            report.worst_seed = t.seed;
        }
        report.trials.push_back(std::move(t));
    }
    report.passed = report.max_deviation <= tolerance;
    return report;
}

/// Configuration used for full-model gradient checks:
/// 1 channel, L=32, T=8, P=8, S=8, D=8, H=2, 1 layer.
inline ModelConfig tiny_gradcheck_config() {
    ModelConfig c;
    c.input_len = 32;
    c.horizon = 8;
    c.patch_len = 8;
    c.stride = 8;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 1;
    c.precision = Precision::f64;
    return c;
}

struct GroupError {
    std::string name;
    std::size_t size = 0;
    double max_rel_error = 0;
};

struct GradCheckReport {
    std::vector<GroupError> groups;  // one per parameter tensor, canonical order
    double max_rel_error = 0;
    double threshold = 1e-4;
    bool passed = false;
};

/// Compares reverse-mode gradients of the full training loss with central
/// differences for every scalar parameter (64-bit). The fault hook corrupts
/// one primitive's backward rule to confirm the check notices.
inline GradCheckReport model_grad_check(const ModelConfig& config, std::uint64_t seed, double h = 1e-5,
                                        double threshold = 1e-4,
                                        std::optional<ad::Tape<double>::Fault> fault = std::nullopt,
                                        std::size_t windows = 2, std::size_t channels = 1) {
    ModelParams<double> params = init_params<double>(config, seed, {.randomize_all = true});
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal;
    std::vector<Matrix<double>> inputs(windows, Matrix<double>(config.input_len, channels));
    std::vector<Matrix<double>> targets(windows, Matrix<double>(config.horizon, channels));
    for (auto& m : inputs)
        for (auto& x : m.values()) x = normal(rng);
    for (auto& m : targets)
        for (auto& x : m.values()) x = normal(rng);
    const std::span<const Matrix<double>> in(inputs), tg(targets);

    const LossAndGrads<double> analytic = loss_and_gradients(params, config, in, tg, fault);
    auto loss_at = [&] { return loss_and_gradients(params, config, in, tg).loss; };

    GradCheckReport report;
    report.threshold = threshold;
    auto tensors = named_tensors(params);
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        Matrix<double>& m = *tensors[t].second;
        GroupError ge{tensors[t].first, m.size(), 0};
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double saved = m[i];
            m[i] = saved + h;
            const double fp = loss_at();
            m[i] = saved - h;
            const double fm = loss_at();
            m[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericError("model_grad_check: non-finite loss while perturbing " + ge.name);
            }
            const double fd = (fp - fm) / (2 * h);
            ge.max_rel_error =
                std::max(ge.max_rel_error, std::abs(analytic.grads[t][i] - fd) / std::max(1.0, std::abs(fd)));
        }
        report.max_rel_error = std::max(report.max_rel_error, ge.max_rel_error);
        report.groups.push_back(std::move(ge));
    }
    report.passed = report.max_rel_error < threshold;
    return report;
}

}  // namespace rwkvts
