#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rwkvts/autodiff.hpp"
#include "rwkvts/data_io.hpp"
#include "rwkvts/error.hpp"
#include "rwkvts/matrix.hpp"
#include "rwkvts/model.hpp"

namespace rwkvts {

template <std::floating_point T>
double mse_loss(const Matrix<T>& y, const Matrix<T>& y_hat) {
    require_same_shape(y, y_hat, "mse_loss");
    if (y.empty()) throw ShapeError("mse_loss: empty input");
    double sum = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = static_cast<double>(y[i]) - static_cast<double>(y_hat[i]);
        sum += d * d;
    }
    return sum / static_cast<double>(y.size());
}

template <std::floating_point T>
double mae_metric(const Matrix<T>& y, const Matrix<T>& y_hat) {
    require_same_shape(y, y_hat, "mae_metric");
    if (y.empty()) throw ShapeError("mae_metric: empty input");
    double sum = 0;
    for (std::size_t i = 0; i < y.size(); ++i) sum += std::abs(static_cast<double>(y[i]) - static_cast<double>(y_hat[i]));
    return sum / static_cast<double>(y.size());
}

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)), never negative.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be >= 1");
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return std::max(0.0, base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <std::floating_point T>
struct OptimizerState {
    std::vector<Matrix<T>> first_moment;
    std::vector<Matrix<T>> second_moment;
    std::size_t step = 0;
    AdamWConfig hp;

    static OptimizerState for_params(const ModelParams<T>& params, AdamWConfig hp = {}) {
        OptimizerState s;
        s.hp = hp;
        params.for_each([&](const std::string&, const Matrix<T>& m) {
            s.first_moment.emplace_back(m.rows(), m.cols());
            s.second_moment.emplace_back(m.rows(), m.cols());
        });
        return s;
    }
};

/// One AdamW update with bias correction and decoupled weight decay.
/// grads are in canonical tensor order.
template <std::floating_point T>
void adamw_step(ModelParams<T>& params, const std::vector<Matrix<T>>& grads, OptimizerState<T>& state, double lr) {
    if (!(lr >= 0)) throw ConfigError("adamw_step: learning rate must be non-negative");
    auto tensors = named_tensors(params);
    if (grads.size() != tensors.size() || state.first_moment.size() != tensors.size()) {
        throw ShapeError("adamw_step: gradient/optimizer state count does not match parameters");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        require_same_shape(*tensors[i].second, grads[i], "adamw_step");
        if (!all_finite(grads[i])) throw NumericError("adamw_step: non-finite gradient for " + tensors[i].first);
    }
    ++state.step;
    const auto& hp = state.hp;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        Matrix<T>& p = *tensors[i].second;
        Matrix<T>& m = state.first_moment[i];
        Matrix<T>& v = state.second_moment[i];
        const Matrix<T>& g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g[j];
            const double mj = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            const double vj = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + hp.eps) + hp.weight_decay * p[j];
            p[j] = static_cast<T>(p[j] - lr * update);
        }
    }
}

template <std::floating_point T>
struct LossAndGrads {
    double loss = 0;
    std::vector<Matrix<T>> grads;  // canonical order
};

/// MSE of the model on a batch and its gradient for every tensor.
template <std::floating_point T>
LossAndGrads<T> loss_and_gradients(const ModelParams<T>& params, const ModelConfig& config,
                                   std::span<const Matrix<T>> inputs, std::span<const Matrix<T>> targets,
                                   std::optional<typename ad::Tape<T>::Fault> fault = std::nullopt) {
    ad::Tape<T> tape;
    tape.set_fault(fault);
    const PreparedBatch<T> batch = prepare_batch(inputs, config);
    const ModelWeights<ad::Var> vars = to_tape(tape, params, true);
    const ad::Var pred = forward_on_tape(tape, vars, batch, config);
    const ad::Var loss = ad::mse(tape, pred, tape.constant(stack_targets(targets, config.horizon)));
    tape.backward(loss);
    LossAndGrads<T> out;
    out.loss = tape.value(loss)[0];
    vars.for_each([&](const std::string&, const ad::Var& v) { out.grads.push_back(tape.grad(v)); });
    return out;
}

/// Global L2 norm clip; returns the pre-clip norm.
template <std::floating_point T>
double clip_gradients(std::vector<Matrix<T>>& grads, double max_norm) {
    double sq = 0;
    for (const auto& g : grads)
        for (T x : g.values()) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& g : grads)
            for (auto& x : g.values()) x *= s;
    }
    return norm;
}

struct TrainOptions {
    double lr = 1e-4;
    std::size_t epochs = 10;
    std::size_t patience = 3;
    std::size_t batch_size = 32;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables clipping
    std::uint64_t seed = 2024;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_mse = 0;
    double val_mse = 0;
    double lr = 0;
    double seconds = 0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;  // epoch 0 is the untrained model
    std::size_t best_epoch = 0;
    double best_val_mse = 0;
    std::string stop_reason;
};

/// `epoch=<k> train_mse=<v> val_mse=<v> lr=<v> seconds=<v>`
inline std::string format_epoch(const EpochRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "epoch=%zu train_mse=%.9g val_mse=%.9g lr=%.9g seconds=%.3f", r.epoch, r.train_mse,
                  r.val_mse, r.lr, r.seconds);
    return buf;
}

struct Metrics {
    double mse = 0;
    double mae = 0;
    std::size_t count = 0;
};

/// MSE and MAE of the model over samples, batched, in the configured mode.
template <std::floating_point T>
Metrics evaluate(const ModelParams<T>& params, const ModelConfig& config, std::span<const Sample<T>> samples,
                 std::size_t batch_size = 64) {
    if (samples.empty()) throw DataError("evaluate: no samples");
    double se = 0, ae = 0;
    std::size_t count = 0;
    std::vector<Matrix<T>> inputs;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        inputs.clear();
        for (std::size_t i = start; i < end; ++i) inputs.push_back(samples[i].input);
        const auto preds = forward(std::span<const Matrix<T>>(inputs), params, config);
        for (std::size_t i = start; i < end; ++i) {
            const Matrix<T>& y = samples[i].target;
            const Matrix<T>& p = preds[i - start];
            for (std::size_t j = 0; j < y.size(); ++j) {
                const double d = static_cast<double>(p[j]) - static_cast<double>(y[j]);
                se += d * d;
                ae += std::abs(d);
            }
            count += y.size();
        }
    }
    return Metrics{se / static_cast<double>(count), ae / static_cast<double>(count), count};
}

/// Last-value persistence: every horizon step repeats the final input row.
template <std::floating_point T>
Metrics persistence_baseline(std::span<const Sample<T>> samples) {
    if (samples.empty()) throw DataError("persistence_baseline: no samples");
    double se = 0, ae = 0;
    std::size_t count = 0;
    for (const Sample<T>& s : samples) {
        const auto last = s.input.row(s.input.rows() - 1);
        for (std::size_t t = 0; t < s.target.rows(); ++t) {
            for (std::size_t c = 0; c < s.target.cols(); ++c) {
                const double d = static_cast<double>(last[c]) - static_cast<double>(s.target(t, c));
                se += d * d;
                ae += std::abs(d);
            }
        }
        count += s.target.size();
    }
    return Metrics{se / static_cast<double>(count), ae / static_cast<double>(count), count};
}

template <std::floating_point T>
struct TrainResult {
    ModelParams<T> params;
    TrainReport report;
};

/// Minimizes MSE with AdamW under a per-step cosine schedule. Keeps the
/// parameters of the best validation epoch (epoch 0 included) and stops after
/// `patience` consecutive epochs without improvement. Without validation
/// samples the training loss drives selection.
template <std::floating_point T>
TrainResult<T> train(const ModelConfig& config, ModelParams<T> params, std::span<const Sample<T>> train_set,
                     std::span<const Sample<T>> val_set, const TrainOptions& opt,
                     const std::function<void(const EpochRecord&)>& log = {}) {
    config.validate();
    check_param_shapes(params, config);
    if (opt.batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    TrainResult<T> result{params, {}};
    if (opt.epochs == 0) {
        result.report.stop_reason = "zero_epochs";
        return result;
    }
    if (train_set.empty()) throw DataError("train: empty training set");

    ModelConfig eval_config = config;
    eval_config.mode = ExecMode::parallel;
    auto val_loss = [&](const ModelParams<T>& p, double train_fallback) {
        return val_set.empty() ? train_fallback : evaluate(p, eval_config, val_set).mse;
    };

    const std::size_t batches = (train_set.size() + opt.batch_size - 1) / opt.batch_size;
    const std::size_t total_steps = batches * opt.epochs;
    OptimizerState<T> optim = OptimizerState<T>::for_params(params, AdamWConfig{.weight_decay = opt.weight_decay});
    std::mt19937_64 rng(opt.seed);
    std::vector<std::size_t> order(train_set.size());
    std::vector<Matrix<T>> inputs, targets;

    TrainReport& report = result.report;
    {
        const double train0 = evaluate(params, eval_config, train_set).mse;
        EpochRecord r0{0, train0, val_loss(params, train0), opt.lr, 0.0};
        report.epochs.push_back(r0);
        report.best_epoch = 0;
        report.best_val_mse = r0.val_mse;
        if (log) log(r0);
    }
    std::size_t bad_epochs = 0;
    std::size_t step = 0;
    report.stop_reason = "max_epochs";
    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        double lr = opt.lr;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t begin = b * opt.batch_size, end = std::min(order.size(), begin + opt.batch_size);
            inputs.clear();
            targets.clear();
            for (std::size_t i = begin; i < end; ++i) {
                inputs.push_back(train_set[order[i]].input);
                targets.push_back(train_set[order[i]].target);
            }
            auto lg = loss_and_gradients(params, config, std::span<const Matrix<T>>(inputs),
                                         std::span<const Matrix<T>>(targets));
            if (!std::isfinite(lg.loss)) {
                throw DivergenceError("train: loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(step));
            }
            loss_sum += lg.loss * static_cast<double>(end - begin);
            if (opt.clip_norm > 0) clip_gradients(lg.grads, opt.clip_norm);
            lr = cosine_lr(step, total_steps, opt.lr);
            adamw_step(params, lg.grads, optim, lr);
            ++step;
        }
        const double train_mse = loss_sum / static_cast<double>(train_set.size());
        const double val_mse = val_loss(params, train_mse);
        if (!std::isfinite(val_mse)) throw DivergenceError("train: validation loss became non-finite");
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        EpochRecord rec{epoch, train_mse, val_mse, lr, seconds};
        report.epochs.push_back(rec);
        if (log) log(rec);
        if (val_mse < report.best_val_mse) {
            report.best_val_mse = val_mse;
            report.best_epoch = epoch;
            result.params = params;
            bad_epochs = 0;
        } else if (++bad_epochs >= opt.patience) {
            report.stop_reason = "early_stopping";
            break;
        }
    }
    return result;
}

}  // namespace rwkvts
