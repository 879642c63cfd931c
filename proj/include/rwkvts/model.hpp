#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rwkvts/autodiff.hpp"
#include "rwkvts/error.hpp"
#include "rwkvts/matrix.hpp"
#include "rwkvts/preprocessing.hpp"
#include "rwkvts/rwkv_block.hpp"

namespace rwkvts {

enum class Precision { f32, f64 };

inline const char* to_string(Precision p) noexcept { return p == Precision::f32 ? "f32" : "f64"; }

/// Architectural hyperparameters. Defaults: 2 layers, 2 heads, width 128.
struct ModelConfig {
    std::size_t input_len = 96;  // L
    std::size_t horizon = 96;    // T
    std::size_t patch_len = 16;  // P
    std::size_t stride = 8;      // S
    std::size_t d_model = 128;   // D
    std::size_t n_heads = 2;     // H
    std::size_t n_layers = 2;
    std::size_t ffn_mult = 4;
    double eps = kNormEps;
    ExecMode mode = ExecMode::parallel;
    Precision precision = Precision::f32;
    std::uint64_t seed = 2024;

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string(name) + " must be >= 1");
        };
        positive(input_len, "input_len");
        positive(horizon, "horizon");
        positive(patch_len, "patch_len");
        positive(stride, "stride");
        positive(d_model, "d_model");
        positive(n_heads, "n_heads");
        positive(n_layers, "n_layers");
        positive(ffn_mult, "ffn_mult");
        if (!(eps > 0)) throw ConfigError("eps must be positive");
        head_dim(d_model, n_heads);
        validate_patching(input_len, patch_len, stride);
    }

    std::size_t num_patches() const { return count_patches(input_len, patch_len, stride); }
    std::size_t ffn_width() const { return ffn_mult * d_model; }
    std::size_t head_width() const { return d_model / n_heads; }
};

template <class Tensor>
struct LayerWeights {
    Tensor ln1_gamma, ln1_beta;
    TimeMixWeights<Tensor> time_mix;
    Tensor ln2_gamma, ln2_beta;
    ChannelMixWeights<Tensor> channel_mix;
};

/// Full parameter set: patch embedding, input norm, residual blocks, flatten head.
template <class Tensor>
struct ModelWeights {
    Tensor w_embed;                 // P x D
    Tensor ln_in_gamma, ln_in_beta;  // 1 x D
    std::vector<LayerWeights<Tensor>> layers;
    Tensor w_head;  // (N*D) x T
    Tensor b_head;  // 1 x T

    /// Calls f(name, tensor) for every tensor in a fixed canonical order.
    template <class Self, class F>
    static void visit(Self& s, F&& f) {
        f(std::string("embed.w"), s.w_embed);
        f(std::string("ln_in.gamma"), s.ln_in_gamma);
        f(std::string("ln_in.beta"), s.ln_in_beta);
        for (std::size_t i = 0; i < s.layers.size(); ++i) {
            auto& layer = s.layers[i];
            const std::string base = "layers." + std::to_string(i) + ".";
            f(base + "ln1.gamma", layer.ln1_gamma);
            f(base + "ln1.beta", layer.ln1_beta);
            TimeMixWeights<Tensor>::visit(layer.time_mix,
                                          [&](const char* n, auto& t) { f(base + "time_mix." + n, t); });
            f(base + "ln2.gamma", layer.ln2_gamma);
            f(base + "ln2.beta", layer.ln2_beta);
            ChannelMixWeights<Tensor>::visit(layer.channel_mix,
                                             [&](const char* n, auto& t) { f(base + "channel_mix." + n, t); });
        }
        f(std::string("head.w"), s.w_head);
        f(std::string("head.b"), s.b_head);
    }

    template <class F>
    void for_each(F&& f) { visit(*this, f); }
    template <class F>
    void for_each(F&& f) const { visit(*this, f); }
};

template <std::floating_point T>
using ModelParams = ModelWeights<Matrix<T>>;

/// Collects pointers to every tensor in canonical order.
template <std::floating_point T>
std::vector<std::pair<std::string, Matrix<T>*>> named_tensors(ModelParams<T>& params) {
    std::vector<std::pair<std::string, Matrix<T>*>> out;
    params.for_each([&](const std::string& n, Matrix<T>& m) { out.emplace_back(n, &m); });
    return out;
}

template <std::floating_point T>
std::vector<std::pair<std::string, const Matrix<T>*>> named_tensors(const ModelParams<T>& params) {
    std::vector<std::pair<std::string, const Matrix<T>*>> out;
    params.for_each([&](const std::string& n, const Matrix<T>& m) { out.emplace_back(n, &m); });
    return out;
}

template <std::floating_point T>
std::size_t count_parameters(const ModelParams<T>& params) {
    std::size_t total = 0;
    params.for_each([&](const std::string&, const Matrix<T>& m) { total += m.size(); });
    return total;
}

/// Same parameters at another precision.
template <std::floating_point U, std::floating_point T>
ModelParams<U> cast_params(const ModelParams<T>& params) {
    ModelParams<U> out;
    out.layers.resize(params.layers.size());
    const auto src = named_tensors(params);
    const auto dst = named_tensors(out);
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
}

/// Allocates zero tensors with the shapes implied by config.
template <std::floating_point T>
ModelParams<T> zero_params(const ModelConfig& config) {
    config.validate();
    const std::size_t P = config.patch_len, D = config.d_model, F = config.ffn_width();
    const std::size_t N = config.num_patches(), H = config.horizon;
    auto vec = [&] { return Matrix<T>(1, D); };
    auto sq = [&] { return Matrix<T>(D, D); };
    ModelParams<T> p;
    p.w_embed = Matrix<T>(P, D);
    p.ln_in_gamma = vec();
    p.ln_in_beta = vec();
    p.layers.resize(config.n_layers);
    for (auto& l : p.layers) {
        l.ln1_gamma = vec();
        l.ln1_beta = vec();
        l.ln2_gamma = vec();
        l.ln2_beta = vec();
        auto& tm = l.time_mix;
        tm.mu_g = vec(), tm.mu_r = vec(), tm.mu_k = vec(), tm.mu_v = vec();
        tm.w_g = sq(), tm.w_r = sq(), tm.w_k = sq(), tm.w_v = sq(), tm.w_o = sq();
        tm.decay_raw = vec(), tm.bonus = vec(), tm.ln_gamma = vec(), tm.ln_beta = vec();
        auto& cm = l.channel_mix;
        cm.mu_k = vec(), cm.mu_r = vec();
        cm.w_k = Matrix<T>(D, F);
        cm.w_v = Matrix<T>(F, D);
        cm.w_r = sq();
    }
    p.w_head = Matrix<T>(N * D, H);
    p.b_head = Matrix<T>(1, H);
    return p;
}

/// Checks every tensor against the shapes implied by config.
template <std::floating_point T>
void check_param_shapes(const ModelParams<T>& params, const ModelConfig& config) {
    const ModelParams<T> ref = zero_params<T>(config);
    if (ref.layers.size() != params.layers.size()) {
        throw ShapeError("parameters have " + std::to_string(params.layers.size()) + " layers, config expects " +
                         std::to_string(ref.layers.size()));
    }
    const auto want = named_tensors(ref);
    const auto have = named_tensors(params);
    for (std::size_t i = 0; i < want.size(); ++i) {
        if (!same_shape(*want[i].second, *have[i].second)) {
            throw ShapeError("tensor " + want[i].first + " has shape " + have[i].second->shape() + ", config expects " +
                             want[i].second->shape());
        }
    }
}

struct InitOptions {
    bool zero_head = true;
    /// Draws every tensor at random (mixes, norms, decays and head included);
    /// used by equivalence and gradient checks to avoid symmetric points.
    bool randomize_all = false;
};

/// Effective decay of channel c within a head of width d: log-spaced over [0.1, 0.96].
inline double initial_decay(std::size_t c, std::size_t d) {
    const double lo = std::log(0.1), hi = std::log(0.96);
    const double frac = d > 1 ? static_cast<double>(c) / static_cast<double>(d - 1) : 0.5;
    return std::exp(lo + (hi - lo) * frac);
}

/// Deterministic initialization from seed. Projections ~ N(0, 1/fan_in),
/// token-shift mixes 0.5, decays log-spaced within each head, bonus small and
/// positive, norms identity, head zero unless options say otherwise.
template <std::floating_point T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed, InitOptions options = {}) {
    ModelParams<T> p = zero_params<T>(config);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto projection = [&](Matrix<T>& m) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(m.rows()));
        for (auto& x : m.values()) x = static_cast<T>(normal(rng) * scale);
    };
    auto constant = [](Matrix<T>& m, double v) { m.fill(static_cast<T>(v)); };
    auto mix = [&](Matrix<T>& m) {
        if (options.randomize_all)
            for (auto& x : m.values()) x = static_cast<T>(unit(rng));
        else
            constant(m, 0.5);
    };
    auto norm = [&](Matrix<T>& gamma, Matrix<T>& beta) {
        constant(gamma, 1.0);
        constant(beta, 0.0);
        if (options.randomize_all) {
            for (auto& x : gamma.values()) x += static_cast<T>(0.2 * normal(rng));
            for (auto& x : beta.values()) x = static_cast<T>(0.2 * normal(rng));
        }
    };
    const std::size_t D = config.d_model, d = config.head_width();

    projection(p.w_embed);
    norm(p.ln_in_gamma, p.ln_in_beta);
    for (auto& l : p.layers) {
        norm(l.ln1_gamma, l.ln1_beta);
        auto& tm = l.time_mix;
        for (Matrix<T>* m : {&tm.mu_g, &tm.mu_r, &tm.mu_k, &tm.mu_v}) mix(*m);
        for (Matrix<T>* m : {&tm.w_g, &tm.w_r, &tm.w_k, &tm.w_v, &tm.w_o}) projection(*m);
        for (std::size_t j = 0; j < D; ++j) {
            const std::size_t c = j % d;
            double decay = initial_decay(c, d);
            if (options.randomize_all) decay = 0.05 + 0.9 * unit(rng);
            tm.decay_raw[j] = static_cast<T>(std::log(-std::log(decay)));
            const double frac = d > 1 ? static_cast<double>(c) / static_cast<double>(d - 1) : 0.5;
            tm.bonus[j] = static_cast<T>(options.randomize_all ? 0.5 * normal(rng) : 0.05 + 0.25 * frac);
        }
        norm(tm.ln_gamma, tm.ln_beta);
        norm(l.ln2_gamma, l.ln2_beta);
        auto& cm = l.channel_mix;
        mix(cm.mu_k);
        mix(cm.mu_r);
        projection(cm.w_k);
        projection(cm.w_v);
        projection(cm.w_r);
    }
    if (!options.zero_head || options.randomize_all) {
        projection(p.w_head);
        if (options.randomize_all)
            for (auto& x : p.b_head.values()) x = static_cast<T>(0.1 * normal(rng));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Whole-window forward (parallel mode, on a tape)
// ---------------------------------------------------------------------------

/// Windows flattened into stacked patch sequences, one per (window, channel),
/// ordered window-major. Carries the instance statistics for de-normalization.
template <std::floating_point T>
struct PreparedBatch {
    Matrix<T> patches;  // (S*N) x P
    std::vector<T> scale, shift;
    std::vector<NormStats> stats;
    std::size_t windows = 0;
    std::size_t channels = 0;
    std::size_t sequences() const noexcept { return windows * channels; }
};

template <std::floating_point T>
PreparedBatch<T> prepare_batch(std::span<const Matrix<T>> windows, const ModelConfig& config) {
    if (windows.empty()) throw DataError("forward: empty batch");
    const std::size_t L = config.input_len, M = windows.front().cols();
    const std::size_t N = config.num_patches(), P = config.patch_len;
    PreparedBatch<T> out;
    out.windows = windows.size();
    out.channels = M;
    out.patches = Matrix<T>(windows.size() * M * N, P);
    std::vector<T> column(L);
    std::size_t row = 0;
    for (const Matrix<T>& w : windows) {
        if (w.rows() != L || w.cols() != M) {
            throw ShapeError("forward: window " + w.shape() + " does not match [" + std::to_string(L) + "x" +
                             std::to_string(M) + "]");
        }
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t i = 0; i < L; ++i) column[i] = w(i, m);
            const Normalized<T> norm = instance_normalize(std::span<const T>(column), config.eps);
            const PatchSequence<T> seq = make_patches(std::span<const T>(norm.values), P, config.stride);
            std::copy(seq.patches.values().begin(), seq.patches.values().end(), out.patches.row(row).begin());
            row += N;
            out.stats.push_back(norm.stats);
            out.scale.push_back(static_cast<T>(norm.stats.std));
            out.shift.push_back(static_cast<T>(norm.stats.mean));
        }
    }
    return out;
}

/// Places every tensor on the tape, as leaves (trainable) or constants.
template <std::floating_point T>
ModelWeights<ad::Var> to_tape(ad::Tape<T>& tape, const ModelParams<T>& params, bool trainable) {
    ModelWeights<ad::Var> vars;
    vars.layers.resize(params.layers.size());
    std::vector<ad::Var*> slots;
    vars.for_each([&](const std::string&, ad::Var& v) { slots.push_back(&v); });
    std::size_t i = 0;
    params.for_each([&](const std::string&, const Matrix<T>& m) {
        *slots[i++] = trainable ? tape.leaf(m) : tape.constant(m);
    });
    return vars;
}

/// Records the whole network on the tape; returns de-normalized predictions,
/// one row per sequence ((window, channel) order), T columns.
template <std::floating_point T>
ad::Var forward_on_tape(ad::Tape<T>& tape, const ModelWeights<ad::Var>& w, const PreparedBatch<T>& batch,
                        const ModelConfig& config) {
    using namespace ad;
    const std::size_t N = config.num_patches(), D = config.d_model, H = config.n_heads;
    const T eps = static_cast<T>(config.eps);
    Var x = matmul(tape, tape.constant(batch.patches), w.w_embed);
    x = layer_norm(tape, x, w.ln_in_gamma, w.ln_in_beta, eps);
    for (const auto& layer : w.layers) {
        const Var a = layer_norm(tape, x, layer.ln1_gamma, layer.ln1_beta, eps);
        x = add(tape, x, time_mix(tape, a, layer.time_mix, H, N));
        const Var b = layer_norm(tape, x, layer.ln2_gamma, layer.ln2_beta, eps);
        x = add(tape, x, channel_mix(tape, b, layer.channel_mix, N));
    }
    const Var flat = reshape(tape, x, batch.sequences(), N * D);
    const Var head = add_row(tape, matmul(tape, flat, w.w_head), w.b_head);
    return row_affine(tape, head, batch.scale, batch.shift);
}

/// Target windows (each T x M) laid out like forward_on_tape's output rows.
template <std::floating_point T>
Matrix<T> stack_targets(std::span<const Matrix<T>> targets, std::size_t horizon) {
    if (targets.empty()) throw DataError("stack_targets: empty batch");
    const std::size_t M = targets.front().cols();
    Matrix<T> out(targets.size() * M, horizon);
    for (std::size_t b = 0; b < targets.size(); ++b) {
        if (targets[b].rows() != horizon || targets[b].cols() != M) {
            throw ShapeError("target window " + targets[b].shape() + " does not match horizon " + std::to_string(horizon));
        }
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t t = 0; t < horizon; ++t) out(b * M + m, t) = targets[b](t, m);
    }
    return out;
}

template <std::floating_point T>
std::vector<Matrix<T>> unstack_predictions(const Matrix<T>& rows, std::size_t windows, std::size_t channels) {
    std::vector<Matrix<T>> out(windows, Matrix<T>(rows.cols(), channels));
    for (std::size_t b = 0; b < windows; ++b)
        for (std::size_t m = 0; m < channels; ++m)
            for (std::size_t t = 0; t < rows.cols(); ++t) out[b](t, m) = rows(b * channels + m, t);
    return out;
}

// ---------------------------------------------------------------------------
// Streaming (recurrent mode)
// ---------------------------------------------------------------------------

template <std::floating_point T>
struct LayerState {
    ShiftCache<T> cache;
    std::vector<HeadState<T>> heads;
};

/// Constant-size state for consuming one channel's patches one at a time.
/// The flatten head is folded in incrementally, so nothing grows with N.
template <std::floating_point T>
struct InferenceState {
    std::vector<LayerState<T>> layers;
    NormStats stats;
    std::size_t consumed = 0;
    std::vector<T> head_acc;  // partial (flattened tokens) * W_head, length T

    /// Bytes of all buffers held by the state.
    std::size_t byte_size() const noexcept {
        std::size_t bytes = sizeof(NormStats) + sizeof(consumed) + head_acc.size() * sizeof(T);
        for (const auto& l : layers) {
            bytes += (l.cache.prev_time_mix.size() + l.cache.prev_channel_mix.size()) * sizeof(T);
            for (const auto& h : l.heads) bytes += h.s.size() * sizeof(T);
        }
        return bytes;
    }
};

template <std::floating_point T>
InferenceState<T> begin_stream(const ModelConfig& config, NormStats stats) {
    config.validate();
    InferenceState<T> st;
    st.stats = stats;
    st.head_acc.assign(config.horizon, T(0));
    st.layers.resize(config.n_layers);
    for (auto& l : st.layers) {
        l.cache = ShiftCache<T>::zeros(config.d_model);
        l.heads.assign(config.n_heads, HeadState<T>::zeros(config.head_width()));
    }
    return st;
}

/// Consumes the next raw patch of the channel; returns the final-layer
/// representation of that token.
template <std::floating_point T>
std::vector<T> forward_streaming(InferenceState<T>& state, std::span<const T> patch, const ModelParams<T>& params,
                                 const ModelConfig& config) {
    if (patch.size() != config.patch_len) {
        throw ShapeError("forward_streaming: patch length " + std::to_string(patch.size()) + " != " +
                         std::to_string(config.patch_len));
    }
    const std::size_t N = config.num_patches(), D = config.d_model;
    if (state.consumed >= N) throw ContractError("forward_streaming: all " + std::to_string(N) + " patches consumed");
    if (state.layers.size() != params.layers.size()) throw ShapeError("forward_streaming: state/params layer mismatch");
    const T eps = static_cast<T>(config.eps);

    Matrix<T> p(1, patch.size());
    for (std::size_t i = 0; i < patch.size(); ++i) {
        p[i] = static_cast<T>((static_cast<double>(patch[i]) - state.stats.mean) / state.stats.std);
    }
    Matrix<T> x = group_norm_rows(matmul(p, params.w_embed), 1, params.ln_in_gamma, params.ln_in_beta, eps);
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& layer = params.layers[li];
        auto& ls = state.layers[li];
        const Matrix<T> a = group_norm_rows(x, 1, layer.ln1_gamma, layer.ln1_beta, eps);
        const Matrix<T> tm = time_mix_forward(a, layer.time_mix, config.n_heads, ExecMode::recurrent, ls.cache, ls.heads);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += tm[i];
        const Matrix<T> b = group_norm_rows(x, 1, layer.ln2_gamma, layer.ln2_beta, eps);
        const Matrix<T> cm = channel_mix_forward(b, layer.channel_mix, ls.cache);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += cm[i];
    }
    // Token n multiplies rows [n*D, (n+1)*D) of the flatten head.
    const std::size_t horizon = state.head_acc.size();
    for (std::size_t c = 0; c < D; ++c) {
        const T xc = x[c];
        const T* wrow = params.w_head.data() + (state.consumed * D + c) * horizon;
        for (std::size_t j = 0; j < horizon; ++j) state.head_acc[j] += xc * wrow[j];
    }
    ++state.consumed;
    return std::vector<T>(x.values().begin(), x.values().end());
}

/// Head bias and de-normalization after all N patches were consumed.
template <std::floating_point T>
std::vector<T> finish_stream(const InferenceState<T>& state, const ModelParams<T>& params, const ModelConfig& config) {
    if (state.consumed != config.num_patches()) {
        throw ContractError("finish_stream: consumed " + std::to_string(state.consumed) + " of " +
                            std::to_string(config.num_patches()) + " patches");
    }
    std::vector<T> out(state.head_acc.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        const T normalized = state.head_acc[j] + params.b_head[j];
        out[j] = static_cast<T>(static_cast<double>(normalized) * state.stats.std + state.stats.mean);
    }
    return out;
}

/// Predictions (each T x M) for a batch of L x M windows, in the configured mode.
template <std::floating_point T>
std::vector<Matrix<T>> forward(std::span<const Matrix<T>> windows, const ModelParams<T>& params,
                               const ModelConfig& config) {
    config.validate();
    check_param_shapes(params, config);
    for (const auto& w : windows) {
        if (!all_finite(w)) throw DataError("forward: non-finite input window");
    }
    if (config.mode == ExecMode::parallel) {
        ad::Tape<T> tape;
        const PreparedBatch<T> batch = prepare_batch(windows, config);
        const auto vars = to_tape(tape, params, false);
        const ad::Var pred = forward_on_tape(tape, vars, batch, config);
        return unstack_predictions(tape.value(pred), batch.windows, batch.channels);
    }
    if (windows.empty()) throw DataError("forward: empty batch");
    const std::size_t L = config.input_len, M = windows.front().cols(), P = config.patch_len;
    std::vector<Matrix<T>> out;
    std::vector<T> column(L);
    for (const Matrix<T>& w : windows) {
        if (w.rows() != L || w.cols() != M) throw ShapeError("forward: window " + w.shape() + " has the wrong shape");
        Matrix<T> pred(config.horizon, M);
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t i = 0; i < L; ++i) column[i] = w(i, m);
            const Normalized<T> norm = instance_normalize(std::span<const T>(column), config.eps);
            // Patches are cut from the raw series; the state re-applies the statistics.
            const PatchSequence<T> seq = make_patches(std::span<const T>(column), P, config.stride);
            InferenceState<T> st = begin_stream<T>(config, norm.stats);
            for (std::size_t n = 0; n < seq.patches.rows(); ++n) forward_streaming(st, seq.patches.row(n), params, config);
            const std::vector<T> y = finish_stream(st, params, config);
            for (std::size_t t = 0; t < config.horizon; ++t) pred(t, m) = y[t];
        }
        out.push_back(std::move(pred));
    }
    return out;
}

}  // namespace rwkvts
