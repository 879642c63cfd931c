#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rwkvts/autodiff.hpp"
#include "rwkvts/error.hpp"
#include "rwkvts/matrix.hpp"

// Conventions: tokens are row vectors and projections are applied as x * W
// with W stored [in x out]. Per-channel vectors are 1 x D matrices. Head h
// owns columns [h*d, (h+1)*d) of every D-wide quantity.

namespace rwkvts {

enum class ExecMode { parallel, recurrent };

inline const char* to_string(ExecMode m) noexcept { return m == ExecMode::parallel ? "parallel" : "recurrent"; }

/// Learnable tensors of a time-mixing sub-block. Tensor is Matrix<T> for
/// storage or ad::Var when the weights live on a tape.
template <class Tensor>
struct TimeMixWeights {
    Tensor mu_g, mu_r, mu_k, mu_v;  // 1 x D token-shift mixes
    Tensor w_g, w_r, w_k, w_v;      // D x D
    Tensor decay_raw;               // 1 x D, effective decay exp(-exp(decay_raw))
    Tensor bonus;                   // 1 x D, u
    Tensor ln_gamma, ln_beta;       // 1 x D, per-head normalization
    Tensor w_o;                     // D x D

    template <class Self, class F>
    static void visit(Self& s, F&& f) {
        f("mu_g", s.mu_g);
        f("mu_r", s.mu_r);
        f("mu_k", s.mu_k);
        f("mu_v", s.mu_v);
        f("w_g", s.w_g);
        f("w_r", s.w_r);
        f("w_k", s.w_k);
        f("w_v", s.w_v);
        f("decay_raw", s.decay_raw);
        f("bonus", s.bonus);
        f("ln_gamma", s.ln_gamma);
        f("ln_beta", s.ln_beta);
        f("w_o", s.w_o);
    }
};

/// Learnable tensors of a channel-mixing sub-block (hidden width F).
template <class Tensor>
struct ChannelMixWeights {
    Tensor mu_k, mu_r;  // 1 x D
    Tensor w_k;         // D x F
    Tensor w_v;         // F x D
    Tensor w_r;         // D x D

    template <class Self, class F>
    static void visit(Self& s, F&& f) {
        f("mu_k", s.mu_k);
        f("mu_r", s.mu_r);
        f("w_k", s.w_k);
        f("w_v", s.w_v);
        f("w_r", s.w_r);
    }
};

template <std::floating_point T>
using TimeMixParams = TimeMixWeights<Matrix<T>>;
template <std::floating_point T>
using ChannelMixParams = ChannelMixWeights<Matrix<T>>;

/// WKV accumulator of one head.
template <std::floating_point T>
struct HeadState {
    Matrix<T> s;  // d x d

    static HeadState zeros(std::size_t head_dim) { return HeadState{Matrix<T>(head_dim, head_dim)}; }
};

/// Previous-token inputs of both token shifts in one layer.
template <std::floating_point T>
struct ShiftCache {
    std::vector<T> prev_time_mix;
    std::vector<T> prev_channel_mix;

    static ShiftCache zeros(std::size_t d_model) {
        return ShiftCache{std::vector<T>(d_model, T(0)), std::vector<T>(d_model, T(0))};
    }
};

inline std::size_t head_dim(std::size_t d_model, std::size_t heads) {
    if (heads == 0 || d_model % heads != 0) {
        throw ConfigError("model width " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
    return d_model / heads;
}

// ---------------------------------------------------------------------------
// Elementary operators
// ---------------------------------------------------------------------------

/// mu * x_t + (1 - mu) * x_prev.
template <std::floating_point T>
std::vector<T> token_shift(std::span<const T> x, std::span<const T> x_prev, std::span<const T> mu) {
    if (x.size() != x_prev.size() || x.size() != mu.size()) throw ShapeError("token_shift: length mismatch");
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = mu[i] * x[i] + (T(1) - mu[i]) * x_prev[i];
    return out;
}

/// exp(-exp(w_raw)) elementwise; every output lies in (0, 1) for finite input
/// (up to underflow/rounding at extreme magnitudes).
template <std::floating_point T>
std::vector<T> transform_decay(std::span<const T> w_raw) {
    std::vector<T> out(w_raw.size());
    for (std::size_t i = 0; i < w_raw.size(); ++i) out[i] = std::exp(-std::exp(w_raw[i]));
    return out;
}

/// One recurrent WKV step for a single head:
///   wkv_t = s_{t-1} + diag(u) k_t^T v_t
///   s_t   = diag(w) s_{t-1} + k_t^T v_t
template <std::floating_point T>
std::pair<Matrix<T>, HeadState<T>> wkv_recurrent_step(const HeadState<T>& state, std::span<const T> k,
                                                      std::span<const T> v, std::span<const T> u,
                                                      std::span<const T> w) {
    const std::size_t d = k.size();
    if (v.size() != d || u.size() != d || w.size() != d || state.s.rows() != d || state.s.cols() != d) {
        throw ShapeError("wkv_recurrent_step: head dimension mismatch");
    }
    Matrix<T> wkv(d, d);
    HeadState<T> next{Matrix<T>(d, d)};
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const T kv = k[i] * v[j];
            wkv(i, j) = state.s(i, j) + u[i] * kv;
            next.s(i, j) = w[i] * state.s(i, j) + kv;
        }
    }
    if (!all_finite(next.s)) throw NumericError("wkv_recurrent_step: state became non-finite");
    return {std::move(wkv), std::move(next)};
}

/// All wkv_t matrices of one head for t = 1..N from a zero initial state,
/// using a running decayed accumulator instead of explicit powers of diag(w).
template <std::floating_point T>
std::vector<Matrix<T>> wkv_parallel(const Matrix<T>& keys, const Matrix<T>& values, std::span<const T> u,
                                    std::span<const T> w) {
    const std::size_t n = keys.rows(), d = keys.cols();
    if (values.rows() != n || values.cols() != d || u.size() != d || w.size() != d) {
        throw ShapeError("wkv_parallel: K " + keys.shape() + " and V " + values.shape() + " disagree with u/w");
    }
    std::vector<Matrix<T>> out;
    out.reserve(n);
    Matrix<T> acc(d, d);
    for (std::size_t t = 0; t < n; ++t) {
        Matrix<T> wkv(d, d);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const T kv = keys(t, i) * values(t, j);
                wkv(i, j) = acc(i, j) + u[i] * kv;
                acc(i, j) = w[i] * acc(i, j) + kv;
            }
        }
        out.push_back(std::move(wkv));
    }
    if (!all_finite(acc)) throw NumericError("wkv_parallel: accumulator became non-finite");
    return out;
}

namespace detail {

/// Fused scan + receptance readout for one head of one sequence:
///   y_t = r_t s_{t-1} + (r_t . (u * k_t)) v_t,  s_t = diag(w) s_{t-1} + k_t^T v_t.
/// Row pointers advance by `ld`; `state` is d x d, read and updated in place.
/// Work is O(n d^2) and no n x n interaction is formed.
template <std::floating_point T>
void wkv_scan_readout(const T* r, const T* k, const T* v, std::size_t ld, std::size_t n, std::size_t d, const T* w,
                      const T* u, T* state, T* y) {
    for (std::size_t t = 0; t < n; ++t) {
        const T* rt = r + t * ld;
        const T* kt = k + t * ld;
        const T* vt = v + t * ld;
        T* yt = y + t * ld;
        T bonus = 0;
        for (std::size_t i = 0; i < d; ++i) bonus += rt[i] * u[i] * kt[i];
        for (std::size_t j = 0; j < d; ++j) yt[j] = 0;
        for (std::size_t i = 0; i < d; ++i) {
            const T ri = rt[i];
            const T* si = state + i * d;
            for (std::size_t j = 0; j < d; ++j) yt[j] += ri * si[j];
        }
        for (std::size_t j = 0; j < d; ++j) yt[j] += bonus * vt[j];
        for (std::size_t i = 0; i < d; ++i) {
            const T wi = w[i], ki = kt[i];
            T* si = state + i * d;
            for (std::size_t j = 0; j < d; ++j) si[j] = wi * si[j] + ki * vt[j];
        }
    }
}

template <std::floating_point T>
Matrix<T> shifted_inputs(const Matrix<T>& x, std::span<const T> prev, std::span<const T> mu) {
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto before = t == 0 ? prev : x.row(t - 1);
        for (std::size_t j = 0; j < x.cols(); ++j) out(t, j) = mu[j] * x(t, j) + (T(1) - mu[j]) * before[j];
    }
    return out;
}

template <std::floating_point T>
void check_time_mix_shapes(const Matrix<T>& x, const TimeMixParams<T>& p, std::size_t heads) {
    const std::size_t d_model = x.cols();
    head_dim(d_model, heads);
    for (const Matrix<T>* m : {&p.w_g, &p.w_r, &p.w_k, &p.w_v, &p.w_o}) {
        if (m->rows() != d_model || m->cols() != d_model) {
            throw ShapeError("time_mix: projection " + m->shape() + " does not match width " + std::to_string(d_model));
        }
    }
    for (const Matrix<T>* m : {&p.mu_g, &p.mu_r, &p.mu_k, &p.mu_v, &p.decay_raw, &p.bonus, &p.ln_gamma, &p.ln_beta}) {
        if (m->size() != d_model) {
            throw ShapeError("time_mix: vector " + m->shape() + " does not match width " + std::to_string(d_model));
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sub-blocks on plain matrices (inference and the recurrence oracle)
// ---------------------------------------------------------------------------

/// Time-mixing over a contiguous run of tokens continuing from (cache, states).
/// Parallel mode projects the whole run at once and scans each head; recurrent
/// mode advances one token at a time through wkv_recurrent_step. Both modes
/// advance the cache and states identically.
template <std::floating_point T>
Matrix<T> time_mix_forward(const Matrix<T>& x, const TimeMixParams<T>& p, std::size_t heads, ExecMode mode,
                           ShiftCache<T>& cache, std::vector<HeadState<T>>& states) {
    detail::check_time_mix_shapes(x, p, heads);
    const std::size_t n = x.rows(), dm = x.cols(), d = dm / heads;
    if (states.size() != heads) throw ShapeError("time_mix: expected one state per head");
    if (cache.prev_time_mix.size() != dm) throw ShapeError("time_mix: shift cache width mismatch");
    const std::vector<T> w = transform_decay(p.decay_raw.values());
    const std::span<const T> u = p.bonus.values();
    const T eps = T(kNormEps);

    Matrix<T> y(n, dm);
    Matrix<T> g;
    if (mode == ExecMode::parallel) {
        const std::span<const T> prev(cache.prev_time_mix);
        g = matmul(detail::shifted_inputs(x, prev, p.mu_g.values()), p.w_g);
        const Matrix<T> r = matmul(detail::shifted_inputs(x, prev, p.mu_r.values()), p.w_r);
        const Matrix<T> k = matmul(detail::shifted_inputs(x, prev, p.mu_k.values()), p.w_k);
        const Matrix<T> v = matmul(detail::shifted_inputs(x, prev, p.mu_v.values()), p.w_v);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * d;
            detail::wkv_scan_readout(r.data() + off, k.data() + off, v.data() + off, dm, n, d, w.data() + off,
                                     u.data() + off, states[h].s.data(), y.data() + off);
            if (!all_finite(states[h].s)) throw NumericError("time_mix: WKV state became non-finite");
        }
    } else {
        g = Matrix<T>(n, dm);
        std::vector<T> prev = cache.prev_time_mix;
        for (std::size_t t = 0; t < n; ++t) {
            const auto xt = x.row(t);
            auto project = [&](const Matrix<T>& mu, const Matrix<T>& W) {
                const std::vector<T> shifted = token_shift(xt, std::span<const T>(prev), mu.values());
                return matmul(Matrix<T>::row_vector(shifted), W);
            };
            const Matrix<T> gt = project(p.mu_g, p.w_g);
            const Matrix<T> rt = project(p.mu_r, p.w_r);
            const Matrix<T> kt = project(p.mu_k, p.w_k);
            const Matrix<T> vt = project(p.mu_v, p.w_v);
            std::copy(gt.values().begin(), gt.values().end(), g.row(t).begin());
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * d;
                auto [wkv, next] = wkv_recurrent_step(states[h], kt.values().subspan(off, d),
                                                      vt.values().subspan(off, d), u.subspan(off, d),
                                                      std::span<const T>(w).subspan(off, d));
                // r_t (row) times wkv_t
                for (std::size_t i = 0; i < d; ++i) {
                    const T ri = rt[off + i];
                    for (std::size_t j = 0; j < d; ++j) y(t, off + j) += ri * wkv(i, j);
                }
                states[h] = std::move(next);
            }
            prev.assign(xt.begin(), xt.end());
        }
    }
    if (n > 0) cache.prev_time_mix.assign(x.row(n - 1).begin(), x.row(n - 1).end());

    Matrix<T> gated = group_norm_rows(y, heads, p.ln_gamma, p.ln_beta, eps);
    for (std::size_t i = 0; i < gated.size(); ++i) gated[i] *= silu(g[i]);
    return matmul(gated, p.w_o);
}

/// Channel-mixing: k' = shift_k(x) W_k, r' = shift_r(x) W_r,
/// out = sigmoid(r') * (sq_relu(k') W_v).
template <std::floating_point T>
Matrix<T> channel_mix_forward(const Matrix<T>& x, const ChannelMixParams<T>& p, ShiftCache<T>& cache) {
    const std::size_t dm = x.cols();
    if (p.mu_k.size() != dm || p.mu_r.size() != dm || p.w_k.rows() != dm || p.w_v.cols() != dm ||
        p.w_v.rows() != p.w_k.cols() || p.w_r.rows() != dm || p.w_r.cols() != dm) {
        throw ShapeError("channel_mix: parameter shapes do not match width " + std::to_string(dm));
    }
    if (cache.prev_channel_mix.size() != dm) throw ShapeError("channel_mix: shift cache width mismatch");
    const std::span<const T> prev(cache.prev_channel_mix);
    const Matrix<T> k = sq_relu(matmul(detail::shifted_inputs(x, prev, p.mu_k.values()), p.w_k));
    const Matrix<T> r = matmul(detail::shifted_inputs(x, prev, p.mu_r.values()), p.w_r);
    Matrix<T> out = matmul(k, p.w_v);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sigmoid(r[i]);
    if (x.rows() > 0) cache.prev_channel_mix.assign(x.row(x.rows() - 1).begin(), x.row(x.rows() - 1).end());
    return out;
}

// ---------------------------------------------------------------------------
// Tape versions (training path, parallel mode over stacked sequences)
// ---------------------------------------------------------------------------

namespace ad {

/// Multi-head WKV readout over stacked sequences of `seq_len` rows, each
/// starting from a zero state. r, k, v are rows x D; w (already decayed) and u
/// are 1 x D. Returns the concatenated per-head r_t * wkv_t, rows x D.
template <std::floating_point T>
Var wkv(Tape<T>& tape, Var r, Var k, Var v, Var w, Var u, std::size_t heads, std::size_t seq_len) {
    const Matrix<T>& rv = tape.value(r);
    const std::size_t rows = rv.rows(), dm = rv.cols(), d = head_dim(dm, heads);
    require_same_shape(rv, tape.value(k), "wkv");
    require_same_shape(rv, tape.value(v), "wkv");
    if (tape.value(w).size() != dm || tape.value(u).size() != dm) throw ShapeError("wkv: decay/bonus width mismatch");
    if (seq_len == 0 || rows % seq_len != 0) throw ShapeError("wkv: rows are not whole sequences");

    Matrix<T> y(rows, dm);
    std::vector<T> state(d * d);
    for (std::size_t s0 = 0; s0 < rows; s0 += seq_len) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = s0 * dm + h * d;
            std::fill(state.begin(), state.end(), T(0));
            rwkvts::detail::wkv_scan_readout(rv.data() + off, tape.value(k).data() + off, tape.value(v).data() + off,
                                             dm, seq_len, d, tape.value(w).data() + h * d,
                                             tape.value(u).data() + h * d, state.data(), y.data() + off);
        }
    }
    const bool ng = tape.needs_grad(r) || tape.needs_grad(k) || tape.needs_grad(v) || tape.needs_grad(w) ||
                    tape.needs_grad(u);
    return tape.push(
        Op::wkv, std::move(y),
        [r, k, v, w, u, heads, seq_len](Tape<T>& t, std::size_t self) {
            const Matrix<T>& g = t.upstream(self);
            const Matrix<T>& rv = t.value(r);
            const Matrix<T>& kv = t.value(k);
            const Matrix<T>& vv = t.value(v);
            const Matrix<T>& wv = t.value(w);
            const Matrix<T>& uv = t.value(u);
            const std::size_t rows = rv.rows(), dm = rv.cols(), d = dm / heads;
            Matrix<T> dr(rows, dm), dk(rows, dm), dv(rows, dm), dw(1, dm), du(1, dm);
            // States s_{t-1} of one (sequence, head) are replayed forward into
            // scratch so the reverse sweep can read them.
            std::vector<T> prev(seq_len * d * d);
            std::vector<T> ds(d * d);
            for (std::size_t s0 = 0; s0 < rows; s0 += seq_len) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t c0 = h * d;
                    const T* wh = wv.data() + c0;
                    const T* uh = uv.data() + c0;
                    std::fill(prev.begin(), prev.begin() + d * d, T(0));
                    for (std::size_t tt = 0; tt + 1 < seq_len; ++tt) {
                        const T* sp = prev.data() + tt * d * d;
                        T* sn = prev.data() + (tt + 1) * d * d;
                        const auto kt = kv.row(s0 + tt).subspan(c0, d);
                        const auto vt = vv.row(s0 + tt).subspan(c0, d);
                        for (std::size_t i = 0; i < d; ++i)
                            for (std::size_t j = 0; j < d; ++j) sn[i * d + j] = wh[i] * sp[i * d + j] + kt[i] * vt[j];
                    }
                    std::fill(ds.begin(), ds.end(), T(0));
                    for (std::size_t tt = seq_len; tt-- > 0;) {
                        const std::size_t row = s0 + tt;
                        const T* sp = prev.data() + tt * d * d;
                        const auto gt = g.row(row).subspan(c0, d);
                        const auto rt = rv.row(row).subspan(c0, d);
                        const auto kt = kv.row(row).subspan(c0, d);
                        const auto vt = vv.row(row).subspan(c0, d);
                        T gv = 0, bonus = 0;
                        for (std::size_t j = 0; j < d; ++j) gv += gt[j] * vt[j];
                        for (std::size_t i = 0; i < d; ++i) bonus += rt[i] * uh[i] * kt[i];
                        for (std::size_t i = 0; i < d; ++i) {
                            T acc_r = 0, acc_k = 0, acc_w = 0;
                            for (std::size_t j = 0; j < d; ++j) {
                                acc_r += gt[j] * sp[i * d + j];
                                acc_k += ds[i * d + j] * vt[j];
                                acc_w += ds[i * d + j] * sp[i * d + j];
                            }
                            dr(row, c0 + i) = acc_r + uh[i] * kt[i] * gv;
                            dk(row, c0 + i) = rt[i] * uh[i] * gv + acc_k;
                            dw[c0 + i] += acc_w;
                            du[c0 + i] += rt[i] * kt[i] * gv;
                        }
                        for (std::size_t j = 0; j < d; ++j) dv(row, c0 + j) = bonus * gt[j];
                        for (std::size_t i = 0; i < d; ++i) {
                            const T ki = kt[i];
                            for (std::size_t j = 0; j < d; ++j) dv(row, c0 + j) += ds[i * d + j] * ki;
                        }
                        for (std::size_t i = 0; i < d; ++i)
                            for (std::size_t j = 0; j < d; ++j) ds[i * d + j] = rt[i] * gt[j] + wh[i] * ds[i * d + j];
                    }
                }
            }
            t.accumulate(r, dr);
            t.accumulate(k, dk);
            t.accumulate(v, dv);
            t.accumulate(w, dw);
            t.accumulate(u, du);
        },
        ng);
}

/// Time-mixing sub-block over stacked sequences of `seq_len` tokens.
template <std::floating_point T>
Var time_mix(Tape<T>& tape, Var x, const TimeMixWeights<Var>& p, std::size_t heads, std::size_t seq_len) {
    const Var g = matmul(tape, token_shift(tape, x, p.mu_g, seq_len), p.w_g);
    const Var r = matmul(tape, token_shift(tape, x, p.mu_r, seq_len), p.w_r);
    const Var k = matmul(tape, token_shift(tape, x, p.mu_k, seq_len), p.w_k);
    const Var v = matmul(tape, token_shift(tape, x, p.mu_v, seq_len), p.w_v);
    const Var y = wkv(tape, r, k, v, decay(tape, p.decay_raw), p.bonus, heads, seq_len);
    const Var normed = group_norm(tape, y, p.ln_gamma, p.ln_beta, heads);
    return matmul(tape, mul(tape, silu(tape, g), normed), p.w_o);
}

template <std::floating_point T>
Var channel_mix(Tape<T>& tape, Var x, const ChannelMixWeights<Var>& p, std::size_t seq_len) {
    const Var k = sq_relu(tape, matmul(tape, token_shift(tape, x, p.mu_k, seq_len), p.w_k));
    const Var r = sigmoid(tape, matmul(tape, token_shift(tape, x, p.mu_r, seq_len), p.w_r));
    return mul(tape, r, matmul(tape, k, p.w_v));
}

}  // namespace ad
}  // namespace rwkvts
