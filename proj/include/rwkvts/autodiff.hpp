#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rwkvts/error.hpp"
#include "rwkvts/matrix.hpp"

namespace rwkvts::ad {

/// Handle to a node recorded on a Tape.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

/// Primitive kinds, used for accounting and fault injection in tests.
enum class Op {
    leaf,
    constant,
    matmul,
    add,
    sub,
    mul,
    scale,
    add_row,
    silu,
    sigmoid,
    sq_relu,
    decay,
    group_norm,
    token_shift,
    reshape,
    row_affine,
    mean,
    mse,
    wkv,
};

inline const char* op_name(Op op) noexcept {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::constant: return "constant";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::add_row: return "add_row";
        case Op::silu: return "silu";
        case Op::sigmoid: return "sigmoid";
        case Op::sq_relu: return "sq_relu";
        case Op::decay: return "decay";
        case Op::group_norm: return "group_norm";
        case Op::token_shift: return "token_shift";
        case Op::reshape: return "reshape";
        case Op::row_affine: return "row_affine";
        case Op::mean: return "mean";
        case Op::mse: return "mse";
        case Op::wkv: return "wkv";
    }
    return "?";
}

inline std::optional<Op> op_from_name(std::string_view name) noexcept {
    for (int i = 0; i <= static_cast<int>(Op::wkv); ++i) {
        const auto op = static_cast<Op>(i);
        if (name == op_name(op)) return op;
    }
    return std::nullopt;
}

/// Define-by-run gradient tape. Each primitive appends one node holding its
/// value and a closure that propagates the node's gradient to its parents.
/// Nodes are recorded in topological order, so the backward pass is a single
/// reverse sweep. A tape is confined to one thread.
template <std::floating_point T>
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    struct Node {
        Op op;
        Matrix<T> value;
        Matrix<T> grad;  // empty until something flows into it
        Backward backward;
        bool needs_grad = false;
    };

    /// Scales every gradient produced by one primitive's backward rule.
    /// Only used to verify that gradient checks detect broken rules.
    struct Fault {
        Op op;
        T factor;
    };

    Var leaf(Matrix<T> value) { return push(Op::leaf, std::move(value), {}, true); }
    Var constant(Matrix<T> value) { return push(Op::constant, std::move(value), {}, false); }

    /// Appends a node. The backward closure is dropped when no input needs a gradient.
    Var push(Op op, Matrix<T> value, Backward backward, bool needs_grad) {
        if (!needs_grad) backward = nullptr;
        nodes_.push_back(Node{op, std::move(value), Matrix<T>{}, std::move(backward), needs_grad});
        return Var{nodes_.size() - 1};
    }

    const Matrix<T>& value(Var v) const { return node(v).value; }
    bool needs_grad(Var v) const { return node(v).needs_grad; }
    Op op(Var v) const { return node(v).op; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient of the last backward() output with respect to v; zeros if none flowed.
    Matrix<T> grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.empty()) return Matrix<T>(n.value.rows(), n.value.cols());
        return n.grad;
    }

    /// Accumulates g into the gradient of v (no-op for nodes without gradient).
    void accumulate(Var v, const Matrix<T>& g) {
        Node& n = node(v);
        if (!n.needs_grad) return;
        Matrix<T>& acc = grad_buffer(n);
        require_same_shape(acc, g, "gradient accumulation");
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }

    /// Mutable gradient buffer of v, allocated and zeroed on first use.
    Matrix<T>& grad_buffer(Var v) { return grad_buffer(node(v)); }

    /// Reverse sweep seeded with d(output)/d(output) = 1. Returns the number of nodes visited.
    std::size_t backward(Var output) {
        const Node& out = node(output);
        if (out.value.rows() != 1 || out.value.cols() != 1) {
            throw ContractError("backward: output must be a 1x1 scalar, got " + out.value.shape());
        }
        for (Node& n : nodes_) n.grad = Matrix<T>{};
        if (out.needs_grad) grad_buffer(node(output))[0] = T(1);
        std::size_t visited = 0;
        for (std::size_t i = output.id + 1; i-- > 0;) {
            ++visited;
            Node& n = nodes_[i];
            if (n.backward && !n.grad.empty()) {
                if (fault_ && fault_->op == n.op) {
                    for (auto& g : n.grad.values()) g *= fault_->factor;
                }
                n.backward(*this, i);
            }
        }
        return visited;
    }

    /// Bytes held by node values, optionally excluding leaves and constants.
    std::size_t value_bytes(bool intermediates_only = true) const noexcept {
        std::size_t total = 0;
        for (const Node& n : nodes_) {
            if (intermediates_only && (n.op == Op::leaf || n.op == Op::constant)) continue;
            total += n.value.size() * sizeof(T);
        }
        return total;
    }

    void set_fault(std::optional<Fault> fault) { fault_ = fault; }

    /// Gradient scale to apply inside op's backward rule (1 unless a fault targets op).
    T fault_factor(Op op) const noexcept { return fault_ && fault_->op == op ? fault_->factor : T(1); }

    const Matrix<T>& upstream(std::size_t self) const { return nodes_[self].grad; }

private:
    Node& node(Var v) {
        if (v.id >= nodes_.size()) throw ContractError("tape: invalid variable handle");
        return nodes_[v.id];
    }
    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw ContractError("tape: invalid variable handle");
        return nodes_[v.id];
    }
    static Matrix<T>& grad_buffer(Node& n) {
        if (n.grad.empty() && !n.value.empty()) n.grad = Matrix<T>(n.value.rows(), n.value.cols());
        return n.grad;
    }

    std::vector<Node> nodes_;
    std::optional<Fault> fault_;
};

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

template <std::floating_point T>
Var matmul(Tape<T>& tape, Var a, Var b) {
    const bool ng = tape.needs_grad(a) || tape.needs_grad(b);
    return tape.push(Op::matmul, rwkvts::matmul(tape.value(a), tape.value(b)),
                     [a, b](Tape<T>& t, std::size_t self) {
                         const Matrix<T>& g = t.upstream(self);
                         if (t.needs_grad(a)) {
                             Matrix<T> ga(g.rows(), t.value(b).rows());
                             matmul_nt_accumulate(g, t.value(b), ga);
                             t.accumulate(a, ga);
                         }
                         if (t.needs_grad(b)) {
                             matmul_tn_accumulate(t.value(a), g, t.grad_buffer(b));
                         }
                     },
                     ng);
}

template <std::floating_point T>
Var add(Tape<T>& tape, Var a, Var b) {
    require_same_shape(tape.value(a), tape.value(b), "add");
    Matrix<T> out = tape.value(a);
    const Matrix<T>& bv = tape.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return tape.push(Op::add, std::move(out),
                     [a, b](Tape<T>& t, std::size_t self) {
                         t.accumulate(a, t.upstream(self));
                         t.accumulate(b, t.upstream(self));
                     },
                     tape.needs_grad(a) || tape.needs_grad(b));
}

template <std::floating_point T>
Var sub(Tape<T>& tape, Var a, Var b) {
    require_same_shape(tape.value(a), tape.value(b), "sub");
    Matrix<T> out = tape.value(a);
    const Matrix<T>& bv = tape.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return tape.push(Op::sub, std::move(out),
                     [a, b](Tape<T>& t, std::size_t self) {
                         t.accumulate(a, t.upstream(self));
                         if (t.needs_grad(b)) {
                             Matrix<T>& gb = t.grad_buffer(b);
                             const Matrix<T>& g = t.upstream(self);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                         }
                     },
                     tape.needs_grad(a) || tape.needs_grad(b));
}

/// Elementwise product.
template <std::floating_point T>
Var mul(Tape<T>& tape, Var a, Var b) {
    require_same_shape(tape.value(a), tape.value(b), "mul");
    Matrix<T> out = tape.value(a);
    const Matrix<T>& bv = tape.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return tape.push(Op::mul, std::move(out),
                     [a, b](Tape<T>& t, std::size_t self) {
                         const Matrix<T>& g = t.upstream(self);
                         if (t.needs_grad(a)) {
                             Matrix<T>& ga = t.grad_buffer(a);
                             const Matrix<T>& bv = t.value(b);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                         }
                         if (t.needs_grad(b)) {
                             Matrix<T>& gb = t.grad_buffer(b);
                             const Matrix<T>& av = t.value(a);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                         }
                     },
                     tape.needs_grad(a) || tape.needs_grad(b));
}

template <std::floating_point T>
Var scale(Tape<T>& tape, Var a, T s) {
    Matrix<T> out = tape.value(a);
    for (auto& x : out.values()) x *= s;
    return tape.push(Op::scale, std::move(out),
                     [a, s](Tape<T>& t, std::size_t self) {
                         if (!t.needs_grad(a)) return;
                         Matrix<T>& ga = t.grad_buffer(a);
                         const Matrix<T>& g = t.upstream(self);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                     },
                     tape.needs_grad(a));
}

/// Adds a 1 x n row vector to every row of an m x n matrix.
template <std::floating_point T>
Var add_row(Tape<T>& tape, Var a, Var row) {
    const Matrix<T>& av = tape.value(a);
    const Matrix<T>& rv = tape.value(row);
    if (rv.rows() != 1 || rv.cols() != av.cols()) {
        throw ShapeError("add_row: row " + rv.shape() + " does not broadcast over " + av.shape());
    }
    Matrix<T> out = av;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
    return tape.push(Op::add_row, std::move(out),
                     [a, row](Tape<T>& t, std::size_t self) {
                         const Matrix<T>& g = t.upstream(self);
                         t.accumulate(a, g);
                         if (t.needs_grad(row)) {
                             Matrix<T>& gr = t.grad_buffer(row);
                             for (std::size_t i = 0; i < g.rows(); ++i)
                                 for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
                         }
                     },
                     tape.needs_grad(a) || tape.needs_grad(row));
}

namespace detail {

/// Elementwise unary primitive; `deriv(x, y)` returns dy/dx given input x and output y.
template <std::floating_point T, class F, class D>
Var unary(Tape<T>& tape, Op op, Var a, F&& fn, D deriv) {
    Matrix<T> out = map(tape.value(a), fn);
    return tape.push(op, std::move(out),
                     [a, op, deriv](Tape<T>& t, std::size_t self) {
                         if (!t.needs_grad(a)) return;
                         const Matrix<T>& g = t.upstream(self);
                         const Matrix<T>& x = t.value(a);
                         const Matrix<T>& y = t.value(Var{self});
                         Matrix<T>& ga = t.grad_buffer(a);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
                     },
                     tape.needs_grad(a));
}

}  // namespace detail

template <std::floating_point T>
Var sigmoid(Tape<T>& tape, Var a) {
    return detail::unary(tape, Op::sigmoid, a, [](T x) { return rwkvts::sigmoid(x); },
                         [](T, T y) { return y * (T(1) - y); });
}

template <std::floating_point T>
Var silu(Tape<T>& tape, Var a) {
    return detail::unary(tape, Op::silu, a, [](T x) { return rwkvts::silu(x); }, [](T x, T) {
        const T s = rwkvts::sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
    });
}

template <std::floating_point T>
Var sq_relu(Tape<T>& tape, Var a) {
    return detail::unary(tape, Op::sq_relu, a, [](T x) { return rwkvts::sq_relu(x); },
                         [](T x, T) { return x > 0 ? T(2) * x : T(0); });
}

/// exp(-exp(x)): maps raw decay parameters into (0, 1).
template <std::floating_point T>
Var decay(Tape<T>& tape, Var a) {
    return detail::unary(tape, Op::decay, a, [](T x) { return std::exp(-std::exp(x)); },
                         [](T x, T y) { return -std::exp(x) * y; });
}

/// Row-wise group norm with learnable per-column gamma and beta (1 x cols each).
template <std::floating_point T>
Var group_norm(Tape<T>& tape, Var x, Var gamma, Var beta, std::size_t groups, T eps = T(kNormEps)) {
    const Matrix<T>& xv = tape.value(x);
    Matrix<T> out = group_norm_rows(xv, groups, tape.value(gamma), tape.value(beta), eps);
    const bool ng = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
    return tape.push(Op::group_norm, std::move(out),
                     [x, gamma, beta, groups, eps](Tape<T>& t, std::size_t self) {
                         const Matrix<T>& g = t.upstream(self);
                         const Matrix<T>& xv = t.value(x);
                         const Matrix<T>& gm = t.value(gamma);
                         const std::size_t cols = xv.cols();
                         const std::size_t width = cols / groups;
                         Matrix<T>* gx = t.needs_grad(x) ? &t.grad_buffer(x) : nullptr;
                         Matrix<T>* gg = t.needs_grad(gamma) ? &t.grad_buffer(gamma) : nullptr;
                         Matrix<T>* gb = t.needs_grad(beta) ? &t.grad_buffer(beta) : nullptr;
                         std::vector<T> xhat(width), dxhat(width);
                         for (std::size_t i = 0; i < xv.rows(); ++i) {
                             for (std::size_t h = 0; h < groups; ++h) {
                                 const std::size_t off = h * width;
                                 const auto seg = xv.row(i).subspan(off, width);
                                 const auto [mean, var] = mean_variance(seg);
                                 const T inv = T(1) / std::sqrt(var + eps);
                                 T mean_d = 0, mean_dx = 0;
                                 for (std::size_t j = 0; j < width; ++j) {
                                     xhat[j] = (seg[j] - mean) * inv;
                                     const T gij = g(i, off + j);
                                     dxhat[j] = gij * gm[off + j];
                                     mean_d += dxhat[j];
                                     mean_dx += dxhat[j] * xhat[j];
                                     if (gg) (*gg)[off + j] += gij * xhat[j];
                                     if (gb) (*gb)[off + j] += gij;
                                 }
                                 mean_d /= static_cast<T>(width);
                                 mean_dx /= static_cast<T>(width);
                                 if (gx) {
                                     for (std::size_t j = 0; j < width; ++j) {
                                         (*gx)(i, off + j) += inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                                     }
                                 }
                             }
                         }
                     },
                     ng);
}

template <std::floating_point T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps = T(kNormEps)) {
    return group_norm(tape, x, gamma, beta, 1, eps);
}

/// Token shift over stacked sequences: rows are grouped into consecutive
/// sequences of `seq_len` tokens; out_t = mu * x_t + (1 - mu) * x_{t-1},
/// with x_0 = 0 at the start of every sequence. mu is 1 x cols.
template <std::floating_point T>
Var token_shift(Tape<T>& tape, Var x, Var mu, std::size_t seq_len) {
    const Matrix<T>& xv = tape.value(x);
    const Matrix<T>& m = tape.value(mu);
    if (m.rows() != 1 || m.cols() != xv.cols()) {
        throw ShapeError("token_shift: mix " + m.shape() + " does not match " + xv.shape());
    }
    if (seq_len == 0 || xv.rows() % seq_len != 0) {
        throw ShapeError("token_shift: " + std::to_string(xv.rows()) + " rows are not whole sequences of " +
                         std::to_string(seq_len));
    }
    Matrix<T> out(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        const bool first = i % seq_len == 0;
        for (std::size_t j = 0; j < xv.cols(); ++j) {
            const T prev = first ? T(0) : xv(i - 1, j);
            out(i, j) = m[j] * xv(i, j) + (T(1) - m[j]) * prev;
        }
    }
    return tape.push(Op::token_shift, std::move(out),
                     [x, mu, seq_len](Tape<T>& t, std::size_t self) {
                         const Matrix<T>& g = t.upstream(self);
                         const Matrix<T>& xv = t.value(x);
                         const Matrix<T>& m = t.value(mu);
                         const std::size_t cols = xv.cols();
                         if (t.needs_grad(x)) {
                             Matrix<T>& gx = t.grad_buffer(x);
                             for (std::size_t i = 0; i < xv.rows(); ++i) {
                                 const bool last = (i + 1) % seq_len == 0;
                                 for (std::size_t j = 0; j < cols; ++j) {
                                     T d = m[j] * g(i, j);
                                     if (!last) d += (T(1) - m[j]) * g(i + 1, j);
                                     gx(i, j) += d;
                                 }
                             }
                         }
                         if (t.needs_grad(mu)) {
                             Matrix<T>& gm = t.grad_buffer(mu);
                             for (std::size_t i = 0; i < xv.rows(); ++i) {
                                 const bool first = i % seq_len == 0;
                                 for (std::size_t j = 0; j < cols; ++j) {
                                     const T prev = first ? T(0) : xv(i - 1, j);
                                     gm[j] += g(i, j) * (xv(i, j) - prev);
                                 }
                             }
                         }
                     },
                     tape.needs_grad(x) || tape.needs_grad(mu));
}

/// Same data, new row-major shape.
template <std::floating_point T>
Var reshape(Tape<T>& tape, Var a, std::size_t rows, std::size_t cols) {
    Matrix<T> out = tape.value(a);
    out.reshape(rows, cols);
    return tape.push(Op::reshape, std::move(out),
                     [a](Tape<T>& t, std::size_t self) {
                         if (!t.needs_grad(a)) return;
                         Matrix<T>& ga = t.grad_buffer(a);
                         const Matrix<T>& g = t.upstream(self);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     },
                     tape.needs_grad(a));
}

/// out(i, :) = a(i, :) * scale[i] + shift[i] with constant per-row coefficients.
template <std::floating_point T>
Var row_affine(Tape<T>& tape, Var a, std::vector<T> scale, std::vector<T> shift) {
    const Matrix<T>& av = tape.value(a);
    if (scale.size() != av.rows() || shift.size() != av.rows()) {
        throw ShapeError("row_affine: coefficient count does not match rows of " + av.shape());
    }
    Matrix<T> out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) = av(i, j) * scale[i] + shift[i];
    return tape.push(Op::row_affine, std::move(out),
                     [a, scale = std::move(scale)](Tape<T>& t, std::size_t self) {
                         if (!t.needs_grad(a)) return;
                         Matrix<T>& ga = t.grad_buffer(a);
                         const Matrix<T>& g = t.upstream(self);
                         for (std::size_t i = 0; i < g.rows(); ++i)
                             for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) * scale[i];
                     },
                     tape.needs_grad(a));
}

/// Mean of all entries, as a 1 x 1 node.
template <std::floating_point T>
Var mean(Tape<T>& tape, Var a) {
    const Matrix<T>& av = tape.value(a);
    T sum = 0;
    for (T v : av.values()) sum += v;
    const T n = static_cast<T>(av.size());
    return tape.push(Op::mean, Matrix<T>(1, 1, sum / n),
                     [a, n](Tape<T>& t, std::size_t self) {
                         if (!t.needs_grad(a)) return;
                         const T g = t.upstream(self)[0] / n;
                         for (auto& x : t.grad_buffer(a).values()) x += g;
                     },
                     tape.needs_grad(a));
}

/// Mean squared error between a prediction node and a target node, as 1 x 1.
template <std::floating_point T>
Var mse(Tape<T>& tape, Var pred, Var target) {
    const Matrix<T>& p = tape.value(pred);
    const Matrix<T>& y = tape.value(target);
    require_same_shape(p, y, "mse");
    T sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] - y[i]) * (p[i] - y[i]);
    const T n = static_cast<T>(p.size());
    return tape.push(Op::mse, Matrix<T>(1, 1, sum / n),
                     [pred, target, n](Tape<T>& t, std::size_t self) {
                         const T g = t.upstream(self)[0] * T(2) / n;
                         const Matrix<T>& p = t.value(pred);
                         const Matrix<T>& y = t.value(target);
                         if (t.needs_grad(pred)) {
                             Matrix<T>& gp = t.grad_buffer(pred);
                             for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * (p[i] - y[i]);
                         }
                         if (t.needs_grad(target)) {
                             Matrix<T>& gy = t.grad_buffer(target);
                             for (std::size_t i = 0; i < p.size(); ++i) gy[i] -= g * (p[i] - y[i]);
                         }
                     },
                     tape.needs_grad(pred) || tape.needs_grad(target));
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|), with central
/// differences (f(theta + h e_i) - f(theta - h e_i)) / 2h.
inline double gradient_error(const std::vector<double>& analytic, const std::function<double(const std::vector<double>&)>& f,
                             std::vector<double> theta, double h) {
    if (!(h > 0)) throw ContractError("gradient_error: step must be positive");
    if (analytic.size() != theta.size()) throw ShapeError("gradient_error: gradient and parameter lengths differ");
    double worst = 0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta[i];
        theta[i] = saved + h;
        const double fp = f(theta);
        theta[i] = saved - h;
        const double fm = f(theta);
        theta[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("gradient_error: non-finite function value at coordinate " + std::to_string(i));
        }
        const double fd = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    return worst;
}

/// Builds f on a fresh tape for each evaluation (leaf = theta as 1 x n) and
/// compares its reverse-mode gradient against central differences.
inline double grad_check(const std::function<Var(Tape<double>&, Var)>& f, const std::vector<double>& theta,
                         double h = 1e-5) {
    auto eval = [&](const std::vector<double>& th) {
        Tape<double> tape;
        const Var x = tape.leaf(Matrix<double>::row_vector(th));
        return tape.value(f(tape, x))[0];
    };
    Tape<double> tape;
    const Var x = tape.leaf(Matrix<double>::row_vector(theta));
    const Var y = f(tape, x);
    tape.backward(y);
    const Matrix<double> g = tape.grad(x);
    return gradient_error(std::vector<double>(g.values().begin(), g.values().end()), eval, theta, h);
}

}  // namespace rwkvts::ad
