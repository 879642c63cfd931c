#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rwkvts/error.hpp"

namespace rwkvts {

/// Default epsilon for every normalization in the library.
inline constexpr double kNormEps = 1e-5;

/// Dense row-major matrix. Vectors are stored as 1 x n matrices.
template <std::floating_point T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(rows_, cols_));
        }
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged rows in Matrix::from_rows");
            std::copy(row.begin(), row.end(), m.row(i++).begin());
        }
        return m;
    }

    static Matrix row_vector(std::span<const T> values) {
        return Matrix(1, values.size(), std::vector<T>(values.begin(), values.end()));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }
    T& operator[](std::size_t idx) noexcept { return data_[idx]; }
    const T& operator[](std::size_t idx) const noexcept { return data_[idx]; }

    std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const T> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

    /// Reinterprets the row-major buffer with a new shape of equal size.
    void reshape(std::size_t rows, std::size_t cols) {
        if (rows * cols != data_.size()) {
            throw ShapeError("cannot reshape " + shape() + " to " + shape_string(rows, cols));
        }
        rows_ = rows;
        cols_ = cols;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    std::string shape() const { return shape_string(rows_, cols_); }

    static std::string shape_string(std::size_t r, std::size_t c) {
        return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
    }

    template <std::floating_point U>
    Matrix<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Matrix<U>(rows_, cols_, std::move(out));
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <std::floating_point T>
bool same_shape(const Matrix<T>& a, const Matrix<T>& b) noexcept {
    return a.rows() == b.rows() && a.cols() == b.cols();
}

template <std::floating_point T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* what) {
    if (!same_shape(a, b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}

template <std::floating_point T>
bool all_finite(std::span<const T> values) noexcept {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <std::floating_point T>
bool all_finite(const Matrix<T>& m) noexcept {
    return all_finite(m.values());
}

template <std::floating_point T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    require_same_shape(a, b, "max_abs_diff");
    T worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

// ---------------------------------------------------------------------------
// Products. Every output element accumulates its inner index in increasing
// order, so results are bit-reproducible for a given precision and build.
// ---------------------------------------------------------------------------

/// C += A * B with A [m x k], B [k x n].
template <std::floating_point T>
void matmul_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        T* out = c.data() + i * n;
        const T* arow = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T s = arow[p];
            const T* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) out[j] += s * brow[j];
        }
    }
}

template <std::floating_point T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree " + a.shape() + " * " + b.shape());
    }
    Matrix<T> c(a.rows(), b.cols());
    matmul_accumulate(a, b, c);
    return c;
}

template <std::floating_point T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

/// C += A^T * B with A [r x m], B [r x n].
template <std::floating_point T>
void matmul_tn_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) {
        throw ShapeError("matmul_tn: " + a.shape() + "^T * " + b.shape() + " -> " + c.shape());
    }
    const std::size_t r = a.rows(), m = a.cols(), n = b.cols();
    for (std::size_t p = 0; p < r; ++p) {
        const T* arow = a.data() + p * m;
        const T* brow = b.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T s = arow[i];
            T* out = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) out[j] += s * brow[j];
        }
    }
}

/// C += A * B^T with A [m x k], B [n x k].
template <std::floating_point T>
void matmul_nt_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    if (a.cols() != b.cols() || c.rows() != a.rows() || c.cols() != b.rows()) {
        throw ShapeError("matmul_nt: " + a.shape() + " * " + b.shape() + "^T -> " + c.shape());
    }
    matmul_accumulate(a, transpose(b), c);
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <std::floating_point T>
T sigmoid(T x) noexcept {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <std::floating_point T>
T silu(T x) noexcept {
    return x * sigmoid(x);
}

template <std::floating_point T>
T sq_relu(T x) noexcept {
    return x > 0 ? x * x : T(0);
}

template <std::floating_point T, class F>
Matrix<T> map(const Matrix<T>& m, F&& f) {
    Matrix<T> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = f(m[i]);
    return out;
}

template <std::floating_point T>
Matrix<T> sigmoid(const Matrix<T>& m) { return map(m, [](T x) { return sigmoid(x); }); }
template <std::floating_point T>
Matrix<T> silu(const Matrix<T>& m) { return map(m, [](T x) { return silu(x); }); }
template <std::floating_point T>
Matrix<T> sq_relu(const Matrix<T>& m) { return map(m, [](T x) { return sq_relu(x); }); }

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Population mean and variance of a span, summed left to right.
template <std::floating_point T>
std::pair<T, T> mean_variance(std::span<const T> x) noexcept {
    T sum = 0;
    for (T v : x) sum += v;
    const T mean = sum / static_cast<T>(x.size());
    T sq = 0;
    for (T v : x) sq += (v - mean) * (v - mean);
    return {mean, sq / static_cast<T>(x.size())};
}

/// Writes (x - mean) / sqrt(var + eps) * gamma + beta into out.
template <std::floating_point T>
void layer_norm_into(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta, T eps,
                     std::span<T> out) noexcept {
    const auto [mean, var] = mean_variance(x);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
}

template <std::floating_point T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                          T eps = T(kNormEps)) {
    if (x.empty()) throw ShapeError("layer_norm: empty input");
    if (gamma.size() != x.size() || beta.size() != x.size()) {
        throw ShapeError("layer_norm: gamma/beta length does not match input length " + std::to_string(x.size()));
    }
    std::vector<T> out(x.size());
    layer_norm_into(x, gamma, beta, eps, std::span<T>(out));
    return out;
}

/// Layer norm applied independently to `groups` contiguous slices of x.
template <std::floating_point T>
void group_norm_into(std::span<const T> x, std::size_t groups, std::span<const T> gamma,
                     std::span<const T> beta, T eps, std::span<T> out) {
    if (groups == 0 || x.size() % groups != 0) {
        throw ConfigError("group_norm: width " + std::to_string(x.size()) + " is not divisible by " +
                          std::to_string(groups) + " groups");
    }
    const std::size_t g = x.size() / groups;
    for (std::size_t h = 0; h < groups; ++h) {
        layer_norm_into(x.subspan(h * g, g), gamma.subspan(h * g, g), beta.subspan(h * g, g), eps,
                        out.subspan(h * g, g));
    }
}

template <std::floating_point T>
std::vector<T> group_norm(std::span<const T> x, std::size_t groups, std::span<const T> gamma,
                          std::span<const T> beta, T eps = T(kNormEps)) {
    if (gamma.size() != x.size() || beta.size() != x.size()) {
        throw ShapeError("group_norm: gamma/beta length does not match input length " + std::to_string(x.size()));
    }
    std::vector<T> out(x.size());
    group_norm_into(x, groups, gamma, beta, eps, std::span<T>(out));
    return out;
}

/// Row-wise group norm over a matrix; gamma and beta are 1 x cols.
template <std::floating_point T>
Matrix<T> group_norm_rows(const Matrix<T>& x, std::size_t groups, const Matrix<T>& gamma, const Matrix<T>& beta,
                          T eps = T(kNormEps)) {
    if (gamma.size() != x.cols() || beta.size() != x.cols()) {
        throw ShapeError("group_norm_rows: affine parameters " + gamma.shape() + " do not match width of " + x.shape());
    }
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        group_norm_into(x.row(i), groups, gamma.values(), beta.values(), eps, out.row(i));
    }
    return out;
}

}  // namespace rwkvts
