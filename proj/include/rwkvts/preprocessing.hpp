#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rwkvts/error.hpp"
#include "rwkvts/matrix.hpp"

namespace rwkvts {

/// Per-instance statistics captured by instance normalization for one channel.
struct NormStats {
    double mean = 0.0;
    double std = 1.0;  // already floored at eps
    double eps = kNormEps;
};

template <std::floating_point T>
struct Normalized {
    std::vector<T> values;
    NormStats stats;
};

/// Scales a univariate window to zero mean and unit population std.
/// The std actually used is max(std, eps) and is what gets stored.
template <std::floating_point T>
Normalized<T> instance_normalize(std::span<const T> series, double eps = kNormEps) {
    if (series.empty()) throw DataError("instance_normalize: empty series");
    if (!(eps > 0)) throw ConfigError("instance_normalize: eps must be positive");
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (!std::isfinite(series[i])) {
            throw DataError("instance_normalize: non-finite value at index " + std::to_string(i));
        }
    }
    // Statistics are always accumulated in double.
    double sum = 0;
    for (T v : series) sum += static_cast<double>(v);
    double mean = sum / static_cast<double>(series.size());
    // Second pass corrects the mean.
    double resid = 0;
    for (T v : series) resid += static_cast<double>(v) - mean;
    mean += resid / static_cast<double>(series.size());
    double sq = 0;
    for (T v : series) sq += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
    const double std = std::max(std::sqrt(sq / static_cast<double>(series.size())), eps);

    Normalized<T> out{std::vector<T>(series.size()), NormStats{mean, std, eps}};
    for (std::size_t i = 0; i < series.size(); ++i) {
        out.values[i] = static_cast<T>((static_cast<double>(series[i]) - mean) / std);
    }
    return out;
}

template <std::floating_point T>
std::vector<T> instance_denormalize(std::span<const T> values, const NormStats& stats) {
    std::vector<T> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = static_cast<T>(static_cast<double>(values[i]) * stats.std + stats.mean);
    }
    return out;
}

inline void validate_patching(std::size_t input_len, std::size_t patch_len, std::size_t stride) {
    if (patch_len == 0 || stride == 0) throw ConfigError("patching: patch length and stride must be >= 1");
    if (patch_len > input_len) {
        throw ConfigError("patching: patch length " + std::to_string(patch_len) + " exceeds input length " +
                          std::to_string(input_len));
    }
}

/// Number of patch tokens: floor((L - P) / S) + 2.
inline std::size_t count_patches(std::size_t input_len, std::size_t patch_len, std::size_t stride) {
    validate_patching(input_len, patch_len, stride);
    return (input_len - patch_len) / stride + 2;
}

template <std::floating_point T>
struct PatchSequence {
    Matrix<T> patches;  // N x P
    std::size_t patch_len = 0;
    std::size_t stride = 0;
    std::size_t source_len = 0;
};

/// Pads the series with S copies of its last value and emits every length-P
/// window at stride S over the padded length L + S.
template <std::floating_point T>
PatchSequence<T> make_patches(std::span<const T> series, std::size_t patch_len, std::size_t stride) {
    const std::size_t n = count_patches(series.size(), patch_len, stride);
    auto padded_at = [&](std::size_t i) { return i < series.size() ? series[i] : series.back(); };
    PatchSequence<T> out{Matrix<T>(n, patch_len), patch_len, stride, series.size()};
    for (std::size_t p = 0; p < n; ++p) {
        const std::size_t start = p * stride;
        for (std::size_t j = 0; j < patch_len; ++j) out.patches(p, j) = padded_at(start + j);
    }
    return out;
}

}  // namespace rwkvts
