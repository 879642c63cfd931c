#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "rwkvts/error.hpp"
#include "rwkvts/matrix.hpp"

namespace rwkvts {

/// L x M observations with channel names and the (unparsed) timestamp column.
struct TimeSeries {
    std::string time_column = "date";
    std::vector<std::string> names;
    std::vector<std::string> timestamps;  // may be empty
    Matrix<double> values;                // rows = time, cols = channels

    std::size_t length() const noexcept { return values.rows(); }
    std::size_t channels() const noexcept { return values.cols(); }
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline bool parse_double(std::string_view s, double& out) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

/// Parses CSV text: header row mandatory, first column is a timestamp, the rest numeric.
inline TimeSeries parse_csv(std::istream& in, const std::string& source = "<stream>") {
    std::string line;
    if (!std::getline(in, line)) throw DataError(source + ": missing header row");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
    const auto header = detail::split_commas(detail::trim(line));
    if (header.size() < 2) throw DataError(source + ": header needs a timestamp column and at least one channel");
    TimeSeries ts;
    ts.time_column = std::string(detail::trim(header[0]));
    for (std::size_t i = 1; i < header.size(); ++i) ts.names.emplace_back(detail::trim(header[i]));

    std::vector<double> data;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view body = detail::trim(line);
        if (body.empty()) continue;
        const auto cells = detail::split_commas(body);
        if (cells.size() != header.size()) {
            throw DataError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                            " columns, found " + std::to_string(cells.size()));
        }
        ts.timestamps.emplace_back(detail::trim(cells[0]));
        for (std::size_t c = 1; c < cells.size(); ++c) {
            double v = 0;
            if (!detail::parse_double(cells[c], v) || !std::isfinite(v)) {
                throw DataError(source + ":" + std::to_string(line_no) + ": non-numeric value in column '" +
                                ts.names[c - 1] + "'");
            }
            data.push_back(v);
        }
    }
    if (ts.timestamps.empty()) throw DataError(source + ": no data rows");
    ts.values = Matrix<double>(ts.timestamps.size(), ts.names.size(), std::move(data));
    return ts;
}

inline TimeSeries load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    return parse_csv(in, path);
}

/// Writes shortest round-trip decimal representations, so reloading is bit-exact.
inline void write_csv(std::ostream& out, const TimeSeries& ts) {
    out << ts.time_column;
    for (const auto& n : ts.names) out << ',' << n;
    out << '\n';
    for (std::size_t i = 0; i < ts.length(); ++i) {
        out << (i < ts.timestamps.size() ? ts.timestamps[i] : std::to_string(i));
        for (std::size_t c = 0; c < ts.channels(); ++c) out << ',' << detail::format_double(ts.values(i, c));
        out << '\n';
    }
}

inline void write_csv(const std::string& path, const TimeSeries& ts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    write_csv(out, ts);
    if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct IndexRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const noexcept { return end - begin; }
    bool empty() const noexcept { return end <= begin; }
};

enum class Split { train, val, test };

struct SplitRule {
    enum class Kind { fractions, months } kind = Kind::fractions;
    double train = 0.7, val = 0.1, test = 0.2;
    std::size_t rows_per_month = 0;

    static SplitRule fractions(double tr, double va, double te) { return {Kind::fractions, tr, va, te, 0}; }
    /// 12 / 4 / 4 months of `rows_per_month` rows each.
    static SplitRule months(std::size_t rows_per_month) { return {Kind::months, 0, 0, 0, rows_per_month}; }
};

/// ETTh* -> 30-day months of hourly rows, ETTm* -> 15-minute rows, otherwise 0.7/0.1/0.2.
inline SplitRule default_split_rule(std::string_view dataset_name) {
    if (dataset_name.rfind("ETTh", 0) == 0) return SplitRule::months(30 * 24);
    if (dataset_name.rfind("ETTm", 0) == 0) return SplitRule::months(30 * 24 * 4);
    return SplitRule::fractions(0.7, 0.1, 0.2);
}

struct Dataset {
    std::string name;
    TimeSeries series;
    IndexRange train, val, test;
    std::vector<std::string> warnings;

    const IndexRange& range(Split s) const noexcept {
        return s == Split::train ? train : (s == Split::val ? val : test);
    }
};

inline Dataset chronological_split(TimeSeries ts, const SplitRule& rule, std::string name = "") {
    const std::size_t n = ts.length();
    Dataset ds;
    ds.name = std::move(name);
    std::size_t a = 0, b = 0, c = 0;
    if (rule.kind == SplitRule::Kind::months) {
        const std::size_t m = rule.rows_per_month;
        if (m == 0) throw ConfigError("chronological_split: rows_per_month must be >= 1");
        a = 12 * m, b = 16 * m, c = 20 * m;
        if (n < c) {
            throw DataError("chronological_split: series of " + std::to_string(n) + " rows is shorter than the " +
                            std::to_string(c) + " rows of a 12/4/4-month split");
        }
    } else {
        for (double f : {rule.train, rule.val, rule.test}) {
            if (f < 0) throw ConfigError("chronological_split: negative fraction");
        }
        if (rule.train + rule.val + rule.test > 1.0 + 1e-9) throw ConfigError("chronological_split: fractions sum above 1");
        const double len = static_cast<double>(n);
        a = static_cast<std::size_t>(std::floor(len * rule.train + 1e-9));
        b = static_cast<std::size_t>(std::floor(len * (rule.train + rule.val) + 1e-9));
        c = static_cast<std::size_t>(std::floor(len * (rule.train + rule.val + rule.test) + 1e-9));
        c = std::min(c, n);
        b = std::min(b, c);
        a = std::min(a, b);
        if (a == 0) throw DataError("chronological_split: series too short for a training split");
    }
    ds.train = {0, a};
    ds.val = {a, b};
    ds.test = {b, c};
    if (ds.val.empty()) ds.warnings.push_back("validation split is empty");
    if (ds.test.empty()) ds.warnings.push_back("test split is empty");
    ds.series = std::move(ts);
    return ds;
}

/// Per-channel z-scoring with statistics fitted on one index range.
struct Standardizer {
    std::vector<double> mean, std;

    static Standardizer fit(const TimeSeries& ts, IndexRange range) {
        if (range.empty()) throw DataError("Standardizer: empty fitting range");
        Standardizer s;
        for (std::size_t c = 0; c < ts.channels(); ++c) {
            double sum = 0;
            for (std::size_t i = range.begin; i < range.end; ++i) sum += ts.values(i, c);
            const double mu = sum / static_cast<double>(range.size());
            double sq = 0;
            for (std::size_t i = range.begin; i < range.end; ++i) sq += (ts.values(i, c) - mu) * (ts.values(i, c) - mu);
            s.mean.push_back(mu);
            s.std.push_back(std::max(std::sqrt(sq / static_cast<double>(range.size())), 1e-12));
        }
        return s;
    }

    TimeSeries apply(TimeSeries ts) const {
        for (std::size_t i = 0; i < ts.length(); ++i)
            for (std::size_t c = 0; c < ts.channels(); ++c) ts.values(i, c) = (ts.values(i, c) - mean[c]) / std[c];
        return ts;
    }
};

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

template <std::floating_point T>
struct Sample {
    Matrix<T> input;   // L x M
    Matrix<T> target;  // T x M, immediately after input
    std::size_t origin = 0;  // series index of the first input row

    std::size_t target_begin() const noexcept { return origin + input.rows(); }
    std::size_t target_end() const noexcept { return target_begin() + target.rows(); }
};

/// within_split: inputs and targets both inside the split.
/// reach_back: targets inside the split, inputs may use up to L rows
/// immediately before it (the first target can start at the split boundary).
enum class WindowContext { within_split, reach_back };

template <std::floating_point T>
struct WindowSet {
    std::vector<Sample<T>> samples;
    std::string warning;  // set when the split cannot hold a single window
};

template <std::floating_point T>
WindowSet<T> make_windows(const Dataset& ds, Split split, std::size_t input_len, std::size_t horizon,
                          std::size_t stride = 1, WindowContext context = WindowContext::within_split) {
    if (input_len == 0 || horizon == 0 || stride == 0) throw ConfigError("make_windows: lengths and stride must be >= 1");
    const IndexRange r = ds.range(split);
    WindowSet<T> out;
    const std::size_t first = context == WindowContext::reach_back && r.begin >= input_len ? r.begin - input_len
                              : context == WindowContext::reach_back                   ? 0
                                                                                       : r.begin;
    if (r.empty() || r.end < first + input_len + horizon) {
        out.warning = "split of " + std::to_string(r.size()) + " rows is too short for input " +
                      std::to_string(input_len) + " + horizon " + std::to_string(horizon);
        return out;
    }
    const Matrix<double>& v = ds.series.values;
    const std::size_t M = v.cols();
    for (std::size_t s = first; s + input_len + horizon <= r.end; s += stride) {
        Sample<T> smp{Matrix<T>(input_len, M), Matrix<T>(horizon, M), s};
        for (std::size_t i = 0; i < input_len; ++i)
            for (std::size_t c = 0; c < M; ++c) smp.input(i, c) = static_cast<T>(v(s + i, c));
        for (std::size_t i = 0; i < horizon; ++i)
            for (std::size_t c = 0; c < M; ++c) smp.target(i, c) = static_cast<T>(v(s + input_len + i, c));
        out.samples.push_back(std::move(smp));
    }
    return out;
}

/// Noiseless multi-channel sine series, channel c phase-shifted by c radians.
inline TimeSeries synthetic_sine(std::size_t length, double period, std::size_t channels = 1) {
    TimeSeries ts;
    ts.values = Matrix<double>(length, channels);
    for (std::size_t c = 0; c < channels; ++c) ts.names.push_back("sine" + std::to_string(c));
    for (std::size_t i = 0; i < length; ++i) {
        ts.timestamps.push_back(std::to_string(i));
        for (std::size_t c = 0; c < channels; ++c) {
            ts.values(i, c) = std::sin(2.0 * std::numbers::pi * static_cast<double>(i) / period + static_cast<double>(c));
        }
    }
    return ts;
}

}  // namespace rwkvts
