#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <string>

#include "rwkvts/data_io.hpp"

using namespace rwkvts;

namespace {

TimeSeries parse(const std::string& text) {
    std::istringstream in(text);
    return parse_csv(in, "mem.csv");
}

std::string error_of(const std::string& text) {
    try {
        parse(text);
    } catch (const DataError& e) {
        return e.what();
    }
    return "";
}

TimeSeries ramp(std::size_t n, std::size_t channels = 1) {
    TimeSeries ts;
    ts.values = Matrix<double>(n, channels);
    for (std::size_t c = 0; c < channels; ++c) ts.names.push_back("c" + std::to_string(c));
    for (std::size_t i = 0; i < n; ++i) {
        ts.timestamps.push_back(std::to_string(i));
        for (std::size_t c = 0; c < channels; ++c) ts.values(i, c) = static_cast<double>(i * 10 + c);
    }
    return ts;
}

}  // namespace

TEST(Csv, ThreeRowFixture) {
    const auto ts = parse("date,a,b\nt0,1,2\nt1,3.5,-4\nt2,1e3,0\n");
    EXPECT_EQ(ts.time_column, "date");
    EXPECT_EQ(ts.names, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(ts.timestamps, (std::vector<std::string>{"t0", "t1", "t2"}));
    EXPECT_EQ(ts.values, Matrix<double>::from_rows({{1, 2}, {3.5, -4}, {1000, 0}}));
}

TEST(Csv, HeaderOnlyIsDataError) {
    EXPECT_THROW(parse("date,a\n"), DataError);
    EXPECT_THROW(parse(""), DataError);
    EXPECT_THROW(parse("date\n1\n"), DataError);
}

TEST(Csv, ColumnCountMismatchNamesLine) {
    const std::string msg = error_of("date,a,b\nt0,1,2\nt1,3\n");
    EXPECT_NE(msg.find("mem.csv:3"), std::string::npos) << msg;
}

TEST(Csv, NonNumericNamesColumn) {
    const std::string msg = error_of("date,a,b\nt0,1,oops\n");
    EXPECT_NE(msg.find("'b'"), std::string::npos) << msg;
    EXPECT_NE(error_of("date,a\nt0,nan\n"), "");
}

TEST(Csv, MissingFileIsIoError) {
    EXPECT_THROW(load_csv("/nonexistent/dir/file.csv"), IoError);
}

TEST(Csv, RoundTripIsBitExact) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0, 1e3);
    TimeSeries ts = ramp(50, 3);
    for (auto& x : ts.values.values()) x = n(rng) * std::pow(10.0, static_cast<double>(rng() % 20) - 10);
    std::ostringstream out;
    write_csv(out, ts);
    const auto back = parse(out.str());
    EXPECT_EQ(back.values, ts.values);
    EXPECT_EQ(back.names, ts.names);
    EXPECT_EQ(back.timestamps, ts.timestamps);
}

TEST(Split, FractionsExample) {
    const Dataset ds = chronological_split(ramp(100), SplitRule::fractions(0.6, 0.2, 0.2));
    EXPECT_EQ(ds.train.end, 60u);
    EXPECT_EQ(ds.val.begin, 60u);
    EXPECT_EQ(ds.val.end, 80u);
    EXPECT_EQ(ds.test.begin, 80u);
    EXPECT_EQ(ds.test.end, 100u);
    EXPECT_TRUE(ds.warnings.empty());
}

TEST(Split, AllTrainWarnsAboutEmptySplits) {
    const Dataset ds = chronological_split(ramp(100), SplitRule::fractions(1, 0, 0));
    EXPECT_EQ(ds.train.size(), 100u);
    EXPECT_TRUE(ds.val.empty());
    EXPECT_TRUE(ds.test.empty());
    EXPECT_EQ(ds.warnings.size(), 2u);
}

TEST(Split, InvalidFractions) {
    EXPECT_THROW(chronological_split(ramp(100), SplitRule::fractions(0.8, 0.2, 0.2)), ConfigError);
    EXPECT_THROW(chronological_split(ramp(100), SplitRule::fractions(-0.1, 0.2, 0.2)), ConfigError);
    EXPECT_THROW(chronological_split(ramp(3), SplitRule::fractions(0.1, 0.1, 0.1)), DataError);
}

TEST(Split, EttMonthRule) {
    const auto rule = default_split_rule("ETTh1");
    ASSERT_EQ(rule.kind, SplitRule::Kind::months);
    EXPECT_EQ(rule.rows_per_month, 720u);
    EXPECT_EQ(default_split_rule("ETTm2").rows_per_month, 2880u);
    EXPECT_EQ(default_split_rule("weather").kind, SplitRule::Kind::fractions);
    const Dataset ds = chronological_split(ramp(17420), rule);
    EXPECT_EQ(ds.train.end, 8640u);
    EXPECT_EQ(ds.val.end, 11520u);
    EXPECT_EQ(ds.test.end, 14400u);
    EXPECT_THROW(chronological_split(ramp(14399), rule), DataError);
}

TEST(Windows, CountsFollowClosedForm) {
    for (std::size_t L : {1u, 4u, 9u})
        for (std::size_t T : {1u, 3u})
            for (std::size_t k : {0u, 1u, 7u}) {
                const Dataset ds = chronological_split(ramp(L + T + k), SplitRule::fractions(1, 0, 0));
                EXPECT_EQ(make_windows<double>(ds, Split::train, L, T).samples.size(), k + 1);
                for (std::size_t s : {2u, 3u}) {
                    EXPECT_EQ(make_windows<double>(ds, Split::train, L, T, s).samples.size(), k / s + 1);
                }
            }
}

TEST(Windows, TooShortSplitWarns) {
    const Dataset ds = chronological_split(ramp(10), SplitRule::fractions(1, 0, 0));
    const auto w = make_windows<double>(ds, Split::train, 8, 3);
    EXPECT_TRUE(w.samples.empty());
    EXPECT_FALSE(w.warning.empty());
    EXPECT_THROW(make_windows<double>(ds, Split::train, 0, 3), ConfigError);
}

TEST(Windows, ContentsAndNoLeakage) {
    const Dataset ds = chronological_split(ramp(200, 2), SplitRule::fractions(0.7, 0.1, 0.2));
    for (Split s : {Split::train, Split::val, Split::test}) {
        const IndexRange r = ds.range(s);
        const auto within = make_windows<double>(ds, s, 12, 4);
        for (const auto& smp : within.samples) {
            EXPECT_GE(smp.origin, r.begin);
            EXPECT_LE(smp.target_end(), r.end);
            for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(smp.input(i, 1), ds.series.values(smp.origin + i, 1));
            for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(smp.target(i, 0), ds.series.values(smp.origin + 12 + i, 0));
        }
        const auto back = make_windows<double>(ds, s, 12, 4, 1, WindowContext::reach_back);
        for (const auto& smp : back.samples) {
            EXPECT_GE(smp.target_begin(), r.begin);
            EXPECT_LE(smp.target_end(), r.end);
            EXPECT_GE(smp.origin + 12, r.begin);
        }
    }
}

TEST(Windows, ReachBackStartsTargetsAtBoundary) {
    const Dataset ds = chronological_split(ramp(100), SplitRule::fractions(0.6, 0.2, 0.2));
    const auto w = make_windows<double>(ds, Split::test, 10, 5, 1, WindowContext::reach_back);
    ASSERT_FALSE(w.samples.empty());
    EXPECT_EQ(w.samples.front().target_begin(), 80u);
    EXPECT_EQ(w.samples.back().target_end(), 100u);
    EXPECT_EQ(w.samples.size(), 16u);
}

TEST(Standardizer, FitsOnRangeOnly) {
    TimeSeries ts = ramp(10);
    const Standardizer s = Standardizer::fit(ts, {0, 4});  // 0,10,20,30
    EXPECT_DOUBLE_EQ(s.mean[0], 15.0);
    EXPECT_NEAR(s.std[0], std::sqrt(125.0), 1e-12);
    const auto z = s.apply(ts);
    EXPECT_NEAR(z.values(0, 0), -15.0 / std::sqrt(125.0), 1e-12);
    EXPECT_THROW(Standardizer::fit(ts, {3, 3}), DataError);
}

TEST(SyntheticSine, PeriodAndPhase) {
    const auto ts = synthetic_sine(48, 24, 2);
    EXPECT_EQ(ts.channels(), 2u);
    EXPECT_NEAR(ts.values(0, 0), 0.0, 1e-15);
    EXPECT_NEAR(ts.values(6, 0), 1.0, 1e-15);
    EXPECT_NEAR(ts.values(24, 1), ts.values(0, 1), 1e-12);
    EXPECT_NEAR(ts.values(0, 1), std::sin(1.0), 1e-15);
}
