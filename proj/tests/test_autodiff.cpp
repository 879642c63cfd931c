#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "rwkvts/autodiff.hpp"

using namespace rwkvts;
using ad::Tape;
using ad::Var;

namespace {

Matrix<double> scalar(double v) { return Matrix<double>(1, 1, v); }

std::vector<double> random_theta(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0, scale);
    std::vector<double> out(n);
    for (auto& x : out) x = d(rng);
    return out;
}

/// Slices theta (1 x n) into a rows x cols leaf-derived variable via reshape of a prefix.
Var take(Tape<double>& t, Var theta, std::size_t offset, std::size_t rows, std::size_t cols) {
    const auto& v = t.value(theta);
    // Selection by a constant 0/1 matrix keeps the slice differentiable.
    Matrix<double> sel(v.cols(), rows * cols);
    for (std::size_t i = 0; i < rows * cols; ++i) sel(offset + i, i) = 1;
    return ad::reshape(t, ad::matmul(t, theta, t.constant(sel)), rows, cols);
}

Var sum_all(Tape<double>& t, Var x) {
    const auto& v = t.value(x);
    return ad::scale(t, ad::mean(t, x), static_cast<double>(v.size()));
}

Var weighted_sum(Tape<double>& t, Var x, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    Matrix<double> w(t.value(x).rows(), t.value(x).cols());
    for (auto& e : w.values()) e = d(rng);
    return sum_all(t, ad::mul(t, x, t.constant(w)));
}

}  // namespace

TEST(Backward, Square) {
    Tape<double> t;
    const Var x = t.leaf(scalar(3));
    t.backward(ad::mul(t, x, x));
    EXPECT_EQ(t.grad(x)[0], 6);
}

TEST(Backward, ConstantFunctionHasZeroGradient) {
    Tape<double> t;
    const Var x = t.leaf(scalar(3));
    const Var c = t.constant(scalar(7));
    t.backward(ad::scale(t, c, 2.0));
    EXPECT_EQ(t.grad(x)[0], 0);
}

TEST(Backward, Product) {
    Tape<double> t;
    const Var x = t.leaf(scalar(2));
    const Var y = t.leaf(scalar(5));
    t.backward(ad::mul(t, x, y));
    EXPECT_EQ(t.grad(x)[0], 5);
    EXPECT_EQ(t.grad(y)[0], 2);
}

TEST(Backward, NonScalarOutputIsContractError) {
    Tape<double> t;
    const Var x = t.leaf(Matrix<double>(2, 2, 1.0));
    EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, VisitsEveryNodeOnceAndUnusedLeafGetsZero) {
    Tape<double> t;
    const Var a = t.leaf(scalar(1.5));
    const Var unused = t.leaf(Matrix<double>(2, 3, 4.0));
    const Var b = ad::mul(t, a, a);
    const Var c = ad::add(t, b, a);
    EXPECT_EQ(t.backward(c), t.size());
    EXPECT_EQ(t.grad(unused), Matrix<double>(2, 3));
    EXPECT_DOUBLE_EQ(t.grad(a)[0], 2 * 1.5 + 1);
}

TEST(Backward, RepeatedBackwardResetsGradients) {
    Tape<double> t;
    const Var x = t.leaf(scalar(3));
    const Var y = ad::mul(t, x, x);
    t.backward(y);
    t.backward(y);
    EXPECT_EQ(t.grad(x)[0], 6);
}

TEST(GradCheck, QuadraticIsNearlyExact) {
    std::mt19937_64 rng(1);
    const auto theta = random_theta(6, rng);
    const double err = ad::grad_check([](Tape<double>& t, Var x) { return sum_all(t, ad::mul(t, x, x)); }, theta);
    EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, LinearAtRoundoff) {
    std::mt19937_64 rng(2);
    const auto theta = random_theta(5, rng);
    const double err = ad::grad_check([](Tape<double>& t, Var x) { return weighted_sum(t, x, 9); }, theta);
    EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, NonFiniteEvaluationIsNumericError) {
    const std::vector<double> theta{0.0};
    auto f = [](const std::vector<double>& th) { return th[0] > 0 ? std::nan("") : 0.0; };
    EXPECT_THROW(ad::gradient_error({0.0}, f, theta, 1e-5), NumericError);
    EXPECT_THROW(ad::gradient_error({0.0}, f, theta, 0.0), ContractError);
}

/// Every primitive with a backward rule passes grad_check < 1e-6 at 10 random points.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, TenRandomPoints) {
    const int which = GetParam();
    for (int point = 0; point < 10; ++point) {
        std::mt19937_64 rng(100 * which + point);
        std::vector<double> theta = random_theta(24, rng, 0.8);
        auto f = [&](Tape<double>& t, Var th) -> Var {
            const Var a = take(t, th, 0, 2, 4);
            const Var b = take(t, th, 8, 4, 2);
            const Var c = take(t, th, 8, 2, 4);
            const Var row = take(t, th, 16, 1, 4);
            switch (which) {
                case 0: return weighted_sum(t, ad::matmul(t, a, b), 1);
                case 1: return weighted_sum(t, ad::add(t, a, c), 2);
                case 2: return weighted_sum(t, ad::sub(t, a, c), 3);
                case 3: return weighted_sum(t, ad::mul(t, a, c), 4);
                case 4: return weighted_sum(t, ad::scale(t, a, -1.7), 5);
                case 5: return weighted_sum(t, ad::add_row(t, a, row), 6);
                case 6: return weighted_sum(t, ad::sigmoid(t, a), 7);
                case 7: return weighted_sum(t, ad::silu(t, a), 8);
                case 8: return weighted_sum(t, ad::sq_relu(t, a), 9);
                case 9: return weighted_sum(t, ad::decay(t, a), 10);
                case 10: return weighted_sum(t, ad::group_norm(t, a, row, take(t, th, 20, 1, 4), 2), 11);
                case 11: return weighted_sum(t, ad::layer_norm(t, a, row, take(t, th, 20, 1, 4)), 12);
                case 12: return weighted_sum(t, ad::token_shift(t, take(t, th, 0, 4, 4), row, 2), 13);
                case 13: return weighted_sum(t, ad::reshape(t, a, 4, 2), 14);
                case 14: return weighted_sum(t, ad::row_affine(t, a, {1.5, -0.5}, {0.2, 3.0}), 15);
                case 15: return ad::mean(t, a);
                default: return ad::mse(t, a, c);
            }
        };
        EXPECT_LT(ad::grad_check(f, theta), 1e-6) << "primitive case " << which << " point " << point;
    }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradients, ::testing::Range(0, 17));

TEST(Fault, ScalesTheTargetedRuleOnly) {
    Tape<double> t;
    t.set_fault(Tape<double>::Fault{ad::Op::scale, 2.0});
    const Var x = t.leaf(scalar(1));
    const Var y = ad::add(t, ad::scale(t, x, 3.0), x);
    t.backward(y);
    EXPECT_EQ(t.grad(x)[0], 2.0 * 3.0 + 1.0);
    EXPECT_EQ(t.fault_factor(ad::Op::add), 1.0);
}

TEST(OpNames, RoundTrip) {
    for (int i = 0; i <= static_cast<int>(ad::Op::wkv); ++i) {
        const auto op = static_cast<ad::Op>(i);
        EXPECT_EQ(ad::op_from_name(ad::op_name(op)), op);
    }
    EXPECT_FALSE(ad::op_from_name("nope").has_value());
}

TEST(Tape, ValueBytesCountsIntermediates) {
    Tape<double> t;
    const Var x = t.leaf(Matrix<double>(2, 2, 1.0));
    EXPECT_EQ(t.value_bytes(true), 0u);
    ad::add(t, x, x);
    EXPECT_EQ(t.value_bytes(true), 4 * sizeof(double));
    EXPECT_EQ(t.value_bytes(false), 8 * sizeof(double));
}
