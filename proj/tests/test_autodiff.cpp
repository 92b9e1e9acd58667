#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "parco/autodiff.hpp"
#include "parco/gradcheck.hpp"
#include "parco/rng.hpp"

using namespace parco;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    Tensor t(r, c);
    for (double& v : t.values()) v = uniform(rng, lo, hi);
    return t;
}

double fd_max_error(const ad::LossBuilder& fn, std::vector<Tensor> params, std::uint64_t seed) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < params.size(); ++i) names.push_back("p" + std::to_string(i));
    return ad::finite_difference_check(fn, params, names, 100, gradcheck::kStep, seed).max_rel_err;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
    Tensor t{{1, 2, 3}, {4, 5, 6}};
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
    EXPECT_EQ(t(1, 2), 6.0);
    EXPECT_EQ(Tensor::scalar(2.5).item(), 2.5);
    EXPECT_THROW(t.item(), ad::ShapeError);
}

TEST(Autodiff, MatmulMatchesHandProduct) {
    Tape tape;
    Var a = tape.leaf({{1, 2}, {3, 4}});
    Var b = tape.leaf({{5, 6}, {7, 8}});
    const Tensor& c = ad::matmul(a, b).value();
    EXPECT_EQ(c(0, 0), 19.0);
    EXPECT_EQ(c(0, 1), 22.0);
    EXPECT_EQ(c(1, 0), 43.0);
    EXPECT_EQ(c(1, 1), 50.0);
    const Tensor& ct = ad::matmul(a, b, ad::Trans::b).value();
    EXPECT_EQ(ct(0, 0), 17.0);
    EXPECT_EQ(ct(1, 0), 39.0);
}

TEST(Autodiff, ShapeMismatchThrows) {
    Tape tape;
    Var a = tape.leaf(Tensor(2, 3));
    Var b = tape.leaf(Tensor(2, 3));
    EXPECT_THROW(ad::matmul(a, b), ad::ShapeError);
    EXPECT_THROW(ad::add(a, tape.leaf(Tensor(3, 2))), ad::ShapeError);
    EXPECT_THROW(ad::mul(a, tape.leaf(Tensor(1, 3))), ad::ShapeError);
}

TEST(Autodiff, MultiplyGradientIsOtherOperand) {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(3.0));
    Var y = tape.leaf(Tensor::scalar(-2.0));
    tape.backward(ad::mul(x, y));
    EXPECT_EQ(tape.grad(x).item(), -2.0);
    EXPECT_EQ(tape.grad(y).item(), 3.0);
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(1.5));
    Var y = ad::add(ad::mul(x, x), x);
    tape.backward(y);
    EXPECT_DOUBLE_EQ(tape.grad(x).item(), 2.0 * 1.5 + 1.0);
}

TEST(Autodiff, UnreachedNodeHasZeroGradient) {
    Tape tape;
    Var x = tape.leaf(Tensor(2, 2, 1.0));
    Var unused = tape.leaf(Tensor(3, 1, 4.0));
    tape.backward(ad::reduce_sum(x));
    const Tensor g = tape.grad(unused);
    EXPECT_EQ(g.rows(), 3u);
    for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
    Rng rng(3);
    Tape tape;
    const Tensor& s = ad::softmax_rows(tape.leaf(random(rng, 5, 7, -30.0, 30.0))).value();
    for (std::size_t r = 0; r < 5; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 7; ++c) {
            EXPECT_GE(s(r, c), 0.0);
            sum += s(r, c);
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Autodiff, ReduceMaxAxisGroupsAndTies) {
    Tape tape;
    Var a = tape.leaf({{1, 5}, {3, 5}, {2, 0}, {-1, 4}});
    Var m = ad::reduce_max_axis(a, 2);
    EXPECT_EQ(m.value()(0, 0), 3.0);
    EXPECT_EQ(m.value()(0, 1), 5.0);
    EXPECT_EQ(m.value()(1, 0), 2.0);
    EXPECT_EQ(m.value()(1, 1), 4.0);
    tape.backward(ad::reduce_sum(m));
    const Tensor g = tape.grad(a);
    EXPECT_EQ(g(0, 1), 1.0);  // first of the tied rows
    EXPECT_EQ(g(1, 1), 0.0);
    EXPECT_EQ(g(1, 0), 1.0);
}

TEST(Autodiff, L2NormOfZeroRowHasZeroGradient) {
    Tape tape;
    Var a = tape.leaf({{0, 0, 0}, {3, 4, 0}});
    Var n = ad::l2_norm_rows(a);
    EXPECT_EQ(n.value()(1, 0), 5.0);
    tape.backward(ad::reduce_sum(n));
    const Tensor g = tape.grad(a);
    EXPECT_EQ(g(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(g(1, 0), 0.6);
    EXPECT_TRUE(g.all_finite());
}

TEST(Autodiff, ClampMaxBlocksGradient) {
    Tape tape;
    Var a = tape.leaf({{1.0, 30.0}});
    tape.backward(ad::reduce_sum(ad::clamp_max(a, 20.0)));
    EXPECT_EQ(tape.grad(a)(0, 0), 1.0);
    EXPECT_EQ(tape.grad(a)(0, 1), 0.0);
}

TEST(Autodiff, ValuesFiniteInsideDomains) {
    Rng rng(5);
    Tape tape;
    Var x = tape.leaf(random(rng, 6, 4, 0.01, 3.0));
    for (Var y : {ad::sqrt(x), ad::pow_scalar(x, 2.5), ad::exp(x), ad::div(x, x), ad::softmax_rows(x)})
        EXPECT_TRUE(y.value().all_finite());
}

// Every primitive against central differences: the suite's autodiff cases.
TEST(Autodiff, PrimitivesMatchFiniteDifferences) {
    gradcheck::SuiteOptions opts;
    opts.module = "autodiff";
    opts.seed = 11;
    const auto cases = gradcheck::run_suite(opts);
    EXPECT_GE(cases.size(), 25u);
    for (const auto& c : cases) {
        EXPECT_LT(c.report.max_rel_err, 1e-4) << c.name;
        EXPECT_EQ(c.report.probe_count, 100u) << c.name;
    }
}

TEST(Autodiff, RandomMlpGradientsMatchFiniteDifferences) {
    Rng rng(7);
    const Tensor x = random(rng, 8, 5);
    std::vector<Tensor> params{random(rng, 16, 5), random(rng, 1, 16), random(rng, 16, 16),
                               random(rng, 1, 16), random(rng, 3, 16),  random(rng, 1, 3)};
    auto fn = [&x](Tape& tape, std::span<const Var> p) {
        Var h = ad::sin(ad::add(ad::matmul(tape.constant(x), p[0], ad::Trans::b), p[1]));
        h = ad::exp(ad::scale(ad::add(ad::matmul(h, p[2], ad::Trans::b), p[3]), 0.5));
        Var y = ad::add(ad::matmul(h, p[4], ad::Trans::b), p[5]);
        return ad::reduce_mean(ad::square(y));
    };
    EXPECT_LT(fd_max_error(fn, params, 3), 1e-4);
}

TEST(Autodiff, RelativeErrorFloor) {
    EXPECT_EQ(ad::relative_error(0.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(ad::relative_error(1.0, 0.5), 0.5);
    EXPECT_DOUBLE_EQ(ad::relative_error(1e-12, 0.0), 1e-12 / ad::kFdFloor);
}

TEST(Autodiff, FiniteDifferenceCheckLeavesParamsUntouched) {
    std::vector<Tensor> params{Tensor{{0.3, -0.7}}};
    const Tensor before = params[0];
    const std::vector<std::string> names{"w"};
    auto fn = [](Tape&, std::span<const Var> p) { return ad::reduce_sum(ad::square(p[0])); };
    const ad::GradReport r = ad::finite_difference_check(fn, params, names, 10, 1e-4, 1);
    EXPECT_EQ(r.probe_count, 10u);
    EXPECT_EQ(params[0](0, 0), before(0, 0));
    EXPECT_EQ(params[0](0, 1), before(0, 1));
    EXPECT_LT(r.max_rel_err, 1e-9);
}

// ---- dual propagation ------------------------------------------------------

TEST(Dual, SingleSineJacobianIsClosedForm) {
    const double omega0 = 8.0;
    const Tensor w{{0.3, -0.2, 0.5}};
    const Tensor x{{0.1, 0.4, -0.3}, {-0.6, 0.2, 0.9}};
    Tape tape;
    Var wv = tape.leaf(w);
    const std::vector<ad::DualLayer> layers{{ad::OpKind::matmul, wv, {}, {}, omega0}, {ad::OpKind::sin}};
    const ad::DualVar d = ad::dual_forward(tape, x, layers);
    const Tensor g = d.gradient().value();
    for (std::size_t r = 0; r < 2; ++r) {
        double dot = 0.0;
        for (std::size_t k = 0; k < 3; ++k) dot += w(0, k) * x(r, k);
        EXPECT_NEAR(d.value.value()(r, 0), std::sin(omega0 * dot), 1e-15);
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(g(r, k), omega0 * w(0, k) * std::cos(omega0 * dot), 1e-13);
    }
}

TEST(Dual, DeepSirenJacobianMatchesFiniteDifferences) {
    gradcheck::SuiteOptions opts;
    opts.module = "dual";
    opts.seed = 2;
    for (const auto& c : gradcheck::run_suite(opts)) EXPECT_LT(c.report.max_rel_err, 1e-4) << c.name;
}

TEST(Dual, RejectsOpsWithoutJacobianRule) {
    Tape tape;
    const std::vector<ad::DualLayer> layers{{ad::OpKind::relu}};
    EXPECT_THROW(ad::dual_forward(tape, Tensor(2, 3), layers), ad::UnsupportedOp);
    const std::vector<ad::DualLayer> no_weight{{ad::OpKind::matmul}};
    EXPECT_THROW(ad::dual_forward(tape, Tensor(2, 3), no_weight), std::invalid_argument);
}

TEST(Dual, GradientNeedsColumnValue) {
    Tape tape;
    Var w = tape.leaf(Tensor(4, 3, 0.1));
    const std::vector<ad::DualLayer> layers{{ad::OpKind::matmul, w}};
    const ad::DualVar d = ad::dual_forward(tape, Tensor(2, 3, 0.5), layers);
    EXPECT_THROW(d.gradient(), ad::ShapeError);
}

TEST(Dual, LinearMapJacobianIsWeight) {
    Tape tape;
    const Tensor w{{2.0, -1.0, 0.5}};
    const std::vector<ad::DualLayer> layers{{ad::OpKind::matmul, tape.leaf(w), tape.leaf(Tensor{{std::numbers::pi}})}};
    const Tensor g = ad::dual_forward(tape, Tensor(3, 3, 0.7), layers).gradient().value();
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(g(r, k), w(0, k));
}
