#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "sopool/autograd.hpp"
#include "sopool/gradcheck.hpp"
#include "sopool/matrix.hpp"
#include "sopool/optim.hpp"
#include "sopool/rng.hpp"

using namespace sopool;

namespace {

Matrix brute_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

Matrix random(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.data()) x = rng.uniform(-1.0, 1.0);
  return m;
}

}  // namespace

TEST(Matrix, ProductsMatchBruteForce) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random(1 + rng.below(5), 1 + rng.below(5), rng);
    const Matrix b = random(a.cols(), 1 + rng.below(5), rng);
    EXPECT_LT(max_abs_diff(matmul(a, b), brute_matmul(a, b)), 1e-14);
    EXPECT_LT(max_abs_diff(matmul_tn(transpose(a), b), brute_matmul(a, b)), 1e-14);
    EXPECT_LT(max_abs_diff(matmul_nt(a, transpose(b)), brute_matmul(a, b)), 1e-14);
  }
}

TEST(Matrix, ShapeErrors) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1.0}), ShapeError);
  EXPECT_THROW((Matrix{{1.0, 2.0}, {3.0}}), ShapeError);
  Matrix a(2, 2);
  EXPECT_THROW(a += Matrix(3, 1), ShapeError);
}

TEST(Rng, DeterministicAndSplitsDiffer) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Rng c(42);
  EXPECT_NE(c.split(0).next(), c.split(1).next());
  EXPECT_EQ(c.split(3).next(), Rng(42).split(3).next());
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(c.below(7), 7u);
  }
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(5);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
  rng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
}

TEST(Autograd, ForwardValues) {
  ag::Tape t;
  ag::Var x = t.constant({{0.0, std::log(2.0)}});
  const Matrix s = ag::softmax_columns(ag::transpose(x)).value();
  EXPECT_NEAR(s[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 2.0 / 3.0, 1e-15);

  ag::Var m = t.constant({{1.0, -2.0}, {3.0, 0.0}});
  EXPECT_EQ(ag::relu(m).value(), (Matrix{{1.0, 0.0}, {3.0, 0.0}}));
  EXPECT_EQ(ag::column_sum(m).value(), (Matrix{{4.0, -2.0}}));
  EXPECT_EQ(ag::column_mean(m).value(), (Matrix{{2.0, -1.0}}));
  EXPECT_EQ(ag::column_max(m).value(), (Matrix{{3.0, 0.0}}));
  EXPECT_EQ(ag::center_columns(m).value(), (Matrix{{-1.0, -1.0}, {1.0, 1.0}}));
  EXPECT_EQ(ag::flatten(m).value(), (Matrix{{1.0, -2.0, 3.0, 0.0}}));
  EXPECT_EQ(ag::sum(m).value()[0], 2.0);
  EXPECT_EQ(ag::slice_rows(m, 1, 1).value(), (Matrix{{3.0, 0.0}}));
  std::vector<ag::Var> parts{m, m};
  EXPECT_EQ(ag::hstack(parts).value().cols(), 4u);
  EXPECT_EQ(ag::vstack(parts).value().rows(), 4u);
}

TEST(Autograd, CrossEntropyMatchesLogSumExp) {
  ag::Tape t;
  const Matrix z{{1.0, 2.0, 0.5}, {-1.0, 0.0, 3.0}};
  const std::vector<int> y{1, 2};
  const double loss = ag::cross_entropy(t.constant(z), y).value()[0];
  double want = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += std::exp(z(i, j));
    want += std::log(s) - z(i, static_cast<std::size_t>(y[i]));
  }
  EXPECT_NEAR(loss, want / 2.0, 1e-14);
  EXPECT_THROW(ag::cross_entropy(t.constant(z), std::vector<int>{0, 3}), LabelError);
  EXPECT_THROW(ag::cross_entropy(t.constant(z), std::vector<int>{0}), ShapeError);
}

TEST(Autograd, ReluSubgradientAtZeroIsZero) {
  ag::Parameter p("x", Matrix{{0.0, 1.0, -1.0}});
  ag::Tape t;
  ag::Var out = ag::sum(ag::relu(t.param(p)));
  t.backward(out);
  EXPECT_EQ(p.grad, (Matrix{{0.0, 1.0, 0.0}}));
}

TEST(Autograd, ColumnMaxTiesGoToFirstRow) {
  ag::Parameter p("x", Matrix{{2.0}, {2.0}, {1.0}});
  ag::Tape t;
  t.backward(ag::sum(ag::column_max(t.param(p))));
  EXPECT_EQ(p.grad, (Matrix{{1.0}, {0.0}, {0.0}}));
}

TEST(Autograd, BackwardNeedsScalarLoss) {
  ag::Parameter p("x", Matrix(2, 2, 1.0));
  ag::Tape t;
  EXPECT_THROW(t.backward(t.param(p)), ContractError);
}

TEST(Autograd, GradientsAccumulateOverReuse) {
  ag::Parameter p("x", Matrix{{3.0}});
  ag::Tape t;
  ag::Var x = t.param(p);
  t.backward(ag::sum(ag::mul(x, x)));  // d(x²)/dx = 2x
  EXPECT_DOUBLE_EQ(p.grad[0], 6.0);
}

TEST(Autograd, NoGradTapeRecordsNothing) {
  ag::Parameter p("x", Matrix{{3.0}});
  ag::Tape t(false);
  ag::Var y = ag::sum(ag::mul(t.param(p), t.param(p)));
  EXPECT_FALSE(t.requires_grad(y));
  t.backward(y);
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(Autograd, SoftmaxRejectsEmptyAndWide) {
  ag::Tape t;
  EXPECT_THROW(ag::softmax_columns(t.constant(Matrix(0, 1))), EmptyInputError);
  EXPECT_THROW(ag::softmax_columns(t.constant(Matrix(3, 2))), ShapeError);
}

TEST(Autograd, DropoutModes) {
  Rng rng(3);
  ag::Tape t;
  ag::Var x = t.constant(Matrix(200, 50, 1.0));
  EXPECT_EQ(ag::dropout(x, 0.5, ag::Mode::eval, rng).value(), x.value());
  const Matrix y = ag::dropout(x, 0.5, ag::Mode::train, rng).value();
  double sum = 0.0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    sum += v;
  }
  EXPECT_NEAR(sum / static_cast<double>(y.size()), 1.0, 0.05);
  EXPECT_THROW(ag::dropout(x, 1.0, ag::Mode::train, rng), ConfigError);
  EXPECT_THROW(ag::dropout(x, -0.1, ag::Mode::train, rng), ConfigError);
}

TEST(Autograd, BatchNormStatistics) {
  ag::RunningStats stats(1);
  ag::Tape t;
  ag::Var x = t.constant({{1.0}, {2.0}, {3.0}});
  ag::Var g = t.constant({{1.0}});
  ag::Var b = t.constant({{0.0}});
  const Matrix y = ag::batch_norm(x, g, b, stats, ag::Mode::train).value();
  const double sd = std::sqrt(2.0 / 3.0 + 1e-5);  // biased variance for normalising
  EXPECT_NEAR(y[0], -1.0 / sd, 1e-12);
  EXPECT_NEAR(y[2], 1.0 / sd, 1e-12);
  EXPECT_NEAR(stats.mean[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(stats.var[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-15);  // unbiased variance is 1
  const Matrix e = ag::batch_norm(t.constant({{0.2}}), g, b, stats, ag::Mode::eval).value();
  EXPECT_NEAR(e[0], 0.0, 1e-15);
  EXPECT_THROW(ag::batch_norm(t.constant({{1.0}}), g, b, stats, ag::Mode::train), DegenerateBatchError);
}

TEST(Optim, AdamFirstStepAndDecay) {
  ag::Parameter p("w", Matrix{{1.0, -1.0}});
  p.grad = Matrix{{0.5, -2.0}};
  Adam adam;
  std::vector<ag::Parameter*> ps{&p};
  adam.step(ps);
  // bias-corrected first step moves each entry by lr·g/(|g|+eps)
  EXPECT_NEAR(p.value[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[1], -1.0 + 0.01 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_EQ(p.grad, Matrix(1, 2));

  StepDecay d;
  EXPECT_DOUBLE_EQ(d.at(0), 0.01);
  EXPECT_DOUBLE_EQ(d.at(49), 0.01);
  EXPECT_DOUBLE_EQ(d.at(50), 0.005);
  EXPECT_DOUBLE_EQ(d.at(299), 0.01 / 32.0);
}

TEST(GradCheck, FullSuitePassesOverFiftySeeds) {
  const gradcheck::Report rep = gradcheck::run({});
  EXPECT_EQ(rep.seeds, 50u);
  for (const auto& c : rep.cases) EXPECT_TRUE(c.passed) << c.name << " rel-err " << c.worst.rel_err;
  EXPECT_LT(rep.worst.rel_err, 1e-5);
}

// Every op with a backward rule must be exercised: corrupting any of them
// has to make the suite fail.
TEST(GradCheck, EveryOpIsCovered) {
  gradcheck::Options opt;
  opt.seeds = 2;
  for (int i = 0; i < static_cast<int>(ag::Op::count_); ++i) {
    const auto op = static_cast<ag::Op>(i);
    if (op == ag::Op::constant || op == ag::Op::parameter) continue;
    ag::testing::ScopedFault fault(op);
    EXPECT_FALSE(gradcheck::run(opt).passed()) << "no case exercises " << ag::op_name(op);
  }
}

TEST(GradCheck, CoversBothModelBuilders) {
  bool flat = false, hier = false;
  for (const auto& c : gradcheck::all_cases()) {
    flat = flat || c.name.starts_with("flat_model:");
    hier = hier || c.name.starts_with("hierarchical_model:");
  }
  EXPECT_TRUE(flat);
  EXPECT_TRUE(hier);
}
