#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedcal/tensor.hpp"
#include "oracles.hpp"

using namespace fedcal;

TEST(Matrix, ShapeAndRowAccess) {
  Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(m.row(1)[0], 4.0);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW((Matrix{{1, 2}, {3}}), DimensionError);
}

TEST(Matrix, SelectRowsKeepsOrder) {
  Matrix m{{1, 1}, {2, 2}, {3, 3}};
  const std::vector<std::size_t> idx{2, 0};
  Matrix s = select_rows(m, idx);
  EXPECT_EQ(s, (Matrix{{3, 3}, {1, 1}}));
}

TEST(Softmax, UniformRow) {
  Matrix p = softmax(Matrix{{0, 0, 0}});
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  Matrix p = softmax(Matrix{{1000, 0}});
  EXPECT_TRUE(all_finite(p));
  EXPECT_NEAR(p(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(p(0, 1), 0.0, 1e-15);
}

TEST(Softmax, ClosedForm) {
  Matrix p = softmax(Matrix{{2, 0}});
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(p(0, 0), e2 / (e2 + 1.0), 1e-15);
  EXPECT_NEAR(p(0, 1), 1.0 / (e2 + 1.0), 1e-15);
}

TEST(Softmax, RowsSumToOneOverWideRange) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  Matrix x(200, 9);
  for (double& v : x.data()) v = u(rng);
  Matrix p = softmax(x);
  ASSERT_TRUE(all_finite(p));
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Argmax, TiesGoToLowestIndex) {
  const std::vector<double> v{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(argmax(v), 1u);
}

TEST(NllLoss, PerfectPredictionIsNearZero) {
  Matrix logits{{100, 0, 0}, {0, 0, 100}};
  EXPECT_NEAR(nll_loss(logits, {0, 2}), 0.0, 1e-12);
}

TEST(NllLoss, UniformLogitsGiveLogK) {
  Matrix logits(3, 4, 0.5);
  EXPECT_NEAR(nll_loss(logits, {0, 1, 3}), std::log(4.0), 1e-14);
}

TEST(NllLoss, LabelOutOfRangeIsRejected) {
  Matrix logits(2, 3);
  EXPECT_THROW(nll_loss(logits, {0, 3}), ValidationError);
  EXPECT_THROW(nll_loss(logits, {0, -1}), ValidationError);
  EXPECT_THROW(nll_loss(logits, {0}), DimensionError);
}

TEST(NllLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix logits(5, 4);
    for (double& v : logits.data()) v = g(rng);
    const Labels y = oracle::random_labels(5, 4, rng);
    const auto lg = nll_loss_and_grad(logits, y);
    EXPECT_NEAR(lg.loss, nll_loss(logits, y), 1e-14);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double fd =
          oracle::central_difference([&] { return nll_loss(logits, y); }, logits.data()[i], 1e-5);
      const double an = lg.grad.data()[i];
      EXPECT_LT(std::abs(fd - an) / std::max(1e-8, std::abs(fd) + std::abs(an)), 1e-4);
    }
  }
}
