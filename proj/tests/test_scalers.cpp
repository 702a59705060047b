#include <gtest/gtest.h>

#include <random>

#include "fedcal/metrics.hpp"
#include "fedcal/scalers.hpp"
#include "oracles.hpp"

using namespace fedcal;

namespace {

struct Sample {
  Matrix logits;
  Labels labels;
};

// Logits are log true posteriors: labels are drawn from softmax(logits).
Sample calibrated_sample(std::size_t n, std::size_t K, std::uint64_t seed, double spread = 2.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, spread);
  Sample s{Matrix(n, K), Labels(n)};
  for (double& v : s.logits.data()) v = g(rng);
  const Matrix p = softmax(s.logits);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t r = 0; r < n; ++r) {
    double x = u(rng), acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < K; ++k) {
      acc += p(r, k);
      if (x < acc) break;
    }
    s.labels[r] = static_cast<int>(k);
  }
  return s;
}

std::vector<std::size_t> stable_desc(std::span<const double> x) {
  std::vector<std::size_t> o(x.size());
  std::iota(o.begin(), o.end(), std::size_t{0});
  std::stable_sort(o.begin(), o.end(), [&](auto a, auto b) { return x[a] > x[b]; });
  return o;
}

}  // namespace

TEST(TempApply, UnitTemperatureIsSoftmax) {
  Matrix x{{1.0, -2.0, 0.5}};
  EXPECT_EQ(temp_apply({1.0}, x), softmax(x));
}

TEST(TempApply, EqualLogitsStayUniform) {
  for (double t : {0.1, 1.0, 7.0}) {
    Matrix p = temp_apply({t}, Matrix{{3, 3, 3, 3}});
    for (double v : p.data()) EXPECT_NEAR(v, 0.25, 1e-15);
  }
}

TEST(TempApply, ClosedFormAtTwo) {
  Matrix p = temp_apply({2.0}, Matrix{{2, 0}});
  const double e = std::exp(1.0);
  EXPECT_NEAR(p(0, 0), e / (e + 1.0), 1e-15);
  EXPECT_NEAR(p(0, 1), 1.0 / (e + 1.0), 1e-15);
  EXPECT_THROW(temp_apply({0.0}, Matrix{{2, 0}}), UsageError);
}

TEST(TempFit, CalibratedLogitsGiveUnitTemperature) {
  const auto s = calibrated_sample(20000, 5, 31);
  EXPECT_NEAR(temp_fit(s.logits, s.labels).temperature, 1.0, 0.02);
}

TEST(TempFit, TripledLogitsGiveTemperatureThree) {
  const auto s = calibrated_sample(20000, 5, 32);
  const TemperatureScaler t = temp_fit(scaled(s.logits, 3.0), s.labels);
  EXPECT_NEAR(t.temperature, 3.0, 0.1);
}

TEST(TempFit, MatchesGridSearchAndNeverWorseThanIdentity) {
  const auto s = calibrated_sample(150, 4, 33);
  const Matrix x = scaled(s.logits, 2.5);
  const double t = temp_fit(x, s.labels).temperature;
  EXPECT_NEAR(t, oracle::grid_temperature(x, s.labels), 0.01);
  EXPECT_LE(temperature_nll(x, s.labels, t), temperature_nll(x, s.labels, 1.0) + 1e-12);
  EXPECT_NEAR(temperature_nll(x, s.labels, t), oracle::temperature_nll(x, s.labels, t), 1e-12);
}

TEST(TempFit, RejectsEmptyInput) { EXPECT_THROW(temp_fit(Matrix(0, 3), {}), UsageError); }

TEST(OpScaler, FixtureOrdering) {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    OPScalerParams p = make_op_scaler(4, 8, rng, 1.0);
    const Matrix out = op_scaler_apply(p, Matrix{{3, 4, 2, 2}});
    EXPECT_GT(out(0, 1), out(0, 0));
    EXPECT_GT(out(0, 0), out(0, 2));
    EXPECT_EQ(out(0, 2), out(0, 3));
  }
}

TEST(OpScaler, MatchesExplicitMatrixConstruction) {
  Rng rng(42);
  OPScalerParams p = make_op_scaler(6, 10, rng, 1.0);
  std::normal_distribution<double> g(0.0, 2.0);
  Matrix x(20, 6);
  for (double& v : x.data()) v = g(rng);
  x(3, 2) = x(3, 4);  // a tie
  const Matrix z = op_scaler_logits(p, x);
  const Matrix a = forward(p.backbone, x);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto expect = oracle::op_compose({x.row(r).begin(), x.row(r).end()}, {a.row(r).begin(), a.row(r).end()});
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(z(r, k), expect[k], 1e-12);
  }
}

TEST(OpScaler, SortedInputStaysStrictlyDecreasing) {
  Rng rng(43);
  OPScalerParams p = make_op_scaler(5, 8, rng, 1.0);
  const Matrix z = op_scaler_logits(p, Matrix{{5, 4, 1, 0, -3}});
  for (std::size_t k = 0; k + 1 < 5; ++k) EXPECT_GT(z(0, k), z(0, k + 1));
}

TEST(OpScaler, PreservesRankingWithTies) {
  Rng rng(44);
  for (std::size_t K : {3u, 10u}) {
    OPScalerParams p = make_op_scaler(K, 16, rng, 1.0);
    std::normal_distribution<double> g(0.0, 3.0);
    std::uniform_int_distribution<std::size_t> col(0, K - 1);
    Matrix x(500, K);
    for (double& v : x.data()) v = g(rng);
    for (std::size_t r = 0; r < x.rows(); r += 3) x(r, col(rng)) = x(r, col(rng));
    const Matrix z = op_scaler_logits(p, x);
    const Matrix probs = softmax(z);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      EXPECT_EQ(stable_desc(z.row(r)), stable_desc(x.row(r))) << "row " << r;
      EXPECT_EQ(argmax(probs.row(r)), argmax(x.row(r)));
    }
  }
}

TEST(OpScaler, NearIdentityAtInitialisation) {
  Rng rng(45);
  OPScalerParams p = make_op_scaler(4, 8, rng, 0.0);
  Matrix x{{2.0, -1.0, 0.5, 0.0}};
  const Matrix z = op_scaler_logits(p, x);
  // With zero output weights the map is a shift: gaps are kept and the bottom logit lands at 0.
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(z(0, k), x(0, k) + 1.0, 1e-12);
}

TEST(OpScaler, WidthMismatchThrows) {
  Rng rng(46);
  OPScalerParams p = make_op_scaler(4, 8, rng);
  EXPECT_THROW(op_scaler_apply(p, Matrix(2, 3)), DimensionError);
}

TEST(OpScalerFit, ZeroEpochsLeavesParamsUnchanged) {
  Rng rng(47);
  OPScalerParams p = make_op_scaler(4, 8, rng);
  const auto s = calibrated_sample(30, 4, 48);
  Rng fit_rng(49);
  EXPECT_EQ(op_scaler_fit(p, s.logits, s.labels, {0, 0.01, 256}, fit_rng), p);
}

TEST(OpScalerFit, GradientMatchesFiniteDifferences) {
  Rng rng(50);
  for (int probe = 0; probe < 20; ++probe) {
    OPScalerParams p = make_op_scaler(5, 6, rng, 1.0);
    std::normal_distribution<double> g(0.0, 0.3);
    for (auto& b : p.backbone.biases)
      for (double& v : b) v += g(rng);
    std::uint64_t seed = 100 + static_cast<std::uint64_t>(probe);
    auto s = calibrated_sample(4, 5, seed);
    while (oracle::kink_distance(p.backbone, s.logits) < 1e-3) s = calibrated_sample(4, 5, seed += 1000);
    const auto lg = op_scaler_loss_and_grad(p, s.logits, s.labels);
    EXPECT_NEAR(lg.loss, op_scaler_nll(p, s.logits, s.labels), 1e-12);
    const auto loss = [&] { return op_scaler_nll(p, s.logits, s.labels); };
    for (std::size_t l = 0; l < p.backbone.num_layers(); ++l) {
      auto check = [&](double& param, double an) {
        const double fd = oracle::central_difference(loss, param, 1e-6);
        if (std::abs(fd) + std::abs(an) < 1e-6) return;  // below FD roundoff at h = 1e-6
        EXPECT_LT(std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)), 1e-3);
      };
      for (std::size_t i = 0; i < p.backbone.weights[l].size(); ++i)
        check(p.backbone.weights[l].data()[i], lg.grad.weights[l].data()[i]);
      for (std::size_t i = 0; i < p.backbone.biases[l].size(); ++i)
        check(p.backbone.biases[l][i], lg.grad.biases[l][i]);
    }
  }
}

TEST(OpScalerFit, ReducesEceOnOverconfidentLogits) {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = calibrated_sample(2000, 5, 60 + seed, 1.0);
    const Matrix x = scaled(s.logits, 3.0);
    Rng rng(70 + seed);
    OPScalerParams p = make_op_scaler(5, 16, rng);
    const double before = ece({softmax(x), s.labels}, 15).ece;
    p = op_scaler_fit(p, x, s.labels, {50, 0.01, 256}, rng);
    const double after = ece({op_scaler_apply(p, x), s.labels}, 15).ece;
    improved += after <= before;
  }
  EXPECT_GE(improved, 3);
}

TEST(OpScalerFit, DeterministicGivenSeed) {
  const auto s = calibrated_sample(300, 4, 80);
  Rng init(81);
  const OPScalerParams p = make_op_scaler(4, 8, init);
  Rng r1(82), r2(82);
  EXPECT_EQ(op_scaler_fit(p, s.logits, s.labels, {3, 0.01, 64}, r1),
            op_scaler_fit(p, s.logits, s.labels, {3, 0.01, 64}, r2));
}
