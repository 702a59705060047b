#include <gtest/gtest.h>

#include <random>

#include "fedcal/matching.hpp"
#include "fedcal/scalers.hpp"
#include "oracles.hpp"

using namespace fedcal;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.data()) v = g(rng);
  return m;
}

MLPModel random_model(const std::vector<std::size_t>& sizes, Rng& rng) {
  MLPModel m = make_mlp(sizes, Activation::ReLU, rng);
  std::normal_distribution<double> g(0.0, 0.3);
  for (auto& b : m.biases)
    for (double& v : b) v = g(rng);
  return m;
}

PermutationSet random_perms(const MLPModel& m, Rng& rng) {
  PermutationSet s = identity_permutations(m);
  for (auto& p : s.perms) std::shuffle(p.begin(), p.end(), rng);
  return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

}  // namespace

TEST(SolveLap, TwoByTwoHandExample) {
  const Matrix s{{1, 2}, {3, 1}};
  const Permutation p = solve_lap(s);
  EXPECT_EQ(p, (Permutation{1, 0}));
  EXPECT_EQ(assignment_score(s, p), 5.0);
}

TEST(SolveLap, DiagonalDominantGivesIdentity) {
  Rng rng(1);
  Matrix s = random_matrix(7, 7, rng);
  for (std::size_t i = 0; i < 7; ++i) s(i, i) += 100.0;
  EXPECT_EQ(solve_lap(s), identity_permutation(7));
}

TEST(SolveLap, MatchesBruteForce) {
  Rng rng(2);
  std::uniform_int_distribution<std::size_t> n_dist(1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = n_dist(rng);
    const Matrix s = random_matrix(n, n, rng);
    const auto best = oracle::lap(s);
    const Permutation p = solve_lap(s);
    ASSERT_TRUE(is_permutation(p));
    EXPECT_NEAR(assignment_score(s, p), best.value, 1e-12);
    EXPECT_EQ(p, best.perm);
  }
}

TEST(SolveLap, TiesResolveToLexicographicallySmallest) {
  EXPECT_EQ(solve_lap(Matrix(4, 4, 1.0)), identity_permutation(4));
  Rng rng(3);
  std::uniform_int_distribution<int> small(0, 2);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix s(5, 5);
    for (double& v : s.data()) v = small(rng);
    EXPECT_EQ(solve_lap(s), oracle::lap(s).perm);
  }
}

TEST(SolveLap, RejectsNonSquare) {
  EXPECT_THROW(solve_lap(Matrix(2, 3)), DimensionError);
  EXPECT_TRUE(solve_lap(Matrix(0, 0)).empty());
}

TEST(ApplyPermutation, IdentityLeavesModelUnchanged) {
  Rng rng(4);
  MLPModel m = random_model({4, 6, 5, 3}, rng);
  EXPECT_EQ(apply_permutation(m, identity_permutations(m)), m);
}

TEST(ApplyPermutation, PreservesFunction) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    MLPModel m = random_model({5, 12, 9, 5}, rng);
    const PermutationSet s = random_perms(m, rng);
    const Matrix x = random_matrix(100, 5, rng);
    EXPECT_LT(max_abs_diff(forward(m, x), forward(apply_permutation(m, s), x)), 1e-9);
  }
}

TEST(ApplyPermutation, InverseRestoresExactly) {
  Rng rng(6);
  MLPModel m = random_model({3, 7, 7, 2}, rng);
  const PermutationSet s = random_perms(m, rng);
  // apply(apply(m, s), t) picks unit s[t[i]]; t = inverse(s) returns unit i.
  EXPECT_EQ(apply_permutation(apply_permutation(m, s), inverse(s)), m);
}

TEST(ApplyPermutation, RejectsBadShapes) {
  Rng rng(7);
  MLPModel m = random_model({3, 4, 2}, rng);
  EXPECT_THROW(apply_permutation(m, PermutationSet{}), UsageError);
  EXPECT_THROW(apply_permutation(m, PermutationSet{{{0, 1, 2}}}), UsageError);
  EXPECT_THROW(apply_permutation(m, PermutationSet{{{0, 0, 1, 2}}}), UsageError);
}

TEST(WeightMatching, SelfMatchIsIdentity) {
  Rng rng(8);
  MLPModel m = random_model({6, 10, 10, 6}, rng);
  EXPECT_EQ(weight_matching(m, m), identity_permutations(m));
}

TEST(WeightMatching, RecoversPlantedPermutation) {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    OPScalerParams p = make_op_scaler(10, 64, rng, 1.0);
    const MLPModel& ref = p.backbone;
    const MLPModel cand = apply_permutation(ref, random_perms(ref, rng));
    const PermutationSet found = weight_matching(ref, cand, static_cast<std::uint64_t>(trial));
    const double self = param_dot(ref, ref);
    EXPECT_NEAR(alignment_objective(ref, cand, found), self, 1e-9 * std::max(1.0, self));
  }
}

TEST(WeightMatching, ObjectiveNeverDecreases) {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    MLPModel a = random_model({8, 16, 16, 8}, rng);
    MLPModel b = random_model({8, 16, 16, 8}, rng);
    const auto res = weight_matching_detailed(a, b, 3);
    const double before = alignment_objective(a, b, identity_permutations(a));
    double prev = before;
    for (double v : res.objective_trace) {
      EXPECT_GE(v, prev - 1e-12);
      prev = v;
    }
    EXPECT_GE(alignment_objective(a, b, res.perms), before);
    EXPECT_LE(res.sweeps, kMaxMatchingSweeps);
  }
}

TEST(WeightMatching, ArchitectureMismatchThrows) {
  Rng rng(11);
  EXPECT_THROW(weight_matching(random_model({3, 4, 2}, rng), random_model({3, 5, 2}, rng)), UsageError);
}

TEST(Interpolate, EndpointsAndIdempotence) {
  Rng rng(12);
  MLPModel a = random_model({3, 5, 2}, rng);
  MLPModel b = random_model({3, 5, 2}, rng);
  EXPECT_EQ(interpolate(a, b, 1.0), a);
  EXPECT_EQ(interpolate(a, b, 0.0), b);
  EXPECT_EQ(interpolate(a, a, 0.5), a);
  EXPECT_NEAR(interpolate(a, b, 0.25).weights[0](1, 2), 0.25 * a.weights[0](1, 2) + 0.75 * b.weights[0](1, 2),
              1e-15);
  EXPECT_THROW(interpolate(a, b, 1.5), UsageError);
  EXPECT_THROW(interpolate(a, b, -0.1), UsageError);
}
