#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/mlp.hpp"
#include "fedcal/rng.hpp"
#include "fedcal/tensor.hpp"

namespace fedcal {

using Permutation = std::vector<std::size_t>;

/// One permutation per hidden layer. perms[l][i] = j means unit i of the aligned
/// model is unit j of the original.
struct PermutationSet {
  std::vector<Permutation> perms;

  bool operator==(const PermutationSet&) const = default;
};

inline bool is_permutation(const Permutation& p) {
  std::vector<char> seen(p.size(), 0);
  for (std::size_t v : p) {
    if (v >= p.size() || seen[v]) return false;
    seen[v] = 1;
  }
  return true;
}

inline Permutation identity_permutation(std::size_t n) {
  Permutation p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

inline Permutation inverse(const Permutation& p) {
  Permutation inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

inline PermutationSet inverse(const PermutationSet& s) {
  PermutationSet out;
  for (const auto& p : s.perms) out.perms.push_back(inverse(p));
  return out;
}

inline PermutationSet identity_permutations(const MLPModel& m) {
  PermutationSet s;
  for (std::size_t l = 1; l + 1 < m.layer_sizes.size(); ++l)
    s.perms.push_back(identity_permutation(m.layer_sizes[l]));
  return s;
}

inline double assignment_score(const Matrix& score, const Permutation& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += score(i, p[i]);
  return s;
}

namespace detail {

/// Kuhn augmenting step restricted to tight edges and unfixed rows.
inline bool reroute(std::size_t row, const std::vector<std::vector<std::size_t>>& tight,
                    std::vector<std::size_t>& assign, std::vector<std::size_t>& owner,
                    const std::vector<char>& fixed_col, std::vector<char>& visited, std::size_t free_col) {
  for (std::size_t c : tight[row]) {
    if (fixed_col[c] || visited[c]) continue;
    visited[c] = 1;
    if (c == free_col || reroute(owner[c], tight, assign, owner, fixed_col, visited, free_col)) {
      assign[row] = c;
      owner[c] = row;
      return true;
    }
  }
  return false;
}

}  // namespace detail

/// Permutation p maximising sum_i score(i, p[i]). Hungarian method with
/// potentials on the negated scores; among optimal assignments the
/// lexicographically smallest is returned.
inline Permutation solve_lap(const Matrix& score) {
  const std::size_t n = score.rows();
  if (score.cols() != n) throw DimensionError("solve_lap: score matrix must be square");
  if (n == 0) return {};
  if (!all_finite(score)) throw ValidationError("solve_lap: non-finite score");

  // Shortest augmenting path Hungarian, 1-based, minimising cost = -score.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  const auto cost = [&](std::size_t i, std::size_t j) { return -score(i - 1, j - 1); };
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> assign(n), owner(n);
  for (std::size_t j = 1; j <= n; ++j) {
    assign[p[j] - 1] = j - 1;
    owner[j - 1] = p[j] - 1;
  }

  // Every optimal assignment uses only zero-reduced-cost edges of an optimal
  // dual, so walk rows in order and pick the smallest tight column that still
  // admits a perfect matching of the remaining rows.
  double scale = 1.0;
  for (double s : score.data()) scale = std::max(scale, std::abs(s));
  const double eps = 1e-10 * scale;
  std::vector<std::vector<std::size_t>> tight(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (cost(i + 1, j + 1) - u[i + 1] - v[j + 1] <= eps) tight[i].push_back(j);

  std::vector<char> fixed_col(n, 0), visited(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : tight[i]) {
      if (fixed_col[j]) continue;
      if (assign[i] == j) break;
      const auto saved_assign = assign;
      const auto saved_owner = owner;
      const std::size_t displaced = owner[j];
      const std::size_t freed = assign[i];
      assign[i] = j;
      owner[j] = i;
      fixed_col[j] = 1;
      std::fill(visited.begin(), visited.end(), 0);
      const bool ok = detail::reroute(displaced, tight, assign, owner, fixed_col, visited, freed);
      fixed_col[j] = 0;
      if (ok) break;
      assign = saved_assign;
      owner = saved_owner;
    }
    fixed_col[assign[i]] = 1;
  }
  return assign;
}

/// Reorder hidden units: rows of W_l and entries of b_l by perms[l], columns of
/// W_{l+1} by the same permutation. The network computes the same function.
inline MLPModel apply_permutation(const MLPModel& model, const PermutationSet& perms) {
  const std::size_t L = model.num_layers();
  if (perms.perms.size() + 1 != L)
    throw UsageError("apply_permutation: expected " + std::to_string(L - 1) + " permutations");
  for (std::size_t l = 0; l + 1 < L; ++l)
    if (perms.perms[l].size() != model.layer_sizes[l + 1] || !is_permutation(perms.perms[l]))
      throw UsageError("apply_permutation: permutation " + std::to_string(l) + " has wrong shape");

  MLPModel out = model;
  for (std::size_t l = 0; l < L; ++l) {
    const Permutation* rows = l + 1 < L ? &perms.perms[l] : nullptr;
    const Permutation* cols = l > 0 ? &perms.perms[l - 1] : nullptr;
    const Matrix& w = model.weights[l];
    Matrix& ow = out.weights[l];
    for (std::size_t i = 0; i < w.rows(); ++i) {
      const std::size_t src_r = rows ? (*rows)[i] : i;
      for (std::size_t k = 0; k < w.cols(); ++k) ow(i, k) = w(src_r, cols ? (*cols)[k] : k);
      out.biases[l][i] = model.biases[l][src_r];
    }
  }
  return out;
}

/// vec(reference) . vec(candidate after perms).
inline double alignment_objective(const MLPModel& reference, const MLPModel& candidate,
                                  const PermutationSet& perms) {
  return param_dot(reference, apply_permutation(candidate, perms));
}

inline constexpr std::size_t kMaxMatchingSweeps = 100;

struct MatchingResult {
  PermutationSet perms;
  std::size_t sweeps = 0;
  std::vector<double> objective_trace;  // objective after each sweep
};

namespace detail {

// Similarity between unit i of `a` and unit j of `b` in hidden layer l, given
// the current permutations of the neighbouring layers. Biases enter as an
// extra input column.
inline Matrix matching_score(const MLPModel& a, const MLPModel& b, const PermutationSet& s,
                             std::size_t l) {
  const std::size_t L = a.num_layers();
  const std::size_t n = a.layer_sizes[l + 1];
  const Matrix& wa = a.weights[l];
  const Matrix& wb = b.weights[l];
  const Permutation* prev = l > 0 ? &s.perms[l - 1] : nullptr;
  Matrix score(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = a.biases[l][i] * b.biases[l][j];
      for (std::size_t k = 0; k < wa.cols(); ++k) acc += wa(i, k) * wb(j, prev ? (*prev)[k] : k);
      score(i, j) = acc;
    }
  }
  const Matrix& na = a.weights[l + 1];
  const Matrix& nb = b.weights[l + 1];
  const Permutation* next = l + 2 < L ? &s.perms[l + 1] : nullptr;
  for (std::size_t r = 0; r < na.rows(); ++r) {
    const std::size_t rb = next ? (*next)[r] : r;
    for (std::size_t i = 0; i < n; ++i) {
      const double ar = na(r, i);
      if (ar == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) score(i, j) += ar * nb(rb, j);
    }
  }
  return score;
}

}  // namespace detail

/// Coordinate ascent over hidden layers (visited in a seeded random order each
/// sweep), solving one assignment problem per layer, until a sweep changes
/// nothing or kMaxMatchingSweeps is reached. A layer's permutation is only
/// replaced when the new one strictly improves the objective.
inline MatchingResult weight_matching_detailed(const MLPModel& reference, const MLPModel& candidate,
                                               std::uint64_t seed = 0) {
  validate(reference);
  validate(candidate);
  if (!same_architecture(reference, candidate))
    throw UsageError("weight_matching: architecture mismatch");
  MatchingResult res;
  res.perms = identity_permutations(reference);
  const std::size_t hidden = res.perms.perms.size();
  if (hidden == 0) return res;

  Rng rng = make_rng(seed, {stream::kMatching});
  std::vector<std::size_t> layers(hidden);
  std::iota(layers.begin(), layers.end(), std::size_t{0});
  for (res.sweeps = 0; res.sweeps < kMaxMatchingSweeps;) {
    std::shuffle(layers.begin(), layers.end(), rng);
    bool changed = false;
    for (std::size_t l : layers) {
      const Matrix score = detail::matching_score(reference, candidate, res.perms, l);
      Permutation best = solve_lap(score);
      const double old_v = assignment_score(score, res.perms.perms[l]);
      const double new_v = assignment_score(score, best);
      if (new_v > old_v + 1e-12 * std::max(1.0, std::abs(old_v))) {
        res.perms.perms[l] = std::move(best);
        changed = true;
      }
    }
    ++res.sweeps;
    res.objective_trace.push_back(alignment_objective(reference, candidate, res.perms));
    if (!changed) break;
  }
  return res;
}

inline PermutationSet weight_matching(const MLPModel& reference, const MLPModel& candidate,
                                      std::uint64_t seed = 0) {
  return weight_matching_detailed(reference, candidate, seed).perms;
}

/// lambda * a + (1 - lambda) * b, parameter-wise.
inline MLPModel interpolate(const MLPModel& a, const MLPModel& b_aligned, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("interpolate: lambda must be in [0, 1]");
  if (!same_architecture(a, b_aligned)) throw UsageError("interpolate: architecture mismatch");
  MLPModel out = a;
  const MLPModel& b = b_aligned;
  zip_params(out, b, [&](double& x, const double& y) { x = lambda * x + (1.0 - lambda) * y; });
  return out;
}

}  // namespace fedcal
