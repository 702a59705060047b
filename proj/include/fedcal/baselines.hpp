#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/scalers.hpp"
#include "fedcal/tensor.hpp"

namespace fedcal {

/// Any logits -> probabilities map; used to treat heterogeneous client scalers uniformly.
using ProbabilityMap = std::function<Matrix(const Matrix&)>;

/// Ens: average of the per-client calibrated probabilities.
inline Matrix ens_apply(const std::vector<ProbabilityMap>& local_scalers, const Matrix& logits) {
  if (local_scalers.empty()) throw UsageError("ens_apply: no scalers");
  Matrix acc(logits.rows(), logits.cols());
  for (const auto& s : local_scalers) {
    const Matrix p = s(logits);
    if (p.rows() != acc.rows() || p.cols() != acc.cols()) throw DimensionError("ens_apply: scaler output shape");
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += p.data()[i];
  }
  const double inv = 1.0 / static_cast<double>(local_scalers.size());
  for (double& v : acc.data()) v *= inv;
  return acc;
}

inline Matrix ens_apply(const std::vector<TemperatureScaler>& scalers, const Matrix& logits) {
  std::vector<ProbabilityMap> maps;
  for (const auto& s : scalers) maps.emplace_back([s](const Matrix& x) { return temp_apply(s, x); });
  return ens_apply(maps, logits);
}

inline Matrix ens_apply(const std::vector<OPScalerParams>& scalers, const Matrix& logits) {
  std::vector<ProbabilityMap> maps;
  for (const auto& s : scalers) maps.emplace_back([&s](const Matrix& x) { return op_scaler_apply(s, x); });
  return ens_apply(maps, logits);
}

/// How AvgT combines client temperatures.
enum class TemperatureReduction {
  Mean,  // arithmetic mean (the default)
  Sum,   // literal sum, for comparison
};

inline double combine_temperatures(const std::vector<double>& temps, TemperatureReduction mode) {
  if (temps.empty()) throw UsageError("avgt: no temperatures");
  double s = 0.0;
  for (double t : temps) {
    if (!(t > 0.0)) throw UsageError("avgt: temperatures must be positive");
    s += t;
  }
  return mode == TemperatureReduction::Mean ? s / static_cast<double>(temps.size()) : s;
}

/// AvgT: one temperature scaler with the combined client temperature.
inline Matrix avgt_apply(const std::vector<double>& temps, const Matrix& logits,
                         TemperatureReduction mode = TemperatureReduction::Mean) {
  return temp_apply(TemperatureScaler{combine_temperatures(temps, mode)}, logits);
}

/// Val-TS: temperature fitted on a pooled global validation set.
inline TemperatureScaler val_ts_fit(const Matrix& logits, const Labels& labels) {
  return temp_fit(logits, labels);
}

/// Linear temperature predictor t(x) = W . logits(x) + b.
struct LinearTempModel {
  Vector weights;
  double bias = 1.0;

  bool operator==(const LinearTempModel&) const = default;
};

inline constexpr double kRidgeDamping = 1e-6;

namespace detail {

/// Solve A x = y for symmetric positive definite A (Cholesky).
inline Vector cholesky_solve(Matrix A, Vector y) {
  const std::size_t n = A.rows();
  for (std::size_t j = 0; j < n; ++j) {
    double d = A(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= A(j, k) * A(j, k);
    if (!(d > 0.0)) throw ValidationError("cholesky_solve: matrix not positive definite");
    A(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = A(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= A(i, k) * A(j, k);
      A(i, j) = s / A(j, j);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) y[i] -= A(i, k) * y[k];
    y[i] /= A(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) y[i] -= A(k, i) * y[k];
    y[i] /= A(i, i);
  }
  return y;
}

}  // namespace detail

/// Fit (W, b) by ridge least squares so that W . logits_i + b ~ target_i.
/// W is damped, b is not; solved on centred data via the normal equations.
inline LinearTempModel fit_linear_temperature(const Matrix& logits, const Vector& targets,
                                              double damping = kRidgeDamping) {
  const std::size_t n = logits.rows(), K = logits.cols();
  if (n == 0) throw UsageError("fit_linear_temperature: empty data");
  if (targets.size() != n) throw DimensionError("fit_linear_temperature: target length");
  Vector mean_x(K, 0.0);
  double mean_t = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < K; ++i) mean_x[i] += logits(r, i);
    mean_t += targets[r];
  }
  for (double& m : mean_x) m /= static_cast<double>(n);
  mean_t /= static_cast<double>(n);

  Matrix ata(K, K);
  Vector aty(K, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double t = targets[r] - mean_t;
    for (std::size_t i = 0; i < K; ++i) {
      const double xi = logits(r, i) - mean_x[i];
      aty[i] += xi * t;
      for (std::size_t j = 0; j < K; ++j) ata(i, j) += xi * (logits(r, j) - mean_x[j]);
    }
  }
  for (std::size_t i = 0; i < K; ++i) ata(i, i) += damping;
  LinearTempModel m;
  m.weights = detail::cholesky_solve(std::move(ata), std::move(aty));
  m.bias = mean_t;
  for (std::size_t i = 0; i < K; ++i) m.bias -= m.weights[i] * mean_x[i];
  return m;
}

/// LR-TS client step: fit T_c by temperature scaling, then regress the constant T_c on the logits.
inline LinearTempModel lrts_fit_client(const Matrix& logits, const Labels& labels) {
  const double t = temp_fit(logits, labels).temperature;
  return fit_linear_temperature(logits, Vector(logits.rows(), t));
}

/// FedAvg of client regressors (uniform mean).
inline LinearTempModel lrts_average(const std::vector<LinearTempModel>& models) {
  if (models.empty()) throw UsageError("lrts_average: no models");
  LinearTempModel out{Vector(models.front().weights.size(), 0.0), 0.0};
  for (const auto& m : models) {
    if (m.weights.size() != out.weights.size()) throw DimensionError("lrts_average: width mismatch");
    for (std::size_t i = 0; i < m.weights.size(); ++i) out.weights[i] += m.weights[i];
    out.bias += m.bias;
  }
  const double inv = 1.0 / static_cast<double>(models.size());
  for (double& w : out.weights) w *= inv;
  out.bias *= inv;
  return out;
}

inline double lrts_temperature(const LinearTempModel& m, std::span<const double> logits_row) {
  double t = m.bias;
  for (std::size_t i = 0; i < logits_row.size(); ++i) t += m.weights[i] * logits_row[i];
  return std::clamp(t, kMinTemperature, kMaxTemperature);
}

/// Per-row temperature clamp(W . x + b, 0.05, 20), then softmax(x / t).
inline Matrix lrts_apply(const LinearTempModel& m, const Matrix& logits) {
  if (m.weights.size() != logits.cols()) throw DimensionError("lrts_apply: width mismatch");
  Matrix out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double t = lrts_temperature(m, logits.row(r));
    for (double& v : row) v /= t;
    softmax_inplace(row);
  }
  return out;
}

/// Number of rows whose predicted temperature hit either clamp bound.
inline std::size_t lrts_clamped_rows(const LinearTempModel& m, const Matrix& logits) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double t = m.bias;
    auto x = logits.row(r);
    for (std::size_t i = 0; i < x.size(); ++i) t += m.weights[i] * x[i];
    if (t <= kMinTemperature || t >= kMaxTemperature) ++n;
  }
  return n;
}

}  // namespace fedcal
