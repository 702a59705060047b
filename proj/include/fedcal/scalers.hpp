#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/mlp.hpp"
#include "fedcal/rng.hpp"
#include "fedcal/tensor.hpp"

namespace fedcal {

// ---------------------------------------------------------------------------
// Temperature scaling
// ---------------------------------------------------------------------------

inline constexpr double kMinTemperature = 0.05;
inline constexpr double kMaxTemperature = 20.0;

struct TemperatureScaler {
  double temperature = 1.0;
};

inline Matrix temp_apply(const TemperatureScaler& s, const Matrix& logits) {
  if (!(s.temperature > 0.0)) throw UsageError("temp_apply: temperature must be positive");
  return softmax(scaled(logits, 1.0 / s.temperature));
}

/// Mean NLL of softmax(logits / T).
inline double temperature_nll(const Matrix& logits, const Labels& labels, double T) {
  return nll_loss(scaled(logits, 1.0 / T), labels);
}

/// Golden-section search over log T in [kMinTemperature, kMaxTemperature].
/// The result is never worse than T = 1 or either end of the range.
inline TemperatureScaler temp_fit(const Matrix& logits, const Labels& labels) {
  if (logits.rows() == 0) throw UsageError("temp_fit: empty validation batch");
  check_labels(labels, logits.rows(), logits.cols());
  const auto f = [&](double log_t) { return temperature_nll(logits, labels, std::exp(log_t)); };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = std::log(kMinTemperature), hi = std::log(kMaxTemperature);
  double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
  double f1 = f(x1), f2 = f(x2);
  while (std::exp(hi) - std::exp(lo) > 1e-4) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = f(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = f(x2);
    }
  }
  double best_t = std::exp(0.5 * (lo + hi));
  double best_f = temperature_nll(logits, labels, best_t);
  for (double t : {1.0, kMinTemperature, kMaxTemperature}) {
    const double v = temperature_nll(logits, labels, t);
    if (v < best_f) {
      best_f = v;
      best_t = t;
    }
  }
  return {best_t};
}

// ---------------------------------------------------------------------------
// Order-preserving MLP scaler
//
// For a logit row x: sort descending (stable) to y = S x, run the backbone on x
// to get a, form w_i = softplus(a_i) (y_i - y_{i+1}) for i < K-1 and
// w_{K-1} = a_{K-1}, then z = S^{-1} U w with U upper-triangular ones.
// Every w_i (i < K-1) is >= 0 and is 0 exactly on ties, so z ranks like x.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultScalerWidth = 64;

struct OPScalerParams {
  MLPModel backbone;  // K - h - h - K
  std::size_t num_classes = 0;

  bool operator==(const OPScalerParams&) const = default;
};

inline void validate(const OPScalerParams& p) {
  validate(p.backbone);
  if (p.backbone.input_size() != p.num_classes || p.backbone.output_size() != p.num_classes)
    throw DimensionError("OPScalerParams: backbone must map K -> K");
}

/// softplus^{-1}(1): the backbone output that leaves a sorted gap unchanged.
inline const double kUnitGapActivation = std::log(std::exp(1.0) - 1.0);

/// Glorot-initialised K-h-h-K backbone. The output layer starts near zero with
/// gap biases at softplus^{-1}(1), so a fresh scaler is close to the identity map.
inline OPScalerParams make_op_scaler(std::size_t num_classes, std::size_t hidden_width, Rng& rng,
                                     double output_weight_scale = 0.01) {
  if (num_classes < 2) throw UsageError("make_op_scaler: need K >= 2");
  if (hidden_width < 1) throw UsageError("make_op_scaler: hidden width must be >= 1");
  OPScalerParams p;
  p.num_classes = num_classes;
  p.backbone = make_mlp({num_classes, hidden_width, hidden_width, num_classes}, Activation::ReLU, rng);
  for (double& w : p.backbone.weights.back().data()) w *= output_weight_scale;
  auto& out_bias = p.backbone.biases.back();
  std::fill(out_bias.begin(), out_bias.end(), kUnitGapActivation);
  out_bias.back() = 0.0;
  return p;
}

/// Descending sort order; equal values keep the lower original index first.
inline std::vector<std::size_t> descending_order(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });
  return order;
}

namespace detail {

/// Build one scaled row z from raw logits x and backbone activations a.
inline void op_compose_row(std::span<const double> x, std::span<const double> a,
                           std::span<const std::size_t> order, std::span<double> z) {
  const std::size_t K = x.size();
  double acc = a[K - 1];
  z[order[K - 1]] = acc;
  for (std::size_t i = K - 1; i-- > 0;) {
    const double gap = x[order[i]] - x[order[i + 1]];
    const double w = softplus(a[i]) * gap;
    double next = acc + w;
    // A positive gap must stay strictly positive after rounding.
    if (gap > 0.0 && !(next > acc)) next = std::nextafter(acc, std::numeric_limits<double>::infinity());
    acc = next;
    z[order[i]] = acc;
  }
}

}  // namespace detail

/// Scaled logits z (before the softmax).
inline Matrix op_scaler_logits(const OPScalerParams& p, const Matrix& logits) {
  if (logits.cols() != p.num_classes)
    throw DimensionError("op_scaler: logits have " + std::to_string(logits.cols()) +
                         " columns, scaler expects " + std::to_string(p.num_classes));
  const Matrix a = forward(p.backbone, logits);
  Matrix z(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto x = logits.row(r);
    const auto order = descending_order(x);
    detail::op_compose_row(x, a.row(r), order, z.row(r));
  }
  return z;
}

inline Matrix op_scaler_apply(const OPScalerParams& p, const Matrix& logits) {
  return softmax(op_scaler_logits(p, logits));
}

struct ScalerLossAndGrad {
  double loss = 0.0;
  MLPGrad grad;
};

/// Mean NLL of op_scaler_apply and its gradient with respect to the backbone.
/// The sort permutation is held fixed; kinks take the one-sided derivative.
inline ScalerLossAndGrad op_scaler_loss_and_grad(const OPScalerParams& p, const Matrix& logits,
                                                 const Labels& labels) {
  if (logits.cols() != p.num_classes) throw DimensionError("op_scaler: logits width mismatch");
  check_labels(labels, logits.rows(), p.num_classes);
  const std::size_t n = logits.rows(), K = p.num_classes;
  ForwardCache cache;
  const Matrix a = forward(p.backbone, logits, &cache);
  Matrix z(n, K);
  std::vector<std::vector<std::size_t>> orders(n);
  for (std::size_t r = 0; r < n; ++r) {
    orders[r] = descending_order(logits.row(r));
    detail::op_compose_row(logits.row(r), a.row(r), orders[r], z.row(r));
  }
  auto lg = nll_loss_and_grad(z, labels);

  Matrix da(n, K);
  for (std::size_t r = 0; r < n; ++r) {
    auto x = logits.row(r);
    auto g = lg.grad.row(r);
    auto ar = a.row(r);
    auto dar = da.row(r);
    const auto& order = orders[r];
    // dL/dw_j = sum_{i <= j} dL/dz_sorted_i
    double prefix = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      prefix += g[order[j]];
      if (j + 1 < K) {
        const double gap = x[order[j]] - x[order[j + 1]];
        dar[j] = prefix * sigmoid(ar[j]) * gap;
      } else {
        dar[j] = prefix;
      }
    }
  }
  return {lg.loss, backward(p.backbone, cache, std::move(da))};
}

struct ScalerFitOptions {
  std::size_t epochs = 50;
  double lr = 0.01;
  std::size_t batch_size = 256;  // full batch when the data is smaller
};

/// SGD on the scaler NLL. Deterministic given `rng`.
inline OPScalerParams op_scaler_fit(OPScalerParams p, const Matrix& logits, const Labels& labels,
                                    const ScalerFitOptions& opt, Rng& rng) {
  if (logits.rows() == 0) throw UsageError("op_scaler_fit: empty data");
  check_labels(labels, logits.rows(), p.num_classes);
  std::vector<std::size_t> order(logits.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    if (order.size() <= bs) {
      auto lg = op_scaler_loss_and_grad(p, logits, labels);
      sgd_step(p.backbone, lg.grad, opt.lr, nullptr);
      continue;
    }
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t stop = std::min(order.size(), start + bs);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      Labels yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = labels[idx[i]];
      auto lg = op_scaler_loss_and_grad(p, select_rows(logits, idx), yb);
      sgd_step(p.backbone, lg.grad, opt.lr, nullptr);
    }
  }
  return p;
}

inline double op_scaler_nll(const OPScalerParams& p, const Matrix& logits, const Labels& labels) {
  return nll_loss(op_scaler_logits(p, logits), labels);
}

}  // namespace fedcal
