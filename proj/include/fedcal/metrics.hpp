#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "json.hpp"

#include "fedcal/errors.hpp"
#include "fedcal/tensor.hpp"

namespace fedcal {

inline constexpr std::size_t kDefaultBins = 15;

/// Predicted class probabilities (rows on the simplex) with true labels.
struct PredictionSet {
  Matrix probs;
  Labels labels;
};

/// Per-bin calibration statistics over equal-width bins (c_{m-1}, c_m].
struct ReliabilityReport {
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;
  std::vector<double> confidence;  // mean max-probability per bin, 0 for empty bins
  std::vector<double> accuracy;    // fraction correct per bin, 0 for empty bins
  double ece = 0.0;
  double top1_accuracy = 0.0;
};

/// Bin index of a confidence value: m such that m/M < c <= (m+1)/M, with c <= 0 in bin 0.
inline std::size_t confidence_bin(double conf, std::size_t num_bins) noexcept {
  const double M = static_cast<double>(num_bins);
  double scaled = std::ceil(conf * M);
  std::size_t m = scaled < 1.0 ? 0 : static_cast<std::size_t>(scaled) - 1;
  if (m >= num_bins) m = num_bins - 1;
  // ceil(conf*M) can be off by one when conf*M rounds across an integer.
  const auto edge = [&](std::size_t i) { return static_cast<double>(i) / M; };
  while (m > 0 && conf <= edge(m)) --m;
  while (m + 1 < num_bins && conf > edge(m + 1)) ++m;
  return m;
}

inline ReliabilityReport ece(const PredictionSet& preds, std::size_t num_bins = kDefaultBins) {
  if (num_bins < 1) throw UsageError("ece: need at least one bin");
  const std::size_t n = preds.probs.rows();
  if (n == 0) throw UsageError("ece: empty prediction set");
  check_labels(preds.labels, n, preds.probs.cols());

  ReliabilityReport rep;
  rep.bin_edges.resize(num_bins + 1);
  for (std::size_t m = 0; m <= num_bins; ++m)
    rep.bin_edges[m] = static_cast<double>(m) / static_cast<double>(num_bins);
  rep.counts.assign(num_bins, 0);
  std::vector<double> conf_sum(num_bins, 0.0);
  std::vector<std::size_t> correct(num_bins, 0);
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = preds.probs.row(i);
    const std::size_t pred = argmax(row);
    const double conf = row[pred];
    const std::size_t m = confidence_bin(conf, num_bins);
    ++rep.counts[m];
    conf_sum[m] += conf;
    if (static_cast<int>(pred) == preds.labels[i]) {
      ++correct[m];
      ++total_correct;
    }
  }
  rep.confidence.assign(num_bins, 0.0);
  rep.accuracy.assign(num_bins, 0.0);
  const double N = static_cast<double>(n);
  for (std::size_t m = 0; m < num_bins; ++m) {
    if (rep.counts[m] == 0) continue;
    const double cnt = static_cast<double>(rep.counts[m]);
    rep.confidence[m] = conf_sum[m] / cnt;
    rep.accuracy[m] = static_cast<double>(correct[m]) / cnt;
    rep.ece += cnt / N * std::abs(rep.confidence[m] - rep.accuracy[m]);
  }
  rep.top1_accuracy = static_cast<double>(total_correct) / N;
  return rep;
}

/// Fraction of rows whose label is among the k largest probabilities.
/// Ranking is by value descending, lower class index first on ties.
inline double topk_accuracy(const PredictionSet& preds, std::size_t k) {
  const std::size_t n = preds.probs.rows(), K = preds.probs.cols();
  if (k < 1 || k > K) throw UsageError("topk_accuracy: k must be in [1, K]");
  check_labels(preds.labels, n, K);
  if (n == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = preds.probs.row(i);
    const auto y = static_cast<std::size_t>(preds.labels[i]);
    // Rank of y = number of classes strictly ahead of it.
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < K; ++j)
      if (row[j] > row[y] || (row[j] == row[y] && j < y)) ++ahead;
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

struct CalibrationSummary {
  double mean_local_ece = 0.0;
  double max_local_ece = 0.0;
  double var_local_ece = 0.0;  // population variance
  double global_ece = 0.0;
  double global_top1 = 0.0;
};

inline CalibrationSummary local_global_summary(const std::vector<ReliabilityReport>& per_client,
                                               const ReliabilityReport& global_report) {
  if (per_client.empty()) throw UsageError("local_global_summary: no client reports");
  CalibrationSummary s;
  const double n = static_cast<double>(per_client.size());
  for (const auto& r : per_client) {
    s.mean_local_ece += r.ece;
    s.max_local_ece = std::max(s.max_local_ece, r.ece);
  }
  s.mean_local_ece /= n;
  for (const auto& r : per_client) s.var_local_ece += (r.ece - s.mean_local_ece) * (r.ece - s.mean_local_ece);
  s.var_local_ece /= n;
  s.global_ece = global_report.ece;
  s.global_top1 = global_report.top1_accuracy;
  return s;
}

inline nlohmann::json to_json(const ReliabilityReport& r) {
  return nlohmann::json{{"bin_edges", r.bin_edges}, {"counts", r.counts},
                        {"confidence", r.confidence}, {"accuracy", r.accuracy},
                        {"ece", r.ece},           {"top1_accuracy", r.top1_accuracy}};
}

inline ReliabilityReport reliability_from_json(const nlohmann::json& j) {
  ReliabilityReport r;
  j.at("bin_edges").get_to(r.bin_edges);
  j.at("counts").get_to(r.counts);
  j.at("confidence").get_to(r.confidence);
  j.at("accuracy").get_to(r.accuracy);
  j.at("ece").get_to(r.ece);
  j.at("top1_accuracy").get_to(r.top1_accuracy);
  return r;
}

}  // namespace fedcal
