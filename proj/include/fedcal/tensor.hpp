#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedcal/errors.hpp"

namespace fedcal {

using Vector = std::vector<double>;
using Labels = std::vector<int>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : init) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Gather a subset of rows, in the given order.
inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = m.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix scaled(Matrix m, double factor) {
  for (double& v : m.data()) v *= factor;
  return m;
}

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// In-place numerically stable softmax of one row.
inline void softmax_inplace(std::span<double> row) noexcept {
  if (row.empty()) return;
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

inline Matrix softmax(Matrix logits) {
  for (std::size_t r = 0; r < logits.rows(); ++r) softmax_inplace(logits.row(r));
  return logits;
}

/// log(sum(exp(row))) with max subtraction.
inline double log_sum_exp(std::span<const double> row) noexcept {
  const double mx = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - mx);
  return mx + std::log(s);
}

inline void check_labels(const Labels& labels, std::size_t rows, std::size_t num_classes) {
  if (labels.size() != rows)
    throw DimensionError("labels length " + std::to_string(labels.size()) + " != rows " +
                         std::to_string(rows));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw ValidationError("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(num_classes) + ")");
}

/// Mean negative log-likelihood of softmax(logits) at the labels.
inline double nll_loss(const Matrix& logits, const Labels& labels) {
  check_labels(labels, logits.rows(), logits.cols());
  if (logits.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    total += log_sum_exp(row) - row[static_cast<std::size_t>(labels[r])];
  }
  return total / static_cast<double>(logits.rows());
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits
};

/// Mean NLL and its gradient (softmax - onehot) / N with respect to the logits.
inline LossAndGrad nll_loss_and_grad(const Matrix& logits, const Labels& labels) {
  check_labels(labels, logits.rows(), logits.cols());
  LossAndGrad out{0.0, softmax(logits)};
  const std::size_t n = logits.rows();
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = logits.row(r);
    const auto y = static_cast<std::size_t>(labels[r]);
    out.loss += log_sum_exp(row) - row[y];
    auto g = out.grad.row(r);
    g[y] -= 1.0;
    for (double& v : g) v *= inv_n;
  }
  out.loss *= inv_n;
  return out;
}

}  // namespace fedcal
