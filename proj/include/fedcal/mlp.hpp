#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/rng.hpp"
#include "fedcal/tensor.hpp"

namespace fedcal {

enum class Activation { ReLU, Softplus };

inline double softplus(double a) noexcept {
  // log(1 + e^a) without overflow
  return a > 30.0 ? a : (a < -30.0 ? std::exp(a) : std::log1p(std::exp(a)));
}

inline double sigmoid(double a) noexcept {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

/// Fully connected network. weights[l] is (layer_sizes[l+1] x layer_sizes[l]);
/// the hidden activation is applied after every layer except the last.
struct MLPModel {
  std::vector<std::size_t> layer_sizes;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  Activation hidden_activation = Activation::ReLU;

  std::size_t num_layers() const noexcept { return weights.size(); }
  std::size_t input_size() const noexcept { return layer_sizes.front(); }
  std::size_t output_size() const noexcept { return layer_sizes.back(); }

  bool operator==(const MLPModel&) const = default;
};

inline void validate(const MLPModel& m) {
  if (m.layer_sizes.size() < 2) throw DimensionError("MLPModel: need at least two layer sizes");
  const std::size_t L = m.layer_sizes.size() - 1;
  if (m.weights.size() != L || m.biases.size() != L)
    throw DimensionError("MLPModel: layer count mismatch");
  for (std::size_t l = 0; l < L; ++l) {
    if (m.weights[l].rows() != m.layer_sizes[l + 1] || m.weights[l].cols() != m.layer_sizes[l])
      throw DimensionError("MLPModel: weight " + std::to_string(l) + " has wrong shape");
    if (m.biases[l].size() != m.layer_sizes[l + 1])
      throw DimensionError("MLPModel: bias " + std::to_string(l) + " has wrong length");
  }
}

inline bool same_architecture(const MLPModel& a, const MLPModel& b) noexcept {
  return a.layer_sizes == b.layer_sizes && a.hidden_activation == b.hidden_activation;
}

inline MLPModel zero_mlp(std::vector<std::size_t> sizes, Activation act = Activation::ReLU) {
  MLPModel m;
  m.layer_sizes = std::move(sizes);
  m.hidden_activation = act;
  for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
    m.weights.emplace_back(m.layer_sizes[l + 1], m.layer_sizes[l]);
    m.biases.emplace_back(m.layer_sizes[l + 1], 0.0);
  }
  validate(m);
  return m;
}

/// Glorot-uniform weights, zero biases.
inline MLPModel make_mlp(std::vector<std::size_t> sizes, Activation act, Rng& rng) {
  MLPModel m = zero_mlp(std::move(sizes), act);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const double fan = static_cast<double>(m.layer_sizes[l] + m.layer_sizes[l + 1]);
    std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan), std::sqrt(6.0 / fan));
    for (double& w : m.weights[l].data()) w = u(rng);
  }
  return m;
}

inline std::size_t num_params(const MLPModel& m) noexcept {
  std::size_t n = 0;
  for (std::size_t l = 0; l < m.num_layers(); ++l) n += m.weights[l].size() + m.biases[l].size();
  return n;
}

/// Visit every parameter of `a` alongside the matching parameter of `b`.
template <typename A, typename B, typename F>
void zip_params(A& a, B& b, F&& f) {
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    auto& wa = a.weights[l].data();
    auto& wb = b.weights[l].data();
    for (std::size_t i = 0; i < wa.size(); ++i) f(wa[i], wb[i]);
    auto& ba = a.biases[l];
    auto& bb = b.biases[l];
    for (std::size_t i = 0; i < ba.size(); ++i) f(ba[i], bb[i]);
  }
}

/// vec(a) . vec(b) over all weights and biases.
inline double param_dot(const MLPModel& a, const MLPModel& b) {
  if (!same_architecture(a, b)) throw UsageError("param_dot: architecture mismatch");
  double s = 0.0;
  zip_params(a, b, [&](double x, double y) { s += x * y; });
  return s;
}

namespace detail {

// out = in * W^T + b
inline Matrix affine(const Matrix& in, const Matrix& w, const Vector& b) {
  const std::size_t n = in.rows(), k = in.cols(), o = w.rows();
  Matrix out(n, o);
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = in.row(r).data();
    double* y = out.row(r).data();
    for (std::size_t j = 0; j < o; ++j) {
      const double* wr = w.row(j).data();
      double s = b[j];
      for (std::size_t t = 0; t < k; ++t) s += x[t] * wr[t];
      y[j] = s;
    }
  }
  return out;
}

inline double activate(Activation act, double v) noexcept {
  return act == Activation::ReLU ? (v > 0.0 ? v : 0.0) : softplus(v);
}

inline double activate_grad(Activation act, double pre) noexcept {
  return act == Activation::ReLU ? (pre > 0.0 ? 1.0 : 0.0) : sigmoid(pre);
}

}  // namespace detail

/// Per-layer inputs and pre-activations kept for backpropagation.
struct ForwardCache {
  std::vector<Matrix> inputs;  // inputs[l] feeds layer l
  std::vector<Matrix> pre;     // pre[l] = inputs[l] * W_l^T + b_l
};

inline Matrix forward(const MLPModel& model, const Matrix& batch, ForwardCache* cache = nullptr) {
  if (batch.cols() != model.input_size())
    throw DimensionError("forward: batch has " + std::to_string(batch.cols()) +
                         " columns, model expects " + std::to_string(model.input_size()));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix act = batch;
  const std::size_t L = model.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    Matrix pre = detail::affine(act, model.weights[l], model.biases[l]);
    if (cache) {
      cache->inputs.push_back(std::move(act));
      cache->pre.push_back(pre);
    }
    if (l + 1 < L)
      for (double& v : pre.data()) v = detail::activate(model.hidden_activation, v);
    act = std::move(pre);
  }
  return act;
}

/// Gradients laid out like the model's parameters.
struct MLPGrad {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

/// Backpropagate d loss / d output through the cached forward pass.
inline MLPGrad backward(const MLPModel& model, const ForwardCache& cache, Matrix delta) {
  const std::size_t L = model.num_layers();
  MLPGrad g;
  g.weights.resize(L);
  g.biases.resize(L);
  for (std::size_t li = L; li-- > 0;) {
    const Matrix& in = cache.inputs[li];
    const Matrix& w = model.weights[li];
    const std::size_t n = in.rows(), k = in.cols(), o = w.rows();
    Matrix gw(o, k);
    Vector gb(o, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* d = delta.row(r).data();
      const double* x = in.row(r).data();
      for (std::size_t j = 0; j < o; ++j) {
        if (d[j] == 0.0) continue;
        gb[j] += d[j];
        double* gwr = gw.row(j).data();
        for (std::size_t t = 0; t < k; ++t) gwr[t] += d[j] * x[t];
      }
    }
    g.weights[li] = std::move(gw);
    g.biases[li] = std::move(gb);
    if (li == 0) break;
    Matrix prev(n, k);
    const Matrix& pre_prev = cache.pre[li - 1];
    for (std::size_t r = 0; r < n; ++r) {
      const double* d = delta.row(r).data();
      double* p = prev.row(r).data();
      for (std::size_t j = 0; j < o; ++j) {
        if (d[j] == 0.0) continue;
        const double* wr = w.row(j).data();
        for (std::size_t t = 0; t < k; ++t) p[t] += d[j] * wr[t];
      }
      for (std::size_t t = 0; t < k; ++t)
        p[t] *= detail::activate_grad(model.hidden_activation, pre_prev(r, t));
    }
    delta = std::move(prev);
  }
  return g;
}

struct ProxTerm {
  double mu = 0.0;
  MLPModel anchor;
};

struct SgdOptions {
  std::size_t epochs = 1;
  double lr = 0.01;
  std::size_t batch_size = 32;
  std::optional<ProxTerm> prox;
};

/// w <- w - lr * (grad + mu (w - anchor)) applied in place.
inline void sgd_step(MLPModel& model, const MLPGrad& g, double lr, const ProxTerm* prox) {
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    auto& w = model.weights[l].data();
    const auto& gw = g.weights[l].data();
    auto& b = model.biases[l];
    const auto& gb = g.biases[l];
    if (prox) {
      const auto& aw = prox->anchor.weights[l].data();
      const auto& ab = prox->anchor.biases[l];
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (gw[i] + prox->mu * (w[i] - aw[i]));
      for (std::size_t i = 0; i < b.size(); ++i) b[i] -= lr * (gb[i] + prox->mu * (b[i] - ab[i]));
    } else {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
      for (std::size_t i = 0; i < b.size(); ++i) b[i] -= lr * gb[i];
    }
  }
}

/// Mini-batch SGD on mean NLL. Each epoch reshuffles all rows with `rng`;
/// the last partial batch is kept.
inline MLPModel sgd_train(MLPModel model, const Matrix& features, const Labels& labels,
                          const SgdOptions& opt, Rng& rng) {
  if (features.rows() == 0) throw UsageError("sgd_train: empty training data");
  if (!(opt.lr >= 0.0)) throw UsageError("sgd_train: learning rate must be non-negative");
  if (opt.batch_size == 0) throw UsageError("sgd_train: batch_size must be positive");
  check_labels(labels, features.rows(), model.output_size());
  if (opt.prox && !same_architecture(opt.prox->anchor, model))
    throw UsageError("sgd_train: prox anchor architecture mismatch");

  std::vector<std::size_t> order(features.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const ProxTerm* prox = opt.prox ? &*opt.prox : nullptr;
  ForwardCache cache;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      Matrix xb = select_rows(features, idx);
      Labels yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = labels[idx[i]];
      Matrix logits = forward(model, xb, &cache);
      auto lg = nll_loss_and_grad(logits, yb);
      MLPGrad g = backward(model, cache, std::move(lg.grad));
      sgd_step(model, g, opt.lr, prox);
    }
  }
  return model;
}

}  // namespace fedcal
