#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/rng.hpp"
#include "fedcal/tensor.hpp"

namespace fedcal {

struct Dataset {
  Matrix features;  // N x d, values in [0, 1]
  Labels labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
};

inline void validate(const Dataset& d) {
  check_labels(d.labels, d.features.rows(), d.num_classes);
  if (!all_finite(d.features)) throw ValidationError("Dataset: non-finite feature value");
}

inline Dataset subset(const Dataset& d, std::span<const std::size_t> idx) {
  Dataset out{select_rows(d.features, idx), Labels(idx.size()), d.num_classes};
  for (std::size_t i = 0; i < idx.size(); ++i) out.labels[i] = d.labels[idx[i]];
  return out;
}

inline std::vector<std::size_t> class_counts(const Dataset& d) {
  std::vector<std::size_t> c(d.num_classes, 0);
  for (int y : d.labels) ++c[static_cast<std::size_t>(y)];
  return c;
}

/// One client's data. The index vectors point into the dataset that was partitioned.
struct ClientShard {
  std::size_t client_id = 0;
  Dataset train;
  Dataset validation;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> val_index;

  std::size_t size() const noexcept { return train.size() + validation.size(); }
};

/// Train and validation rows stacked, for evaluating on the client's whole local distribution.
inline Dataset local_data(const ClientShard& s) {
  Dataset out{Matrix(s.size(), s.train.dim()), s.train.labels, s.train.num_classes};
  std::copy(s.train.features.data().begin(), s.train.features.data().end(),
            out.features.data().begin());
  std::copy(s.validation.features.data().begin(), s.validation.features.data().end(),
            out.features.data().begin() + static_cast<std::ptrdiff_t>(s.train.features.size()));
  out.labels.insert(out.labels.end(), s.validation.labels.begin(), s.validation.labels.end());
  return out;
}

struct PartitionSpec {
  std::size_t num_clients = 20;
  double beta = 0.5;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
};

/// K isotropic Gaussian blobs with seeded centers in [0,1]^d, clamped to [0,1].
/// Rows are grouped by class.
inline Dataset generate_synthetic(std::size_t num_classes, std::size_t dim, std::size_t per_class,
                                  double spread, std::uint64_t seed) {
  if (num_classes < 2) throw UsageError("generate_synthetic: need at least 2 classes");
  if (per_class < 1) throw UsageError("generate_synthetic: per_class must be >= 1");
  if (!(spread >= 0.0)) throw UsageError("generate_synthetic: spread must be >= 0");
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix centers(num_classes, dim);
  for (double& c : centers.data()) c = u(rng);

  Dataset d{Matrix(num_classes * per_class, dim), Labels(num_classes * per_class), num_classes};
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = k * per_class + i;
      d.labels[r] = static_cast<int>(k);
      for (std::size_t j = 0; j < dim; ++j) {
        const double z = spread > 0.0 ? noise(rng) : 0.0;
        d.features(r, j) = std::clamp(centers(k, j) + spread * z, 0.0, 1.0);
      }
    }
  }
  return d;
}

namespace detail {

inline std::uint32_t read_be32(std::ifstream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4))
    throw IoError("parse_idx: truncated header in " + path);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

inline std::ifstream open_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("parse_idx: cannot open " + path);
  return in;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Read an IDX image/label file pair (MNIST layout). Pixels are scaled by 1/255;
/// K is one more than the largest label.
inline Dataset parse_idx(const std::string& images_path, const std::string& labels_path) {
  auto img = detail::open_binary(images_path);
  auto lab = detail::open_binary(labels_path);

  const std::uint32_t img_magic = detail::read_be32(img, images_path);
  if (img_magic != kIdxImagesMagic)
    throw FormatError("parse_idx: bad image magic in " + images_path);
  const std::uint32_t lab_magic = detail::read_be32(lab, labels_path);
  if (lab_magic != kIdxLabelsMagic)
    throw FormatError("parse_idx: bad label magic in " + labels_path);

  const std::uint32_t n_img = detail::read_be32(img, images_path);
  const std::uint32_t rows = detail::read_be32(img, images_path);
  const std::uint32_t cols = detail::read_be32(img, images_path);
  const std::uint32_t n_lab = detail::read_be32(lab, labels_path);
  if (n_img != n_lab)
    throw FormatError("parse_idx: " + std::to_string(n_img) + " images but " +
                      std::to_string(n_lab) + " labels");
  if (n_img == 0) throw FormatError("parse_idx: empty dataset");

  const std::size_t d = std::size_t{rows} * cols;
  std::vector<unsigned char> pixels(std::size_t{n_img} * d);
  if (!img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
    throw IoError("parse_idx: truncated image data in " + images_path);
  std::vector<unsigned char> raw_labels(n_lab);
  if (!lab.read(reinterpret_cast<char*>(raw_labels.data()),
                static_cast<std::streamsize>(raw_labels.size())))
    throw IoError("parse_idx: truncated label data in " + labels_path);

  Dataset out{Matrix(n_img, d), Labels(n_img), 0};
  for (std::size_t i = 0; i < pixels.size(); ++i) out.features.data()[i] = pixels[i] / 255.0;
  int max_label = 0;
  for (std::size_t i = 0; i < n_img; ++i) {
    out.labels[i] = raw_labels[i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.num_classes = static_cast<std::size_t>(max_label) + 1;
  return out;
}

/// Convert proportions to integer counts summing exactly to `total`.
/// Remainders are handed out largest-fraction first, lower index on ties.
inline std::vector<std::size_t> largest_remainder(std::span<const double> proportions,
                                                  std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n, 0);
  std::vector<double> frac(n, 0.0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = proportions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  // Floating point can overshoot by one when proportions sum to slightly above 1.
  while (assigned > total) {
    std::size_t j = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (counts[i] > 0 && (counts[j] == 0 || frac[i] < frac[j])) j = i;
    --counts[j];
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % n, ++assigned) ++counts[order[i]];
  return counts;
}

/// Dir(beta, ..., beta) via normalised Gamma(beta, 1) draws.
inline std::vector<double> sample_dirichlet(std::size_t n, double beta, Rng& rng) {
  std::gamma_distribution<double> g(beta, 1.0);
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& v : p) {
    v = g(rng);
    sum += v;
  }
  if (sum <= 0.0) {
    // Every draw underflowed (tiny beta): put all mass on one uniformly chosen client.
    std::fill(p.begin(), p.end(), 0.0);
    p[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = 1.0;
    return p;
  }
  for (double& v : p) v /= sum;
  return p;
}

/// Split one client's sample indices into train/validation, stratified per class.
/// Classes with a single sample stay in train; the validation set is nonempty
/// whenever the client holds at least two samples.
inline void split_train_val(const Dataset& parent, std::vector<std::size_t> idx,
                            double val_fraction, Rng& rng, std::vector<std::size_t>& train,
                            std::vector<std::size_t>& val) {
  train.clear();
  val.clear();
  std::vector<std::vector<std::size_t>> by_class(parent.num_classes);
  for (std::size_t i : idx) by_class[static_cast<std::size_t>(parent.labels[i])].push_back(i);
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    std::size_t n_val = 0;
    if (members.size() >= 2) {
      n_val = static_cast<std::size_t>(std::floor(val_fraction * members.size() + 0.5));
      n_val = std::min(n_val, members.size() - 1);
    }
    val.insert(val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  if (val.empty() && idx.size() >= 2) {
    // Move one sample from the largest class.
    std::size_t best = 0;
    for (std::size_t k = 1; k < by_class.size(); ++k)
      if (by_class[k].size() > by_class[best].size()) best = k;
    const std::size_t pick = by_class[best].front();
    val.push_back(pick);
    train.erase(std::find(train.begin(), train.end(), pick));
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
}

inline constexpr int kMaxPartitionRedraws = 100;

/// Label-skew partition: for each class draw p ~ Dir(beta) over clients and deal
/// that class's samples out in those proportions. Redraws when a client ends up empty.
inline std::vector<ClientShard> dirichlet_partition(const Dataset& data, const PartitionSpec& spec) {
  if (spec.num_clients < 1) throw UsageError("dirichlet_partition: num_clients must be >= 1");
  if (!(spec.beta > 0.0)) throw UsageError("dirichlet_partition: beta must be > 0");
  if (!(spec.val_fraction > 0.0 && spec.val_fraction < 1.0))
    throw UsageError("dirichlet_partition: val_fraction must be in (0, 1)");
  if (data.size() < spec.num_clients)
    throw UsageError("dirichlet_partition: fewer samples than clients");

  const std::size_t C = spec.num_clients, K = data.num_classes;
  std::vector<std::vector<std::size_t>> by_class(K);
  for (std::size_t i = 0; i < data.size(); ++i)
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

  Rng rng = make_rng(spec.seed, {stream::kPartition});
  std::vector<std::vector<std::size_t>> assigned;
  bool ok = false;
  for (int attempt = 0; attempt < kMaxPartitionRedraws && !ok; ++attempt) {
    assigned.assign(C, {});
    for (std::size_t k = 0; k < K; ++k) {
      if (by_class[k].empty()) continue;
      std::vector<std::size_t> members = by_class[k];
      std::shuffle(members.begin(), members.end(), rng);
      const auto p = sample_dirichlet(C, spec.beta, rng);
      const auto counts = largest_remainder(p, members.size());
      std::size_t pos = 0;
      for (std::size_t c = 0; c < C; ++c) {
        assigned[c].insert(assigned[c].end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                           members.begin() + static_cast<std::ptrdiff_t>(pos + counts[c]));
        pos += counts[c];
      }
    }
    ok = std::none_of(assigned.begin(), assigned.end(), [](const auto& a) { return a.empty(); });
  }
  if (!ok)
    throw UsageError("dirichlet_partition: a client received no samples after " +
                     std::to_string(kMaxPartitionRedraws) +
                     " draws; use a larger dataset or a larger beta");

  std::vector<ClientShard> shards(C);
  for (std::size_t c = 0; c < C; ++c) {
    Rng split_rng = make_rng(spec.seed, {stream::kPartition, c + 1});
    ClientShard& s = shards[c];
    s.client_id = c;
    split_train_val(data, assigned[c], spec.val_fraction, split_rng, s.train_index, s.val_index);
    s.train = subset(data, s.train_index);
    s.validation = subset(data, s.val_index);
  }
  return shards;
}

/// Reserve a seeded random `fraction` of the pooled data as a global test set.
struct HoldoutSplit {
  Dataset rest;
  Dataset test;
};

inline HoldoutSplit split_holdout(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw UsageError("split_holdout: fraction must be in (0,1)");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_rng(seed, {stream::kHoldout});
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  if (n_test == 0 || n_test >= data.size()) throw UsageError("split_holdout: degenerate split");
  std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> rest(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  std::sort(test.begin(), test.end());
  std::sort(rest.begin(), rest.end());
  return {subset(data, rest), subset(data, test)};
}

}  // namespace fedcal
