#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fedcal/baselines.hpp"
#include "fedcal/datasets.hpp"
#include "fedcal/errors.hpp"
#include "fedcal/matching.hpp"
#include "fedcal/metrics.hpp"
#include "fedcal/mlp.hpp"
#include "fedcal/parallel.hpp"
#include "fedcal/rng.hpp"
#include "fedcal/scalers.hpp"

namespace fedcal {

enum class ScalerKind { None, Temperature, OpMlp };

/// Where a returning client's scaler training starts.
enum class ScalerInit {
  ContinueAligned,  // persistent local scaler, aligned to the global one
  ResetToGlobal,    // fresh copy of the global scaler each round
};

/// Which classifier produces the validation logits a client fits its scaler on.
enum class ScalerLogits {
  LocalModel,   // the freshly trained local classifier
  GlobalModel,  // the global classifier received this round
};

struct FedConfig {
  std::size_t num_clients = 20;
  std::size_t clients_per_round = 5;
  std::size_t rounds = 100;
  std::size_t local_epochs = 3;
  double lr = 0.01;
  std::size_t batch_size = 256;
  std::vector<std::size_t> classifier_hidden{64};

  ScalerKind scaler_kind = ScalerKind::None;
  std::size_t scaler_hidden_width = kDefaultScalerWidth;
  ScalerFitOptions scaler_fit{};
  bool weight_matching = true;
  ScalerInit scaler_init = ScalerInit::ContinueAligned;
  ScalerLogits scaler_logits = ScalerLogits::LocalModel;
  double scaler_init_noise = 1e-3;

  std::optional<double> fedprox_mu;
  std::uint64_t master_seed = 0;

  std::size_t metrics_every = 1;  // 0 disables per-round metrics; the final round is always recorded
  std::size_t num_bins = kDefaultBins;
  std::size_t threads = 1;        // parallel client updates; never changes results
};

inline void validate(const FedConfig& c) {
  if (c.num_clients < 1) throw UsageError("FedConfig: num_clients must be >= 1");
  if (c.clients_per_round < 1 || c.clients_per_round > c.num_clients)
    throw UsageError("FedConfig: clients_per_round must be in [1, num_clients]");
  if (c.rounds < 1) throw UsageError("FedConfig: rounds must be >= 1");
  if (c.local_epochs < 1) throw UsageError("FedConfig: local_epochs must be >= 1");
  if (!(c.lr >= 0.0)) throw UsageError("FedConfig: lr must be non-negative");
  if (c.batch_size < 1) throw UsageError("FedConfig: batch_size must be >= 1");
  if (c.scaler_hidden_width < 1) throw UsageError("FedConfig: scaler_hidden_width must be >= 1");
  if (c.fedprox_mu && !(*c.fedprox_mu >= 0.0)) throw UsageError("FedConfig: fedprox_mu must be >= 0");
  if (c.num_bins < 1) throw UsageError("FedConfig: num_bins must be >= 1");
}

/// The server-side calibrator of a run.
struct GlobalScaler {
  ScalerKind kind = ScalerKind::None;
  TemperatureScaler temperature{};
  std::optional<OPScalerParams> op;

  Matrix apply(const Matrix& logits) const {
    switch (kind) {
      case ScalerKind::Temperature:
        return temp_apply(temperature, logits);
      case ScalerKind::OpMlp:
        return op_scaler_apply(*op, logits);
      case ScalerKind::None:
        break;
    }
    return softmax(logits);
  }
};

struct EvaluationResult {
  CalibrationSummary summary;
  double top3 = 0.0;
  ReliabilityReport global_report;
};

struct RoundMetrics {
  std::size_t round = 0;
  CalibrationSummary summary;
  double top3 = 0.0;
};

struct RoundState {
  std::size_t round = 0;
  MLPModel global_model;
  GlobalScaler global_scaler;
  std::optional<RoundMetrics> metrics;
};

/// Evaluate a logits -> probabilities calibrator of `model` on the global test
/// set and on every client's full local data.
inline EvaluationResult evaluate_calibration(const MLPModel& model, const ProbabilityMap& calibrate,
                                             const Dataset& test, const std::vector<ClientShard>& shards,
                                             std::size_t num_bins) {
  EvaluationResult out;
  PredictionSet global{calibrate(forward(model, test.features)), test.labels};
  out.global_report = ece(global, num_bins);
  out.top3 = topk_accuracy(global, std::min<std::size_t>(3, global.probs.cols()));
  std::vector<ReliabilityReport> local;
  local.reserve(shards.size());
  for (const auto& s : shards) {
    const Dataset d = local_data(s);
    local.push_back(ece(PredictionSet{calibrate(forward(model, d.features)), d.labels}, num_bins));
  }
  out.summary = local_global_summary(local, out.global_report);
  return out;
}

/// Per-client state that survives between rounds.
struct ClientState {
  std::optional<OPScalerParams> local_scaler;
};

struct ClientResult {
  std::size_t client_id = 0;
  MLPModel model;
  std::size_t num_samples = 0;
  std::optional<OPScalerParams> op_scaler;
  std::optional<TemperatureScaler> temperature;
  std::vector<std::string> warnings;
};

/// One client's round: align the persistent scaler to the global one, train the
/// classifier from the global model, then refit the scaler on validation logits.
inline ClientResult client_update(const ClientShard& client, const MLPModel& global_model,
                                  const GlobalScaler& global_scaler, const FedConfig& cfg,
                                  ClientState& state, std::size_t round) {
  if (client.train.size() == 0) throw UsageError("client_update: client has no training data");
  const std::uint64_t cid = client.client_id;
  ClientResult res;
  res.client_id = client.client_id;
  res.num_samples = client.train.size();

  std::optional<OPScalerParams> scaler;
  if (cfg.scaler_kind == ScalerKind::OpMlp) {
    const OPScalerParams& g = *global_scaler.op;
    if (cfg.scaler_init == ScalerInit::ResetToGlobal) {
      scaler = g;
    } else if (!state.local_scaler) {
      scaler = g;
      Rng noise_rng = make_rng(cfg.master_seed, {stream::kScalerNoise, cid});
      std::normal_distribution<double> n01(0.0, 1.0);
      zip_params(scaler->backbone, scaler->backbone,
                 [&](double& x, double&) { x += cfg.scaler_init_noise * n01(noise_rng); });
    } else {
      scaler = *state.local_scaler;
    }
    if (cfg.weight_matching && cfg.scaler_init == ScalerInit::ContinueAligned) {
      const auto perms =
          weight_matching(g.backbone, scaler->backbone, derive_seed(cfg.master_seed, {round, cid}));
      scaler->backbone = apply_permutation(scaler->backbone, perms);
    }
  }

  SgdOptions opt{cfg.local_epochs, cfg.lr, cfg.batch_size, std::nullopt};
  if (cfg.fedprox_mu) opt.prox = ProxTerm{*cfg.fedprox_mu, global_model};
  Rng train_rng = make_rng(cfg.master_seed, {stream::kTrain, round, cid});
  res.model = sgd_train(global_model, client.train.features, client.train.labels, opt, train_rng);

  if (cfg.scaler_kind != ScalerKind::None) {
    if (client.validation.size() == 0) {
      res.warnings.push_back("client " + std::to_string(cid) + ": empty validation split, scaler not trained");
    } else {
      const MLPModel& source = cfg.scaler_logits == ScalerLogits::LocalModel ? res.model : global_model;
      const Matrix val_logits = forward(source, client.validation.features);
      if (cfg.scaler_kind == ScalerKind::OpMlp) {
        Rng scaler_rng = make_rng(cfg.master_seed, {stream::kScaler, round, cid});
        scaler = op_scaler_fit(std::move(*scaler), val_logits, client.validation.labels, cfg.scaler_fit,
                               scaler_rng);
      } else {
        res.temperature = temp_fit(val_logits, client.validation.labels);
      }
    }
  }
  if (scaler) {
    state.local_scaler = scaler;
    res.op_scaler = std::move(scaler);
  }
  return res;
}

struct WeightedModel {
  std::size_t client_id = 0;
  MLPModel model;
  std::size_t num_samples = 0;
};

/// FedAvg: sum_c (n_c / N) theta_c, accumulated in client-id order.
inline MLPModel aggregate_models(std::vector<WeightedModel> clients) {
  if (clients.empty()) throw UsageError("aggregate_models: no clients");
  std::stable_sort(clients.begin(), clients.end(),
                   [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  double total = 0.0;
  for (const auto& c : clients) {
    if (!same_architecture(c.model, clients.front().model))
      throw UsageError("aggregate_models: architecture mismatch");
    total += static_cast<double>(c.num_samples);
  }
  if (!(total > 0.0)) throw UsageError("aggregate_models: total sample count is zero");
  MLPModel out = zero_mlp(clients.front().model.layer_sizes, clients.front().model.hidden_activation);
  for (const auto& c : clients) {
    const double w = static_cast<double>(c.num_samples) / total;
    zip_params(out, c.model, [w](double& acc, const double& x) { acc += w * x; });
  }
  return out;
}

/// Uniform parameter mean of (already aligned) scalers, in the given order.
inline OPScalerParams aggregate_scalers(const std::vector<OPScalerParams>& scalers) {
  if (scalers.empty()) throw UsageError("aggregate_scalers: no scalers");
  const OPScalerParams& first = scalers.front();
  OPScalerParams out{zero_mlp(first.backbone.layer_sizes, first.backbone.hidden_activation), first.num_classes};
  const double w = 1.0 / static_cast<double>(scalers.size());
  for (const auto& s : scalers) {
    if (!same_architecture(s.backbone, first.backbone) || s.num_classes != first.num_classes)
      throw UsageError("aggregate_scalers: architecture mismatch");
    zip_params(out.backbone, s.backbone, [w](double& acc, const double& x) { acc += w * x; });
  }
  return out;
}

/// m distinct client ids drawn uniformly without replacement, sorted ascending.
inline std::vector<std::size_t> select_clients(std::size_t num_clients, std::size_t m, Rng& rng) {
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, num_clients - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline MLPModel initial_classifier(std::size_t input_dim, std::size_t num_classes, const FedConfig& cfg) {
  std::vector<std::size_t> sizes{input_dim};
  sizes.insert(sizes.end(), cfg.classifier_hidden.begin(), cfg.classifier_hidden.end());
  sizes.push_back(num_classes);
  Rng rng = make_rng(cfg.master_seed, {stream::kInit});
  return make_mlp(std::move(sizes), Activation::ReLU, rng);
}

inline GlobalScaler initial_scaler(std::size_t num_classes, const FedConfig& cfg) {
  GlobalScaler g;
  g.kind = cfg.scaler_kind;
  if (cfg.scaler_kind == ScalerKind::OpMlp) {
    Rng rng = make_rng(cfg.master_seed, {stream::kScalerInit});
    g.op = make_op_scaler(num_classes, cfg.scaler_hidden_width, rng);
  }
  return g;
}

struct FederationResult {
  RoundState final_state;
  std::vector<RoundMetrics> metrics;
  std::vector<std::string> warnings;
};

/// Called after aggregation in every round: (state, client states).
using RoundObserver = std::function<void(const RoundState&, const std::vector<ClientState>&)>;

inline bool is_metrics_round(std::size_t round, const FedConfig& cfg) {
  return round == cfg.rounds || (cfg.metrics_every > 0 && round % cfg.metrics_every == 0);
}

/// FedAvg with optional in-loop scaler training and aggregation.
inline FederationResult run_federation(const std::vector<ClientShard>& shards, const Dataset& test,
                                       const FedConfig& cfg, const RoundObserver& observer = {}) {
  validate(cfg);
  if (shards.size() != cfg.num_clients)
    throw UsageError("run_federation: expected " + std::to_string(cfg.num_clients) + " shards, got " +
                     std::to_string(shards.size()));
  for (std::size_t c = 0; c < shards.size(); ++c)
    if (shards[c].client_id != c) throw UsageError("run_federation: shards must be ordered by client_id");
  const std::size_t K = shards.front().train.num_classes;
  const std::size_t d = shards.front().train.dim();

  FederationResult out;
  RoundState state{0, initial_classifier(d, K, cfg), initial_scaler(K, cfg), std::nullopt};
  std::vector<ClientState> clients(cfg.num_clients);

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    Rng select_rng = make_rng(cfg.master_seed, {stream::kSelect, t});
    const auto chosen = select_clients(cfg.num_clients, cfg.clients_per_round, select_rng);
    std::vector<ClientResult> results(chosen.size());
    parallel_for(chosen.size(), cfg.threads, [&](std::size_t i) {
      const std::size_t c = chosen[i];
      results[i] = client_update(shards[c], state.global_model, state.global_scaler, cfg, clients[c], t);
    });

    std::vector<WeightedModel> models;
    std::vector<OPScalerParams> op_scalers;
    std::vector<double> temps;
    for (auto& r : results) {
      for (auto& w : r.warnings) out.warnings.push_back("round " + std::to_string(t) + ": " + w);
      models.push_back({r.client_id, std::move(r.model), r.num_samples});
      if (r.op_scaler) op_scalers.push_back(std::move(*r.op_scaler));
      if (r.temperature) temps.push_back(r.temperature->temperature);
    }
    state.global_model = aggregate_models(std::move(models));
    if (!op_scalers.empty()) state.global_scaler.op = aggregate_scalers(op_scalers);
    if (!temps.empty())
      state.global_scaler.temperature.temperature = combine_temperatures(temps, TemperatureReduction::Mean);
    state.round = t;
    state.metrics.reset();

    if (is_metrics_round(t, cfg)) {
      const GlobalScaler& gs = state.global_scaler;
      const auto ev = evaluate_calibration(
          state.global_model, [&gs](const Matrix& x) { return gs.apply(x); }, test, shards, cfg.num_bins);
      state.metrics = RoundMetrics{t, ev.summary, ev.top3};
      out.metrics.push_back(*state.metrics);
    }
    if (observer) observer(state, clients);
  }
  out.final_state = std::move(state);
  return out;
}

}  // namespace fedcal
