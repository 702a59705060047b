#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedcal/baselines.hpp"
#include "fedcal/datasets.hpp"
#include "fedcal/errors.hpp"
#include "fedcal/fedsim.hpp"
#include "fedcal/matching.hpp"
#include "fedcal/metrics.hpp"
#include "fedcal/parallel.hpp"
#include "fedcal/rng.hpp"
#include "fedcal/scalers.hpp"

#ifndef FEDCAL_VERSION
#define FEDCAL_VERSION "0.1.0"
#endif

namespace fedcal {

using json = nlohmann::json;

inline constexpr const char* kVersion = FEDCAL_VERSION;

/// Every method the harness knows, in output order.
inline const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> m{"uncal", "val_ts", "ens", "avgt", "lrts",
                                          "fedcal", "fedcal_no_wm", "fedcal_small"};
  return m;
}

/// Methods evaluated post hoc on the scaler-free FedAvg run.
inline bool is_baseline(const std::string& m) {
  return m == "uncal" || m == "val_ts" || m == "ens" || m == "avgt" || m == "lrts";
}

inline std::size_t method_rank(const std::string& m) {
  const auto& all = all_methods();
  return static_cast<std::size_t>(std::find(all.begin(), all.end(), m) - all.begin());
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DatasetSpec {
  std::string kind = "synthetic";  // "synthetic" or "idx"
  std::size_t num_classes = 10;
  std::size_t dim = 20;
  std::size_t per_class = 600;
  double spread = 0.5;
  std::string idx_images;
  std::string idx_labels;
  std::size_t max_samples = 0;  // idx only, 0 keeps every sample
  double test_fraction = 0.2;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  PartitionSpec partition;
  FedConfig federation;
  std::size_t small_width = 8;  // scaler width of the fedcal_small variant
  std::vector<std::string> methods{"uncal", "val_ts", "ens", "avgt", "lrts", "fedcal"};
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return item.key() == k; });
    if (!known) throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) j.at(key).get_to(dst);
}

inline const char* to_string(ScalerInit v) {
  return v == ScalerInit::ContinueAligned ? "continue_aligned" : "reset_to_global";
}

inline const char* to_string(ScalerLogits v) {
  return v == ScalerLogits::LocalModel ? "local_model" : "global_model";
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  if (c.methods.empty()) throw ConfigError("config: method list is empty");
  for (std::size_t i = 0; i < c.methods.size(); ++i) {
    if (method_rank(c.methods[i]) == all_methods().size())
      throw ConfigError("config: unknown method '" + c.methods[i] + "'");
    for (std::size_t j = 0; j < i; ++j)
      if (c.methods[j] == c.methods[i]) throw ConfigError("config: duplicate method '" + c.methods[i] + "'");
  }
  const DatasetSpec& d = c.dataset;
  if (d.kind == "synthetic") {
    if (d.num_classes < 2) throw ConfigError("config: dataset.num_classes must be >= 2");
    if (d.dim < 1) throw ConfigError("config: dataset.dim must be >= 1");
    if (d.per_class < 1) throw ConfigError("config: dataset.per_class must be >= 1");
    if (!(d.spread >= 0.0)) throw ConfigError("config: dataset.spread must be >= 0");
  } else if (d.kind == "idx") {
    for (const auto& p : {d.idx_images, d.idx_labels}) {
      if (p.empty()) throw ConfigError("config: idx dataset needs both images and labels paths");
      if (!std::filesystem::exists(p)) throw ConfigError("config: file not found: " + p);
    }
  } else {
    throw ConfigError("config: dataset.kind must be 'synthetic' or 'idx', got '" + d.kind + "'");
  }
  if (!(d.test_fraction > 0.0 && d.test_fraction < 1.0))
    throw ConfigError("config: dataset.test_fraction must be in (0, 1)");
  if (c.partition.num_clients < 1) throw ConfigError("config: partition.num_clients must be >= 1");
  if (!(c.partition.beta > 0.0) || !std::isfinite(c.partition.beta))
    throw ConfigError("config: partition.beta must be positive");
  if (!(c.partition.val_fraction > 0.0 && c.partition.val_fraction < 1.0))
    throw ConfigError("config: partition.val_fraction must be in (0, 1)");
  if (c.small_width < 1) throw ConfigError("config: scaler.small_width must be >= 1");
  if (c.out_dir.empty()) throw ConfigError("config: out must not be empty");
  FedConfig f = c.federation;
  f.num_clients = c.partition.num_clients;
  try {
    validate(f);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    detail::check_keys(j, {"dataset", "partition", "federation", "methods", "seed", "bins", "metrics_every", "out"},
                       "config");
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      detail::check_keys(d, {"kind", "num_classes", "dim", "per_class", "spread", "images", "labels",
                             "max_samples", "test_fraction"},
                         "dataset");
      detail::read_opt(d, "kind", c.dataset.kind);
      detail::read_opt(d, "num_classes", c.dataset.num_classes);
      detail::read_opt(d, "dim", c.dataset.dim);
      detail::read_opt(d, "per_class", c.dataset.per_class);
      detail::read_opt(d, "spread", c.dataset.spread);
      detail::read_opt(d, "images", c.dataset.idx_images);
      detail::read_opt(d, "labels", c.dataset.idx_labels);
      detail::read_opt(d, "max_samples", c.dataset.max_samples);
      detail::read_opt(d, "test_fraction", c.dataset.test_fraction);
    }
    if (j.contains("partition")) {
      const json& p = j.at("partition");
      detail::check_keys(p, {"num_clients", "beta", "val_fraction"}, "partition");
      detail::read_opt(p, "num_clients", c.partition.num_clients);
      detail::read_opt(p, "beta", c.partition.beta);
      detail::read_opt(p, "val_fraction", c.partition.val_fraction);
    }
    if (j.contains("federation")) {
      const json& f = j.at("federation");
      detail::check_keys(f, {"clients_per_round", "rounds", "local_epochs", "lr", "batch_size",
                             "classifier_hidden", "fedprox_mu", "scaler"},
                         "federation");
      FedConfig& fc = c.federation;
      detail::read_opt(f, "clients_per_round", fc.clients_per_round);
      detail::read_opt(f, "rounds", fc.rounds);
      detail::read_opt(f, "local_epochs", fc.local_epochs);
      detail::read_opt(f, "lr", fc.lr);
      detail::read_opt(f, "batch_size", fc.batch_size);
      detail::read_opt(f, "classifier_hidden", fc.classifier_hidden);
      if (f.contains("fedprox_mu") && !f.at("fedprox_mu").is_null()) fc.fedprox_mu = f.at("fedprox_mu").get<double>();
      if (f.contains("scaler")) {
        const json& s = f.at("scaler");
        detail::check_keys(s, {"hidden_width", "small_width", "epochs", "lr", "batch_size", "weight_matching",
                               "init", "logits", "init_noise"},
                           "federation.scaler");
        detail::read_opt(s, "hidden_width", fc.scaler_hidden_width);
        detail::read_opt(s, "small_width", c.small_width);
        detail::read_opt(s, "epochs", fc.scaler_fit.epochs);
        detail::read_opt(s, "lr", fc.scaler_fit.lr);
        detail::read_opt(s, "batch_size", fc.scaler_fit.batch_size);
        detail::read_opt(s, "weight_matching", fc.weight_matching);
        detail::read_opt(s, "init_noise", fc.scaler_init_noise);
        if (s.contains("init")) {
          const auto v = s.at("init").get<std::string>();
          if (v == "continue_aligned") fc.scaler_init = ScalerInit::ContinueAligned;
          else if (v == "reset_to_global") fc.scaler_init = ScalerInit::ResetToGlobal;
          else throw ConfigError("federation.scaler.init: unknown value '" + v + "'");
        }
        if (s.contains("logits")) {
          const auto v = s.at("logits").get<std::string>();
          if (v == "local_model") fc.scaler_logits = ScalerLogits::LocalModel;
          else if (v == "global_model") fc.scaler_logits = ScalerLogits::GlobalModel;
          else throw ConfigError("federation.scaler.logits: unknown value '" + v + "'");
        }
      }
    }
    detail::read_opt(j, "methods", c.methods);
    detail::read_opt(j, "seed", c.seed);
    detail::read_opt(j, "bins", c.federation.num_bins);
    detail::read_opt(j, "metrics_every", c.federation.metrics_every);
    detail::read_opt(j, "out", c.out_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.federation.num_clients = c.partition.num_clients;
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  const FedConfig& f = c.federation;
  json dataset{{"kind", c.dataset.kind}, {"test_fraction", c.dataset.test_fraction}};
  if (c.dataset.kind == "idx") {
    dataset["images"] = c.dataset.idx_images;
    dataset["labels"] = c.dataset.idx_labels;
    dataset["max_samples"] = c.dataset.max_samples;
  } else {
    dataset["num_classes"] = c.dataset.num_classes;
    dataset["dim"] = c.dataset.dim;
    dataset["per_class"] = c.dataset.per_class;
    dataset["spread"] = c.dataset.spread;
  }
  json scaler{{"hidden_width", f.scaler_hidden_width},
              {"small_width", c.small_width},
              {"epochs", f.scaler_fit.epochs},
              {"lr", f.scaler_fit.lr},
              {"batch_size", f.scaler_fit.batch_size},
              {"weight_matching", f.weight_matching},
              {"init", detail::to_string(f.scaler_init)},
              {"logits", detail::to_string(f.scaler_logits)},
              {"init_noise", f.scaler_init_noise}};
  json fed{{"clients_per_round", f.clients_per_round},
           {"rounds", f.rounds},
           {"local_epochs", f.local_epochs},
           {"lr", f.lr},
           {"batch_size", f.batch_size},
           {"classifier_hidden", f.classifier_hidden},
           {"fedprox_mu", f.fedprox_mu ? json(*f.fedprox_mu) : json(nullptr)},
           {"scaler", scaler}};
  return json{{"dataset", dataset},
              {"partition",
               {{"num_clients", c.partition.num_clients},
                {"beta", c.partition.beta},
                {"val_fraction", c.partition.val_fraction}}},
              {"federation", fed},
              {"methods", c.methods},
              {"seed", c.seed},
              {"bins", f.num_bins},
              {"metrics_every", f.metrics_every},
              {"out", c.out_dir}};
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return config_from_json(j);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of the resolved config, ignoring where the output goes.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("out");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct ExperimentData {
  Dataset test;
  std::vector<ClientShard> shards;
};

inline Dataset load_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.kind == "idx") {
    Dataset d = parse_idx(spec.idx_images, spec.idx_labels);
    if (spec.max_samples > 0 && spec.max_samples < d.size()) {
      std::vector<std::size_t> idx(spec.max_samples);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      d = subset(d, idx);
    }
    return d;
  }
  return generate_synthetic(spec.num_classes, spec.dim, spec.per_class, spec.spread,
                            derive_seed(seed, {stream::kData}));
}

inline ExperimentData prepare_data(const ExperimentConfig& cfg) {
  const Dataset all = load_dataset(cfg.dataset, cfg.seed);
  auto split = split_holdout(all, cfg.dataset.test_fraction, cfg.seed);
  PartitionSpec ps = cfg.partition;
  ps.seed = cfg.seed;
  return {std::move(split.test), dirichlet_partition(split.rest, ps)};
}

/// One CSV line per client: id, split sizes and per-class counts of the local data.
inline std::string partition_stats_csv(const std::vector<ClientShard>& shards) {
  std::ostringstream os;
  const std::size_t K = shards.empty() ? 0 : shards.front().train.num_classes;
  os << "client,train,val";
  for (std::size_t k = 0; k < K; ++k) os << ",class_" << k;
  os << '\n';
  for (const auto& s : shards) {
    os << s.client_id << ',' << s.train.size() << ',' << s.validation.size();
    const auto tr = class_counts(s.train);
    const auto va = class_counts(s.validation);
    for (std::size_t k = 0; k < K; ++k) os << ',' << tr[k] + va[k];
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Baselines on a fixed classifier
// ---------------------------------------------------------------------------

struct BaselineEvaluation {
  std::vector<std::pair<std::string, EvaluationResult>> results;
  std::size_t lrts_clamped_rows = 0;  // rows of the test set whose LR-TS temperature hit a bound
};

/// Evaluate the requested post-hoc calibrators on `model`. Local temperature
/// scalers are fitted on each client's validation split; clients without
/// validation data are left out.
inline BaselineEvaluation evaluate_baselines(const MLPModel& model, const std::vector<ClientShard>& shards,
                                             const Dataset& test, const std::vector<std::string>& methods,
                                             std::size_t num_bins) {
  BaselineEvaluation out;
  const auto wants = [&](const char* m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  std::vector<TemperatureScaler> local_ts;
  std::vector<LinearTempModel> local_lr;
  Matrix pooled_logits(0, 0);
  Labels pooled_labels;
  std::vector<double> pooled;
  for (const auto& s : shards) {
    if (s.validation.size() == 0) continue;
    const Matrix logits = forward(model, s.validation.features);
    if (wants("ens") || wants("avgt")) local_ts.push_back(temp_fit(logits, s.validation.labels));
    if (wants("lrts")) local_lr.push_back(lrts_fit_client(logits, s.validation.labels));
    if (wants("val_ts")) {
      pooled.insert(pooled.end(), logits.data().begin(), logits.data().end());
      pooled_labels.insert(pooled_labels.end(), s.validation.labels.begin(), s.validation.labels.end());
    }
  }
  const bool have_val = !local_ts.empty() || !local_lr.empty() || !pooled_labels.empty();
  const auto eval = [&](const ProbabilityMap& f) { return evaluate_calibration(model, f, test, shards, num_bins); };
  for (const auto& m : all_methods()) {
    if (!is_baseline(m) || !wants(m.c_str())) continue;
    if (m != "uncal" && !have_val) throw UsageError("baselines: no client has validation data");
    if (m == "uncal") {
      out.results.emplace_back(m, eval([](const Matrix& x) { return softmax(x); }));
    } else if (m == "val_ts") {
      const auto T = val_ts_fit(Matrix(pooled_labels.size(), test.num_classes, pooled), pooled_labels);
      out.results.emplace_back(m, eval([T](const Matrix& x) { return temp_apply(T, x); }));
    } else if (m == "ens") {
      out.results.emplace_back(m, eval([&](const Matrix& x) { return ens_apply(local_ts, x); }));
    } else if (m == "avgt") {
      std::vector<double> temps;
      for (const auto& t : local_ts) temps.push_back(t.temperature);
      out.results.emplace_back(m, eval([temps](const Matrix& x) { return avgt_apply(temps, x); }));
    } else if (m == "lrts") {
      const LinearTempModel lr = lrts_average(local_lr);
      out.results.emplace_back(m, eval([&lr](const Matrix& x) { return lrts_apply(lr, x); }));
      out.lrts_clamped_rows = lrts_clamped_rows(lr, forward(model, test.features));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::size_t round = 0;
  std::string method;
  double beta = 0.0;
  CalibrationSummary summary;
  double top3 = 0.0;
};

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string version = kVersion;
  std::string metrics_path;
  double duration_seconds = 0.0;
};

struct ExperimentResult {
  RunManifest manifest;
  std::vector<MetricsRow> rows;                        // sorted by (round, method order)
  std::map<std::string, ReliabilityReport> reliability;  // final-round global report per method
  std::size_t lrts_clamped_rows = 0;
  std::vector<std::string> warnings;
};

/// The federation config behind one fedcal variant.
inline FedConfig fedcal_variant(const ExperimentConfig& cfg, const std::string& method) {
  FedConfig f = cfg.federation;
  f.num_clients = cfg.partition.num_clients;
  f.master_seed = cfg.seed;
  f.scaler_kind = ScalerKind::OpMlp;
  if (method == "fedcal_no_wm") f.weight_matching = false;
  if (method == "fedcal_small") f.scaler_hidden_width = cfg.small_width;
  return f;
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "round,method,beta,global_ece,mean_local_ece,max_local_ece,var_local_ece,top1,top3\n";
  for (const auto& r : rows) {
    os << r.round << ',' << r.method << ',' << format_number(r.beta) << ',' << format_number(r.summary.global_ece)
       << ',' << format_number(r.summary.mean_local_ece) << ',' << format_number(r.summary.max_local_ece) << ','
       << format_number(r.summary.var_local_ece) << ',' << format_number(r.summary.global_top1) << ','
       << format_number(r.top3) << '\n';
  }
  return os.str();
}

/// Write through a temporary file and rename, so readers never see a partial file.
inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct RunOptions {
  bool write_files = true;
  std::size_t threads = 1;  // client updates per round
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg_in, const RunOptions& opt = {}) {
  validate(cfg_in);
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg = cfg_in;
  cfg.federation.num_clients = cfg.partition.num_clients;
  cfg.federation.master_seed = cfg.seed;
  cfg.federation.threads = std::max<std::size_t>(1, opt.threads);
  const ExperimentData data = prepare_data(cfg);
  const double beta = cfg.partition.beta;
  const std::size_t bins = cfg.federation.num_bins;

  ExperimentResult res;
  const auto add_row = [&](std::size_t round, const std::string& m, const EvaluationResult& ev) {
    res.rows.push_back({round, m, beta, ev.summary, ev.top3});
  };

  std::vector<std::string> baselines;
  for (const auto& m : cfg.methods)
    if (is_baseline(m)) baselines.push_back(m);
  if (!baselines.empty()) {
    FedConfig f = cfg.federation;
    f.scaler_kind = ScalerKind::None;
    const auto observer = [&](const RoundState& st, const std::vector<ClientState>&) {
      if (!st.metrics) return;
      auto ev = evaluate_baselines(st.global_model, data.shards, data.test, baselines, bins);
      for (const auto& [m, r] : ev.results) {
        add_row(st.round, m, r);
        if (st.round == f.rounds) res.reliability[m] = r.global_report;
      }
      if (st.round == f.rounds) res.lrts_clamped_rows = ev.lrts_clamped_rows;
    };
    auto fr = run_federation(data.shards, data.test, f, observer);
    for (auto& w : fr.warnings) res.warnings.push_back(std::move(w));
  }

  for (const auto& m : cfg.methods) {
    if (is_baseline(m)) continue;
    const FedConfig f = fedcal_variant(cfg, m);
    auto fr = run_federation(data.shards, data.test, f);
    for (const auto& rm : fr.metrics) res.rows.push_back({rm.round, m, beta, rm.summary, rm.top3});
    const GlobalScaler& gs = fr.final_state.global_scaler;
    res.reliability[m] = evaluate_calibration(
                             fr.final_state.global_model, [&gs](const Matrix& x) { return gs.apply(x); },
                             data.test, data.shards, bins)
                             .global_report;
    for (auto& w : fr.warnings) res.warnings.push_back(m + ": " + w);
  }

  std::stable_sort(res.rows.begin(), res.rows.end(), [](const MetricsRow& a, const MetricsRow& b) {
    if (a.round != b.round) return a.round < b.round;
    return method_rank(a.method) < method_rank(b.method);
  });

  res.manifest.config_hash = config_hash(cfg);
  res.manifest.seed = cfg.seed;
  res.manifest.metrics_path = (std::filesystem::path(cfg.out_dir) / "metrics.csv").string();
  res.manifest.duration_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (opt.write_files) {
    const std::filesystem::path dir(cfg.out_dir);
    std::filesystem::create_directories(dir);
    json rel{{"bins", bins}, {"methods", json::object()}};
    for (const auto& m : cfg.methods) rel["methods"][m] = to_json(res.reliability.at(m));
    if (std::find(cfg.methods.begin(), cfg.methods.end(), "lrts") != cfg.methods.end())
      rel["lrts_clamp"] = {{"min_temperature", kMinTemperature},
                           {"max_temperature", kMaxTemperature},
                           {"clamped_test_rows", res.lrts_clamped_rows},
                           {"test_rows", data.test.size()}};
    json man{{"config_hash", res.manifest.config_hash},
             {"seed", res.manifest.seed},
             {"version", res.manifest.version},
             {"metrics_path", res.manifest.metrics_path},
             {"duration_seconds", res.manifest.duration_seconds},
             {"config", to_json(cfg)},
             {"warnings", res.warnings}};
    write_atomic(dir / "metrics.csv", metrics_csv(res.rows));
    write_atomic(dir / "reliability.json", rel.dump(2) + "\n");
    write_atomic(dir / "manifest.json", man.dump(2) + "\n");
  }
  return res;
}

/// Rows of the last recorded round.
inline std::vector<MetricsRow> final_rows(const ExperimentResult& r) {
  std::vector<MetricsRow> out;
  if (r.rows.empty()) return out;
  const std::size_t last = r.rows.back().round;
  for (const auto& row : r.rows)
    if (row.round == last) out.push_back(row);
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepCell {
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> final;
};

struct SummaryRow {
  double beta = 0.0;
  std::string method;
  std::size_t runs = 0;
  double global_ece_mean = 0.0, global_ece_std = 0.0;
  double mean_local_ece_mean = 0.0, mean_local_ece_std = 0.0;
  double max_local_ece_mean = 0.0;
  double top1_mean = 0.0, top3_mean = 0.0;
  std::optional<double> relative_reduction;  // fedcal rows only
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SummaryRow> summary;
};

inline std::string cell_dir_name(double beta, std::uint64_t seed) {
  return "beta_" + format_number(beta) + "_seed_" + std::to_string(seed);
}

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

/// Methods the relative-reduction column compares fedcal against. Val-TS is
/// excluded: it uses pooled validation data no federated method can see.
inline bool counts_as_best_baseline(const std::string& m) {
  return m == "uncal" || m == "ens" || m == "avgt" || m == "lrts";
}

inline std::vector<SummaryRow> summarize(const std::vector<SweepCell>& cells) {
  std::vector<double> betas;
  for (const auto& c : cells)
    if (std::find(betas.begin(), betas.end(), c.beta) == betas.end()) betas.push_back(c.beta);
  std::vector<SummaryRow> out;
  for (double b : betas) {
    const std::size_t first = out.size();
    for (const auto& m : all_methods()) {
      std::vector<double> g, ml, mx, t1, t3;
      for (const auto& c : cells) {
        if (c.beta != b) continue;
        for (const auto& r : c.final) {
          if (r.method != m) continue;
          g.push_back(r.summary.global_ece);
          ml.push_back(r.summary.mean_local_ece);
          mx.push_back(r.summary.max_local_ece);
          t1.push_back(r.summary.global_top1);
          t3.push_back(r.top3);
        }
      }
      if (g.empty()) continue;
      SummaryRow s;
      s.beta = b;
      s.method = m;
      s.runs = g.size();
      std::tie(s.global_ece_mean, s.global_ece_std) = detail::mean_std(g);
      std::tie(s.mean_local_ece_mean, s.mean_local_ece_std) = detail::mean_std(ml);
      s.max_local_ece_mean = detail::mean_std(mx).first;
      s.top1_mean = detail::mean_std(t1).first;
      s.top3_mean = detail::mean_std(t3).first;
      out.push_back(s);
    }
    std::optional<double> best;
    for (std::size_t i = first; i < out.size(); ++i)
      if (counts_as_best_baseline(out[i].method))
        best = best ? std::min(*best, out[i].global_ece_mean) : out[i].global_ece_mean;
    for (std::size_t i = first; i < out.size(); ++i)
      if (out[i].method == "fedcal" && best && *best > 0.0)
        out[i].relative_reduction = (*best - out[i].global_ece_mean) / *best;
  }
  return out;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "beta,method,runs,global_ece_mean,global_ece_std,mean_local_ece_mean,mean_local_ece_std,"
        "max_local_ece_mean,top1_mean,top3_mean,relative_reduction\n";
  for (const auto& r : rows) {
    os << format_number(r.beta) << ',' << r.method << ',' << r.runs << ',' << format_number(r.global_ece_mean)
       << ',' << format_number(r.global_ece_std) << ',' << format_number(r.mean_local_ece_mean) << ','
       << format_number(r.mean_local_ece_std) << ',' << format_number(r.max_local_ece_mean) << ','
       << format_number(r.top1_mean) << ',' << format_number(r.top3_mean) << ','
       << (r.relative_reduction ? format_number(*r.relative_reduction) : "") << '\n';
  }
  return os.str();
}

/// Table-style text: ECE as percent with two decimals, mean ± std.
inline std::string summary_table(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-8s %-14s %18s %18s %8s %10s\n", "beta", "method", "global ECE %",
                "mean local ECE %", "acc %", "rel. red.");
  os << buf;
  for (const auto& r : rows) {
    char red[32] = "";
    if (r.relative_reduction) std::snprintf(red, sizeof red, "%.2f%%", 100.0 * *r.relative_reduction);
    std::snprintf(buf, sizeof buf, "%-8g %-14s %9.2f ± %-6.2f %9.2f ± %-6.2f %8.2f %10s\n", r.beta,
                  r.method.c_str(), 100.0 * r.global_ece_mean, 100.0 * r.global_ece_std,
                  100.0 * r.mean_local_ece_mean, 100.0 * r.mean_local_ece_std, 100.0 * r.top1_mean, red);
    os << buf;
  }
  return os.str();
}

/// Cross product of betas and seeds. Cells are independent and may run on
/// separate threads; each writes under its own subdirectory of cfg.out_dir.
inline SweepResult sweep(const ExperimentConfig& cfg, const std::vector<double>& betas,
                         const std::vector<std::uint64_t>& seeds, const RunOptions& opt = {}) {
  if (betas.empty() || seeds.empty()) throw ConfigError("sweep: beta and seed lists must be nonempty");
  validate(cfg);
  SweepResult res;
  for (double b : betas)
    for (std::uint64_t s : seeds) res.cells.push_back({b, s, {}});
  const std::size_t workers = std::max<std::size_t>(1, opt.threads);
  RunOptions cell_opt = opt;
  cell_opt.threads = workers >= res.cells.size() ? workers / res.cells.size() : 1;
  parallel_for(res.cells.size(), workers, [&](std::size_t i) {
    SweepCell& cell = res.cells[i];
    ExperimentConfig c = cfg;
    c.partition.beta = cell.beta;
    c.seed = cell.seed;
    c.out_dir = (std::filesystem::path(cfg.out_dir) / cell_dir_name(cell.beta, cell.seed)).string();
    cell.final = final_rows(run_experiment(c, cell_opt));
  });
  res.summary = summarize(res.cells);
  if (opt.write_files) {
    std::filesystem::create_directories(cfg.out_dir);
    write_atomic(std::filesystem::path(cfg.out_dir) / "summary.csv", summary_csv(res.summary));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct LambdaPoint {
  double lambda = 0.0;
  bool aligned = false;
  double global_ece = 0.0;
  double local_ece_a = 0.0;
  double local_ece_b = 0.0;
  double global_nll = 0.0;
};

struct LambdaSweep {
  std::size_t client_a = 0;
  std::size_t client_b = 0;
  std::vector<LambdaPoint> points;
};

inline std::vector<double> default_lambdas() {
  std::vector<double> l;
  for (int i = 0; i <= 10; ++i) l.push_back(i / 10.0);
  return l;
}

/// Largest gap between the NLL along the blend and the linear blend of the end-point NLLs.
inline double interpolation_barrier(const OPScalerParams& a, const OPScalerParams& b, const Matrix& logits,
                                    const Labels& labels, const std::vector<double>& lambdas) {
  const double la = op_scaler_nll(a, logits, labels);
  const double lb = op_scaler_nll(b, logits, labels);
  double worst = -std::numeric_limits<double>::infinity();
  for (double l : lambdas) {
    const OPScalerParams mid{interpolate(a.backbone, b.backbone, l), a.num_classes};
    worst = std::max(worst, op_scaler_nll(mid, logits, labels) - (l * la + (1.0 - l) * lb));
  }
  return worst;
}

/// Train two scalers from independent initialisations on two clients'
/// validation logits, then sweep the interpolation weight with and without
/// aligning the second to the first.
inline LambdaSweep lambda_sweep(const MLPModel& model, const std::vector<ClientShard>& shards, const Dataset& test,
                                const FedConfig& fed, std::uint64_t seed,
                                const std::vector<double>& lambdas = default_lambdas()) {
  std::vector<std::size_t> ids;
  for (const auto& s : shards)
    if (s.validation.size() > 0) ids.push_back(s.client_id);
  if (ids.size() < 2) throw UsageError("lambda_sweep: need two clients with validation data");
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t x, std::size_t y) {
    return shards[x].validation.size() > shards[y].validation.size();
  });
  LambdaSweep out;
  out.client_a = std::min(ids[0], ids[1]);
  out.client_b = std::max(ids[0], ids[1]);
  const std::size_t K = test.num_classes;

  const auto train_scaler = [&](std::size_t cid) {
    Rng init = make_rng(seed, {stream::kLambda, stream::kScalerInit, cid});
    OPScalerParams p = make_op_scaler(K, fed.scaler_hidden_width, init);
    Rng rng = make_rng(seed, {stream::kLambda, stream::kScaler, cid});
    const auto& v = shards[cid].validation;
    return op_scaler_fit(std::move(p), forward(model, v.features), v.labels, fed.scaler_fit, rng);
  };
  const OPScalerParams a = train_scaler(out.client_a);
  const OPScalerParams b = train_scaler(out.client_b);
  const OPScalerParams b_aligned{apply_permutation(b.backbone, weight_matching(a.backbone, b.backbone, seed)),
                                 K};

  const Matrix test_logits = forward(model, test.features);
  const Dataset local_a = local_data(shards[out.client_a]);
  const Dataset local_b = local_data(shards[out.client_b]);
  const Matrix logits_a = forward(model, local_a.features);
  const Matrix logits_b = forward(model, local_b.features);
  const std::size_t bins = fed.num_bins;
  for (bool aligned : {false, true}) {
    const OPScalerParams& other = aligned ? b_aligned : b;
    for (double l : lambdas) {
      const OPScalerParams mid{interpolate(a.backbone, other.backbone, l), K};
      LambdaPoint p;
      p.lambda = l;
      p.aligned = aligned;
      p.global_ece = ece({op_scaler_apply(mid, test_logits), test.labels}, bins).ece;
      p.local_ece_a = ece({op_scaler_apply(mid, logits_a), local_a.labels}, bins).ece;
      p.local_ece_b = ece({op_scaler_apply(mid, logits_b), local_b.labels}, bins).ece;
      p.global_nll = op_scaler_nll(mid, test_logits, test.labels);
      out.points.push_back(p);
    }
  }
  return out;
}

inline std::string lambda_csv(const std::vector<std::pair<std::uint64_t, LambdaSweep>>& sweeps) {
  std::ostringstream os;
  os << "seed,client_a,client_b,aligned,lambda,global_ece,local_ece_a,local_ece_b,global_nll\n";
  for (const auto& [seed, s] : sweeps)
    for (const auto& p : s.points)
      os << seed << ',' << s.client_a << ',' << s.client_b << ',' << (p.aligned ? 1 : 0) << ','
         << format_number(p.lambda) << ',' << format_number(p.global_ece) << ',' << format_number(p.local_ece_a)
         << ',' << format_number(p.local_ece_b) << ',' << format_number(p.global_nll) << '\n';
  return os.str();
}

struct AblationResult {
  std::vector<SweepCell> cells;  // fedcal, fedcal_no_wm, fedcal_small per seed
  std::vector<std::pair<std::uint64_t, LambdaSweep>> lambda;
};

/// Weight matching on/off and scaler width at cfg's beta, plus a lambda sweep
/// on the final scaler-free FedAvg model of each seed.
inline AblationResult ablate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                             const RunOptions& opt = {}) {
  if (seeds.empty()) throw ConfigError("ablate: seed list must be nonempty");
  validate(cfg);
  AblationResult res;
  for (std::uint64_t s : seeds) {
    ExperimentConfig c = cfg;
    c.seed = s;
    c.methods = {"fedcal", "fedcal_no_wm", "fedcal_small"};
    c.out_dir = (std::filesystem::path(cfg.out_dir) / ("seed_" + std::to_string(s))).string();
    res.cells.push_back({c.partition.beta, s, final_rows(run_experiment(c, opt))});

    const ExperimentData data = prepare_data(c);
    FedConfig f = c.federation;
    f.num_clients = c.partition.num_clients;
    f.master_seed = s;
    f.scaler_kind = ScalerKind::None;
    f.threads = std::max<std::size_t>(1, opt.threads);
    const auto fr = run_federation(data.shards, data.test, f);
    res.lambda.emplace_back(s, lambda_sweep(fr.final_state.global_model, data.shards, data.test, f, s));
  }
  if (opt.write_files) {
    const std::filesystem::path dir(cfg.out_dir);
    std::filesystem::create_directories(dir);
    std::ostringstream os;
    os << "seed,beta,method,global_ece,mean_local_ece,max_local_ece,top1\n";
    for (const auto& c : res.cells)
      for (const auto& r : c.final)
        os << c.seed << ',' << format_number(c.beta) << ',' << r.method << ',' << format_number(r.summary.global_ece)
           << ',' << format_number(r.summary.mean_local_ece) << ',' << format_number(r.summary.max_local_ece)
           << ',' << format_number(r.summary.global_top1) << '\n';
    write_atomic(dir / "ablation.csv", os.str());
    write_atomic(dir / "lambda.csv", lambda_csv(res.lambda));
  }
  return res;
}

}  // namespace fedcal
