// fedcal: federated calibration experiments from the command line.
//
//   fedcal partition --config cfg.json [--out DIR]
//   fedcal run       --config cfg.json --seed 3 --beta 0.1 --out runs/a
//   fedcal sweep     --config cfg.json --betas 1,0.5,0.3,0.1 --seeds 1,2,3
//   fedcal ablate    --config cfg.json --seeds 1,2,3
//   fedcal verify    [--only 1,4] [--quick]
//
// Exit codes: 0 ok, 2 bad configuration or arguments, 1 runtime failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedcal/harness.hpp"

#ifndef FEDCAL_ACCEPTANCE_PATH
#define FEDCAL_ACCEPTANCE_PATH ""
#endif

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta;
  std::string methods;
  std::string out;
  std::string idx_images;
  std::string idx_labels;
  std::optional<std::size_t> bins;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--beta", f.beta, "Dirichlet concentration");
  cmd->add_option("--methods", f.methods, "comma-separated method list");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--idx-images", f.idx_images, "IDX image file (switches the dataset to idx)");
  cmd->add_option("--idx-labels", f.idx_labels, "IDX label file");
  cmd->add_option("--bins", f.bins, "ECE bin count");
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* what) {
  std::vector<T> out;
  for (const auto& item : split_csv(s)) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw fedcal::ConfigError(std::string("--") + what + ": cannot parse '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw fedcal::ConfigError(std::string("--") + what + ": empty list");
  return out;
}

fedcal::ExperimentConfig resolve(const CommonFlags& f) {
  fedcal::ExperimentConfig cfg = f.config.empty() ? fedcal::ExperimentConfig{} : fedcal::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.beta) cfg.partition.beta = *f.beta;
  if (!f.methods.empty()) cfg.methods = split_csv(f.methods);
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (!f.idx_images.empty() || !f.idx_labels.empty()) {
    cfg.dataset.kind = "idx";
    if (!f.idx_images.empty()) cfg.dataset.idx_images = f.idx_images;
    if (!f.idx_labels.empty()) cfg.dataset.idx_labels = f.idx_labels;
  }
  if (f.bins) cfg.federation.num_bins = *f.bins;
  fedcal::validate(cfg);
  return cfg;
}

fedcal::RunOptions run_options() {
  fedcal::RunOptions o;
  o.threads = fedcal::thread_cap_from_env();
  return o;
}

int cmd_partition(const CommonFlags& f) {
  const auto cfg = resolve(f);
  const auto data = fedcal::prepare_data(cfg);
  const std::string csv = fedcal::partition_stats_csv(data.shards);
  if (f.out.empty()) {
    std::cout << csv;
  } else {
    std::filesystem::create_directories(cfg.out_dir);
    fedcal::write_atomic(std::filesystem::path(cfg.out_dir) / "partition.csv", csv);
    std::cout << "wrote " << (std::filesystem::path(cfg.out_dir) / "partition.csv").string() << '\n';
  }
  return 0;
}

int cmd_run(const CommonFlags& f) {
  const auto cfg = resolve(f);
  const auto res = fedcal::run_experiment(cfg, run_options());
  fedcal::SweepCell cell{cfg.partition.beta, cfg.seed, fedcal::final_rows(res)};
  std::cout << fedcal::summary_table(fedcal::summarize({cell}));
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << "metrics: " << res.manifest.metrics_path << "  (" << res.manifest.duration_seconds << " s)\n";
  return 0;
}

int cmd_sweep(const CommonFlags& f, const std::string& betas, const std::string& seeds) {
  const auto cfg = resolve(f);
  const auto b = betas.empty() ? std::vector<double>{1.0, 0.5, 0.3, 0.1} : parse_list<double>(betas, "betas");
  const auto s = seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : parse_list<std::uint64_t>(seeds, "seeds");
  const auto res = fedcal::sweep(cfg, b, s, run_options());
  std::cout << fedcal::summary_table(res.summary);
  std::cout << "summary: " << (std::filesystem::path(cfg.out_dir) / "summary.csv").string() << '\n';
  return 0;
}

int cmd_ablate(const CommonFlags& f, const std::string& seeds) {
  const auto cfg = resolve(f);
  const auto s = seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : parse_list<std::uint64_t>(seeds, "seeds");
  const auto res = fedcal::ablate(cfg, s, run_options());
  std::printf("%-6s %-14s %12s\n", "seed", "method", "global ECE %");
  for (const auto& c : res.cells)
    for (const auto& r : c.final)
      std::printf("%-6llu %-14s %12.2f\n", static_cast<unsigned long long>(c.seed), r.method.c_str(),
                  100.0 * r.summary.global_ece);
  for (const auto& [seed, sw] : res.lambda) {
    double worst[2] = {0.0, 0.0};  // unaligned, aligned
    for (const auto& p : sw.points) worst[p.aligned] = std::max(worst[p.aligned], p.global_nll);
    std::printf("seed %llu lambda sweep (clients %zu, %zu): max NLL unaligned %.4f, aligned %.4f\n",
                static_cast<unsigned long long>(seed), sw.client_a, sw.client_b, worst[0], worst[1]);
  }
  std::cout << "ablation: " << (std::filesystem::path(cfg.out_dir) / "ablation.csv").string() << '\n';
  return 0;
}

int cmd_verify(const std::string& only, bool quick) {
  const std::string exe = FEDCAL_ACCEPTANCE_PATH;
  if (exe.empty() || !std::filesystem::exists(exe)) {
    std::cerr << "acceptance binary not found (build the 'acceptance' target)\n";
    return 1;
  }
  std::string cmd = "\"" + exe + "\"";
  if (!only.empty()) cmd += " --only " + only;
  if (quick) cmd += " --quick";
  const int rc = std::system(cmd.c_str());
  return rc == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated calibration simulator"};
  app.require_subcommand(1);

  CommonFlags pf, rf, sf, af;
  std::string sweep_betas, sweep_seeds, ablate_seeds, only;
  bool quick = false;

  auto* partition = app.add_subcommand("partition", "print per-client shard statistics");
  add_common(partition, pf);
  auto* run = app.add_subcommand("run", "run one experiment");
  add_common(run, rf);
  auto* sweep = app.add_subcommand("sweep", "beta x seed grid with a summary table");
  add_common(sweep, sf);
  sweep->add_option("--betas", sweep_betas, "comma-separated betas (default 1,0.5,0.3,0.1)");
  sweep->add_option("--seeds", sweep_seeds, "comma-separated seeds (default: the config seed)");
  auto* ablate = app.add_subcommand("ablate", "weight matching, scaler width and lambda sweep");
  add_common(ablate, af);
  ablate->add_option("--seeds", ablate_seeds, "comma-separated seeds (default: the config seed)");
  auto* verify = app.add_subcommand("verify", "run the acceptance suite");
  verify->add_option("--only", only, "comma-separated criterion numbers");
  verify->add_flag("--quick", quick, "skip the end-to-end criteria");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*partition) return cmd_partition(pf);
    if (*run) return cmd_run(rf);
    if (*sweep) return cmd_sweep(sf, sweep_betas, sweep_seeds);
    if (*ablate) return cmd_ablate(af, ablate_seeds);
    if (*verify) return cmd_verify(only, quick);
  } catch (const fedcal::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
