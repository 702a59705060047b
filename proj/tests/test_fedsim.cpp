#include <gtest/gtest.h>

#include <set>

#include "fedcal/fedsim.hpp"

using namespace fedcal;

namespace {

struct World {
  Dataset test;
  std::vector<ClientShard> shards;
};

World make_world(std::size_t clients, double beta, std::uint64_t seed, std::size_t K = 4) {
  Dataset all = generate_synthetic(K, 6, 60, 0.35, seed);
  auto split = split_holdout(all, 0.2, seed);
  return {split.test, dirichlet_partition(split.rest, {clients, beta, seed, 0.2})};
}

FedConfig small_config(std::size_t clients, std::uint64_t seed) {
  FedConfig c;
  c.num_clients = clients;
  c.clients_per_round = std::min<std::size_t>(3, clients);
  c.rounds = 3;
  c.local_epochs = 1;
  c.lr = 0.1;
  c.batch_size = 16;
  c.classifier_hidden = {8};
  c.scaler_hidden_width = 6;
  c.scaler_fit = {5, 0.01, 64};
  c.master_seed = seed;
  return c;
}

MLPModel scalar_model(double v) {
  MLPModel m = zero_mlp({1, 1});
  m.weights[0](0, 0) = v;
  m.biases[0][0] = v;
  return m;
}

}  // namespace

TEST(AggregateModels, WeightedBySampleCount) {
  const MLPModel out = aggregate_models({{0, scalar_model(0.0), 1}, {1, scalar_model(2.0), 3}});
  EXPECT_DOUBLE_EQ(out.weights[0](0, 0), 1.5);
  EXPECT_DOUBLE_EQ(out.biases[0][0], 1.5);
}

TEST(AggregateModels, SingleAndIdenticalClients) {
  Rng rng(1);
  const MLPModel m = make_mlp({3, 4, 2}, Activation::ReLU, rng);
  EXPECT_EQ(aggregate_models({{0, m, 17}}), m);
  const MLPModel same = aggregate_models({{0, m, 1}, {1, m, 1}, {2, m, 1}, {3, m, 1}});
  for (std::size_t l = 0; l < m.num_layers(); ++l)
    for (std::size_t i = 0; i < m.weights[l].size(); ++i)
      EXPECT_NEAR(same.weights[l].data()[i], m.weights[l].data()[i], 1e-15);
}

TEST(AggregateModels, InputOrderDoesNotMatter) {
  Rng rng(2);
  std::vector<WeightedModel> in;
  for (std::size_t c = 0; c < 5; ++c) in.push_back({c, make_mlp({3, 4, 2}, Activation::ReLU, rng), c + 1});
  std::vector<WeightedModel> rev(in.rbegin(), in.rend());
  EXPECT_EQ(aggregate_models(in), aggregate_models(rev));
}

TEST(AggregateModels, RejectsBadInput) {
  EXPECT_THROW(aggregate_models({}), UsageError);
  EXPECT_THROW(aggregate_models({{0, zero_mlp({1, 1}), 1}, {1, zero_mlp({2, 1}), 1}}), UsageError);
}

TEST(AggregateScalers, UniformParameterMean) {
  Rng rng(3);
  std::vector<OPScalerParams> s;
  for (int i = 0; i < 3; ++i) s.push_back(make_op_scaler(4, 5, rng, 1.0));
  const OPScalerParams mean = aggregate_scalers(s);
  for (std::size_t l = 0; l < mean.backbone.num_layers(); ++l) {
    for (std::size_t i = 0; i < mean.backbone.weights[l].size(); ++i) {
      double naive = 0.0;
      for (const auto& p : s) naive += p.backbone.weights[l].data()[i];
      EXPECT_NEAR(mean.backbone.weights[l].data()[i], naive / 3.0, 1e-15);
    }
    for (std::size_t i = 0; i < mean.backbone.biases[l].size(); ++i) {
      double naive = 0.0;
      for (const auto& p : s) naive += p.backbone.biases[l][i];
      EXPECT_NEAR(mean.backbone.biases[l][i], naive / 3.0, 1e-15);
    }
  }
  EXPECT_EQ(aggregate_scalers({s[0]}), s[0]);
  EXPECT_THROW(aggregate_scalers({}), UsageError);
}

TEST(SelectClients, DistinctSortedAndSeeded) {
  Rng a(4), b(4);
  const auto x = select_clients(20, 5, a);
  EXPECT_EQ(x, select_clients(20, 5, b));
  EXPECT_EQ(x.size(), 5u);
  EXPECT_TRUE(std::is_sorted(x.begin(), x.end()));
  EXPECT_EQ(std::set<std::size_t>(x.begin(), x.end()).size(), 5u);
  Rng c(5);
  EXPECT_EQ(select_clients(4, 4, c), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(ClientUpdate, NullUpdateReturnsGlobalModelAndAlignedScaler) {
  World w = make_world(3, 1.0, 6);
  FedConfig cfg = small_config(3, 6);
  cfg.lr = 0.0;
  cfg.scaler_kind = ScalerKind::OpMlp;
  cfg.scaler_fit.epochs = 0;
  const MLPModel g = initial_classifier(6, 4, cfg);
  const GlobalScaler gs = initial_scaler(4, cfg);

  cfg.weight_matching = false;
  ClientState raw_state;
  const auto raw = client_update(w.shards[0], g, gs, cfg, raw_state, 1);
  cfg.weight_matching = true;
  ClientState state;
  const auto res = client_update(w.shards[0], g, gs, cfg, state, 1);

  EXPECT_EQ(res.model, g);
  ASSERT_TRUE(res.op_scaler && raw.op_scaler);
  // The aligned scaler is a relabelling of the noisy start: same function.
  const Matrix x = forward(g, w.test.features);
  const Matrix a = op_scaler_logits(*res.op_scaler, x), b = op_scaler_logits(*raw.op_scaler, x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-9);
  EXPECT_GE(param_dot(gs.op->backbone, res.op_scaler->backbone),
            param_dot(gs.op->backbone, raw.op_scaler->backbone) - 1e-12);
}

TEST(ClientUpdate, ZeroNoiseSelfMatchKeepsGlobalScaler) {
  World w = make_world(2, 1.0, 7);
  FedConfig cfg = small_config(2, 7);
  cfg.scaler_kind = ScalerKind::OpMlp;
  cfg.scaler_fit.epochs = 0;
  cfg.scaler_init_noise = 0.0;
  const GlobalScaler gs = initial_scaler(4, cfg);
  ClientState state;
  const auto res = client_update(w.shards[1], initial_classifier(6, 4, cfg), gs, cfg, state, 1);
  EXPECT_EQ(*res.op_scaler, *gs.op);
  EXPECT_EQ(*state.local_scaler, *gs.op);
}

TEST(ClientUpdate, Deterministic) {
  World w = make_world(3, 0.5, 8);
  FedConfig cfg = small_config(3, 8);
  cfg.scaler_kind = ScalerKind::OpMlp;
  const MLPModel g = initial_classifier(6, 4, cfg);
  const GlobalScaler gs = initial_scaler(4, cfg);
  ClientState s1, s2;
  const auto a = client_update(w.shards[2], g, gs, cfg, s1, 4);
  const auto b = client_update(w.shards[2], g, gs, cfg, s2, 4);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(*a.op_scaler, *b.op_scaler);
}

TEST(ClientUpdate, EmptyValidationSkipsScalerWithWarning) {
  World w = make_world(2, 1.0, 9);
  ClientShard s = w.shards[0];
  s.validation = Dataset{Matrix(0, 6), {}, 4};
  s.val_index.clear();
  FedConfig cfg = small_config(2, 9);
  cfg.scaler_kind = ScalerKind::Temperature;
  ClientState state;
  const auto res = client_update(s, initial_classifier(6, 4, cfg), initial_scaler(4, cfg), cfg, state, 1);
  EXPECT_FALSE(res.temperature.has_value());
  ASSERT_EQ(res.warnings.size(), 1u);
  EXPECT_NE(res.warnings[0].find("empty validation"), std::string::npos);
}

TEST(ClientUpdate, LocalScalerImprovesLocalCalibration) {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Dataset all = generate_synthetic(5, 10, 300, 0.5, 20 + seed);
    auto split = split_holdout(all, 0.2, seed);
    auto shards = dirichlet_partition(split.rest, {5, 0.1, seed, 0.3});
    FedConfig cfg = small_config(5, seed);
    cfg.local_epochs = 5;
    cfg.classifier_hidden = {16};
    cfg.scaler_kind = ScalerKind::OpMlp;
    cfg.scaler_hidden_width = 16;
    cfg.scaler_fit = {50, 0.01, 256};
    // The largest client gives the most stable validation estimate.
    std::size_t c = 0;
    for (std::size_t i = 1; i < shards.size(); ++i)
      if (shards[i].validation.size() > shards[c].validation.size()) c = i;
    ClientState state;
    const auto res = client_update(shards[c], initial_classifier(10, 5, cfg), initial_scaler(5, cfg), cfg,
                                   state, 1);
    const Matrix logits = forward(res.model, shards[c].validation.features);
    const Labels& y = shards[c].validation.labels;
    const double before = ece({softmax(logits), y}, 15).ece;
    const double after = ece({op_scaler_apply(*res.op_scaler, logits), y}, 15).ece;
    improved += after <= before;
  }
  EXPECT_GE(improved, 4);
}

TEST(RunFederation, SingleClientSingleRoundEqualsLocalTraining) {
  World w = make_world(1, 1.0, 10);
  FedConfig cfg = small_config(1, 10);
  cfg.rounds = 1;
  cfg.clients_per_round = 1;
  const auto fr = run_federation(w.shards, w.test, cfg);
  ClientState state;
  const auto local = client_update(w.shards[0], initial_classifier(6, 4, cfg), initial_scaler(4, cfg), cfg, state, 1);
  EXPECT_EQ(fr.final_state.global_model, local.model);
}

TEST(RunFederation, DeterministicAcrossThreadCounts) {
  World w = make_world(6, 0.3, 11);
  FedConfig cfg = small_config(6, 11);
  cfg.scaler_kind = ScalerKind::OpMlp;
  cfg.metrics_every = 1;
  const auto a = run_federation(w.shards, w.test, cfg);
  cfg.threads = 3;
  const auto b = run_federation(w.shards, w.test, cfg);
  EXPECT_EQ(a.final_state.global_model, b.final_state.global_model);
  EXPECT_EQ(*a.final_state.global_scaler.op, *b.final_state.global_scaler.op);
  ASSERT_EQ(a.metrics.size(), 3u);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(a.metrics[i].summary.global_ece, b.metrics[i].summary.global_ece);
    EXPECT_EQ(a.metrics[i].summary.mean_local_ece, b.metrics[i].summary.mean_local_ece);
  }
}

TEST(RunFederation, ScalingNeverChangesAccuracy) {
  World w = make_world(4, 0.5, 12);
  FedConfig cfg = small_config(4, 12);
  std::vector<RoundMetrics> finals;
  for (auto kind : {ScalerKind::None, ScalerKind::Temperature, ScalerKind::OpMlp}) {
    cfg.scaler_kind = kind;
    finals.push_back(run_federation(w.shards, w.test, cfg).metrics.back());
  }
  for (const auto& m : finals) {
    EXPECT_EQ(m.summary.global_top1, finals[0].summary.global_top1);
    EXPECT_EQ(m.top3, finals[0].top3);
  }
}

TEST(RunFederation, MetricsCadenceAndObserver) {
  World w = make_world(3, 1.0, 13);
  FedConfig cfg = small_config(3, 13);
  cfg.rounds = 5;
  cfg.metrics_every = 2;
  std::vector<std::size_t> seen;
  const auto fr = run_federation(w.shards, w.test, cfg, [&](const RoundState& s, const std::vector<ClientState>&) {
    seen.push_back(s.round);
  });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4, 5}));
  ASSERT_EQ(fr.metrics.size(), 3u);
  EXPECT_EQ(fr.metrics[0].round, 2u);
  EXPECT_EQ(fr.metrics[1].round, 4u);
  EXPECT_EQ(fr.metrics[2].round, 5u);
}

TEST(RunFederation, RejectsShardCountMismatch) {
  World w = make_world(3, 1.0, 14);
  FedConfig cfg = small_config(4, 14);
  EXPECT_THROW(run_federation(w.shards, w.test, cfg), UsageError);
  cfg.num_clients = 3;
  cfg.clients_per_round = 4;
  EXPECT_THROW(run_federation(w.shards, w.test, cfg), UsageError);
}
