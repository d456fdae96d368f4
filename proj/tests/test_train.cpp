// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace dmf;
namespace fs = std::filesystem;

namespace {

SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.num_classes = 12;
  s.num_train = 6;
  s.image_size = 16;
  s.samples_per_class = 12;
  return s;
}

TrainConfig tiny_train(OdeMethod method = OdeMethod::euler_fixed, index_t depth = 1) {
  TrainConfig c;
  c.backbone.image_size = 16;
  c.backbone.stage_channels = {4, 8};
  c.g = 2;
  c.N = 3;
  c.Q = 2;
  c.epochs = 2;
  c.episodes_per_epoch = 3;
  c.ode.method = method;
  c.ode.depth_T = depth;
  c.seed = 4;
  return c;
}

}  // namespace

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0.05, 0, 100), 0.05);
  EXPECT_NEAR(cosine_lr(0.05, 100, 100), 0.0, 1e-12);
  EXPECT_NEAR(cosine_lr(0.05, 50, 100), 0.025, 1e-15);
  EXPECT_NEAR(cosine_lr(1.0, 25, 100), 0.5 * (1.0 + std::cos(std::numbers::pi / 4.0)), 1e-15);
}

TEST(Sgd, MomentumAndDecoupledDecay) {
  ParamStore p;
  p.add("w", Tensor::scalar(2.0));
  Sgd opt(0.5, 0.1);
  GradientMap g;
  g.emplace("w", Tensor::scalar(1.0));
  opt.step(p, g, 0.1);
  // v = 1, w = 2 - 0.1 * (1 + 0.2)
  EXPECT_DOUBLE_EQ(p.get("w").item(), 1.88);
  opt.step(p, g, 0.1);
  // v = 1.5, w = 1.88 - 0.1 * (1.5 + 0.188)
  EXPECT_NEAR(p.get("w").item(), 1.88 - 0.1 * (1.5 + 0.188), 1e-15);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const Dataset ds = generate_synthetic(tiny_spec());
  TrainConfig c = tiny_train();
  c.lr0 = 0.0;
  c.weight_decay = 0.0;
  const TrainResult r = train(c, ds);
  const ParamStore init = init_model(r.model, c.seed);
  ASSERT_EQ(init.names(), r.params.names());
  for (const auto& name : init.names()) EXPECT_EQ(init.get(name).values(), r.params.get(name).values()) << name;
}

TEST(Train, MetricsAreDeterministic) {
  const Dataset ds = generate_synthetic(tiny_spec());
  TrainConfig c = tiny_train(OdeMethod::dopri5);
  c.augment = Augment::flip_crop;
  std::vector<nlohmann::json> seen;
  const TrainResult a = train(c, ds, [&](const EpochMetrics& m) { seen.push_back(to_json(m)); });
  const TrainResult b = train(c, ds);
  ASSERT_EQ(a.epochs.size(), 2u);
  ASSERT_EQ(seen.size(), 2u);
  for (std::size_t e = 0; e < a.epochs.size(); ++e) {
    EXPECT_EQ(to_json(a.epochs[e]), to_json(b.epochs[e]));
    EXPECT_EQ(to_json(a.epochs[e]), seen[e]);
    EXPECT_TRUE(std::isfinite(a.epochs[e].loss));
  }
  for (const auto& name : a.params.names()) EXPECT_EQ(a.params.get(name).values(), b.params.get(name).values());
  EXPECT_EQ(seen[0]["epoch"], 0);
  EXPECT_TRUE(seen[0].contains("loss") && seen[0].contains("acc") && seen[0].contains("lr"));
}

TEST(Train, TrainingChangesParameters) {
  const Dataset ds = generate_synthetic(tiny_spec());
  const TrainConfig c = tiny_train();
  const TrainResult r = train(c, ds);
  const ParamStore init = init_model(r.model, c.seed);
  EXPECT_NE(init.get(kPsiWeight).values(), r.params.get(kPsiWeight).values());
  EXPECT_NE(init.get(kEtaWeight).values(), r.params.get(kEtaWeight).values());
}

TEST(Train, AblationsDifferOnlyInAlignmentParameters) {
  const TrainConfig ode = tiny_train(OdeMethod::dopri5);
  const TrainConfig none = tiny_train(OdeMethod::euler_fixed, 0);
  const ParamStore a = init_model(ode.model(6), 4), b = init_model(none.model(6), 4);
  std::vector<std::string> shared;
  for (const auto& n : a.names()) {
    if (n != kPsiWeight && n != kPsiBias && n != kEtaWeight && n != kEtaBias) shared.push_back(n);
  }
  EXPECT_EQ(shared, b.names());
  EXPECT_EQ(a.size(), b.size() + 4);
  for (const auto& n : shared) EXPECT_EQ(a.get(n).values(), b.get(n).values()) << n;
  TrainConfig frozen = tiny_train(OdeMethod::dopri5);
  frozen.dynamic_sampling = false;
  const ParamStore f = init_model(frozen.model(6), 4);
  EXPECT_FALSE(f.contains(kEtaWeight));
  EXPECT_TRUE(f.contains(kPsiWeight));
}

TEST(Train, DivergenceReportsEpisodeSeed) {
  Dataset ds = generate_synthetic(tiny_spec());
  for (auto& c : ds.classes) {
    c.images = Tensor::full(c.images.shape(), 1e300);
  }
  const TrainConfig c = tiny_train();
  try {
    train(c, ds);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.episode_seed(), train_episode_seed(c.seed, 0));
    EXPECT_NE(std::string(e.what()).find(std::to_string(e.episode_seed())), std::string::npos);
  }
}

TEST(Train, RejectsInvalidConfig) {
  const Dataset ds = generate_synthetic(tiny_spec());
  TrainConfig c = tiny_train();
  c.N = 1;
  EXPECT_THROW(train(c, ds), std::invalid_argument);
  c = tiny_train();
  c.backbone.image_size = 32;
  EXPECT_THROW(train(c, ds), std::invalid_argument);
  c = tiny_train();
  c.g = 3;
  EXPECT_THROW(train(c, ds), std::invalid_argument);
}

TEST(Summary, ZeroVarianceGivesZeroInterval) {
  const std::vector<double> acc(50, 1.0);
  const auto s = summarize_accuracies(acc);
  EXPECT_EQ(s.mean, 1.0);
  EXPECT_EQ(s.ci95, 0.0);
  EXPECT_EQ(s.episodes, 50);
}

TEST(Summary, UnitStdOver400Episodes) {
  // Alternating 1 ± a with a chosen so the sample std is exactly 1.
  const double a = std::sqrt(399.0 / 400.0);
  std::vector<double> acc;
  for (int i = 0; i < 400; ++i) acc.push_back(i % 2 ? 1.0 + a : 1.0 - a);
  const auto s = summarize_accuracies(acc);
  EXPECT_NEAR(s.mean, 1.0, 1e-14);
  EXPECT_NEAR(s.ci95, 1.96 / 20.0, 1e-14);
  EXPECT_NEAR(s.ci95, 0.098, 1e-14);
  EXPECT_THROW(summarize_accuracies(std::vector<double>{}), std::invalid_argument);
}

TEST(Evaluate, UntrainedModelIsAtChance) {
  const Dataset ds = generate_synthetic(tiny_spec());
  TrainConfig c = tiny_train();
  c.N = 5;
  const ModelConfig m = c.model(6);
  const ParamStore p = init_model(m, 1);
  EvalConfig ec;
  ec.episodes = 500;
  ec.N = 5;
  ec.Q = 2;
  ec.seed = 3;
  const auto s = evaluate(m, p, ds, ec);
  EXPECT_EQ(s.episodes, 500);
  EXPECT_NEAR(s.mean, 0.2, 0.05);
}

TEST(Evaluate, IndependentOfThreadCount) {
  const Dataset ds = generate_synthetic(tiny_spec());
  const ModelConfig m = tiny_train(OdeMethod::dopri5).model(6);
  const ParamStore p = init_model(m, 2);
  EvalConfig ec;
  ec.episodes = 12;
  ec.N = 3;
  ec.Q = 2;
  const auto one = episode_accuracies(m, p, ds, ec);
  ec.threads = 3;
  EXPECT_EQ(episode_accuracies(m, p, ds, ec), one);
  ec.N = 7;
  EXPECT_THROW(evaluate(m, p, ds, ec), std::invalid_argument);
}

TEST(Config, TrainConfigJsonRoundTrip) {
  TrainConfig c = tiny_train(OdeMethod::dopri5);
  c.ode.rtol = 1e-5;
  c.ode.filter_refresh = FilterRefresh::per_eval;
  c.augment = Augment::flip_crop;
  c.backbone.keep_last_pool = true;
  const nlohmann::json j = to_json(c);
  EXPECT_EQ(to_json(train_config_from_json(j)), j);
  EXPECT_EQ(j["ode"]["t_span"], nlohmann::json::array({0.0, 1.0}));
}

TEST(Config, RunConfigRejectsUnknownAndInvalid) {
  EXPECT_THROW(run_config_from_json({{"learning_rate", 0.1}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"N", 1}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"ode", {{"method", "rk4"}}}}), ConfigError);
  const RunConfig rc = run_config_from_json({{"g", 4}, {"synthetic", {{"num_classes", 20}}}, {"eval_episodes", 7}});
  EXPECT_EQ(rc.train.g, 4);
  EXPECT_EQ(rc.synthetic.num_classes, 20);
  EXPECT_EQ(rc.eval_episodes, 7);
  EXPECT_TRUE(data_source(rc).contains("synthetic"));
}

TEST(Config, CheckpointRoundTrip) {
  const ModelConfig m = tiny_train(OdeMethod::dopri5).model(6);
  const ParamStore p = init_model(m, 5);
  const fs::path dir = fs::temp_directory_path() / "dmf_test_ckpt";
  fs::remove_all(dir);
  save_checkpoint(dir, m, p, {{"synthetic", to_json(tiny_spec())}});
  const Checkpoint ck = load_checkpoint(dir);
  EXPECT_EQ(to_json(ck.model), to_json(m));
  for (const auto& n : p.names()) EXPECT_EQ(ck.params.get(n).values(), p.get(n).values());
  const Dataset ds = load_data_source(ck.data);
  EXPECT_EQ(ds.meta_test, generate_synthetic(tiny_spec()).meta_test);
  fs::remove_all(dir);
}
