#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "viewdelta/engine.hpp"
#include "viewdelta/ops.hpp"
#include "viewdelta/rng.hpp"
#include "viewdelta/train.hpp"
#include "viewdelta/verify/oracles.hpp"

namespace vd = viewdelta;
namespace fs = std::filesystem;
using T = vd::Tensor<double>;

namespace {

vd::DatasetManifest tiny_dataset(const std::string& name, std::uint64_t seed, std::size_t n) {
  vd::DatasetOptions o;
  o.n_pairs = n;
  o.seed = seed;
  o.generator.canvas = 16;
  const auto dir = fs::temp_directory_path() / ("vd_test_train_" + name);
  fs::remove_all(dir);
  return vd::generate_dataset(o, dir);
}

vd::TrainConfig quick_config() {
  vd::TrainConfig c;
  c.lr0 = 1e-3;
  c.batch_size = 2;
  c.max_steps = 6;
  c.warmup_steps = 2;
  c.seed = 3;
  c.data_seed = 4;
  return c;
}

}  // namespace

TEST(BceLoss, ZeroLogitsGiveLn2) {
  vd::Mask label(4, 4);
  for (std::size_t i = 0; i < 16; i += 3) label.values[i] = 1;
  EXPECT_NEAR(vd::bce_loss(T::zeros({1, 4, 4}), label).item(), std::log(2.0), 1e-15);
}

TEST(BceLoss, SaturatedCorrectLogitsGiveZero) {
  vd::Mask label(2, 1);
  label.values = {1, 0};
  EXPECT_LT(vd::bce_loss(T::from({1, 1, 2}, {80.0, -80.0}), label).item(), 1e-30);
  const double wrong = vd::bce_loss(T::from({1, 1, 2}, {-800.0, 800.0}), label).item();
  EXPECT_TRUE(std::isfinite(wrong));
  EXPECT_NEAR(wrong, 800.0, 1e-9);
}

TEST(BceLoss, MatchesOracleAndGradient) {
  vd::Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> z(16);
    for (double& v : z) v = rng.normal() * 4;
    vd::Mask label(4, 4);
    for (auto& v : label.values) v = rng.coin();
    auto logits = T::from({1, 4, 4}, z, true);
    auto loss = vd::bce_loss(logits, label);
    EXPECT_NEAR(loss.item(), vd::oracle::bce(z, label), 1e-12);
    loss.backward();
    for (std::size_t i = 0; i < 16; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-z[i]));
      EXPECT_NEAR(logits.grad()[i], (s - label.values[i]) / 16.0, 1e-15);
    }
  }
}

TEST(BceLoss, Errors) {
  EXPECT_THROW(vd::bce_loss(T::zeros({1, 3, 3}), vd::Mask(4, 4)), vd::DimensionError);
  vd::Mask bad(2, 2);
  bad.values[0] = 2;
  EXPECT_THROW(vd::bce_loss(T::zeros({1, 2, 2}), bad), std::invalid_argument);
}

TEST(DiceLoss, PerfectPredictionIsNearZero) {
  vd::Mask label(2, 2);
  label.values = {1, 1, 0, 0};
  EXPECT_LT(vd::dice_loss(T::from({1, 2, 2}, {50.0, 50.0, -50.0, -50.0}), label).item(), 1e-12);
  EXPECT_NEAR(vd::dice_loss(T::from({1, 2, 2}, {-50.0, -50.0, 50.0, 50.0}), label).item(), 1.0 - 1.0 / 5, 1e-12);
}

TEST(Adam, FirstStepMovesByLr) {
  auto p = T::from({3}, {1.0, -2.0, 0.5}, true);
  (vd::ops::sum(vd::ops::mul(p, T::from({3}, {3.0, -0.25, 0.0})))).backward();
  std::vector<T> params{p};
  vd::OptimizerState<double> st;
  vd::adam_step(params, st, 0.1, 0.0);
  EXPECT_NEAR(p.data()[0], 1.0 - 0.1, 1e-7);
  EXPECT_NEAR(p.data()[1], -2.0 + 0.1, 1e-7);
  EXPECT_EQ(p.data()[2], 0.5);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, DecoupledWeightDecayShrinksWithZeroGrad) {
  auto p = T::from({2}, {2.0, -4.0}, true);
  vd::ops::sum(vd::ops::scale(p, 0.0)).backward();
  std::vector<T> params{p};
  vd::OptimizerState<double> st;
  vd::adam_step(params, st, 0.01, 0.5);
  EXPECT_DOUBLE_EQ(p.data()[0], 2.0 * (1 - 0.01 * 0.5));
  EXPECT_DOUBLE_EQ(p.data()[1], -4.0 * (1 - 0.01 * 0.5));
}

TEST(Adam, MissingGradientThrows) {
  std::vector<T> params{T::from({2}, {1.0, 2.0}, false)};
  vd::OptimizerState<double> st;
  EXPECT_THROW(vd::adam_step(params, st, 0.1, 0.0), vd::TrainingError);
}

TEST(LrSchedule, WarmupCosineAndErrors) {
  EXPECT_DOUBLE_EQ(vd::lr_schedule(49, 100, 1000, 2e-5), 1e-5);
  EXPECT_DOUBLE_EQ(vd::lr_schedule(0, 100, 1000, 2e-5), 2e-7);
  EXPECT_DOUBLE_EQ(vd::lr_schedule(100, 100, 1000, 2e-5), 2e-5);
  EXPECT_NEAR(vd::lr_schedule(550, 100, 1000, 2e-5), 1e-5, 1e-18);
  EXPECT_NEAR(vd::lr_schedule(1000, 100, 1000, 2e-5), 0.0, 1e-20);
  EXPECT_DOUBLE_EQ(vd::lr_schedule(0, 0, 10, 1.0), 1.0);
  double prev = 1.0;
  for (std::size_t s = 100; s <= 1000; ++s) {
    const double lr = vd::lr_schedule(s, 100, 1000, 1.0);
    ASSERT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(vd::lr_schedule(0, 10, 10, 1.0), std::invalid_argument);
  EXPECT_THROW(vd::lr_schedule(11, 0, 10, 1.0), std::invalid_argument);
}

TEST(TrainConfig, ValidationAndJson) {
  vd::TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lr0 = 0;
  try {
    c.validate();
    FAIL();
  } catch (const vd::ConfigError& e) {
    EXPECT_EQ(e.field(), "lr0");
  }
  c = quick_config();
  c.dice_weight = 0.25;
  EXPECT_EQ(vd::train_config_from_json(vd::to_json(c)), c);
  EXPECT_EQ(vd::train_config_from_json(R"({"epochs": 3})").epochs, 3u);
  EXPECT_THROW(vd::train_config_from_json(R"({"learning_rate": 1})"), vd::ConfigError);
  c = {};
  c.split = "validation";
  EXPECT_THROW(c.validate(), vd::ConfigError);
}

TEST(Train, RunIsDeterministicAndWritesArtifacts) {
  const auto ds = tiny_dataset("det", 5, 8);
  const auto out = fs::temp_directory_path() / "vd_test_train_out";
  fs::remove_all(out);
  auto cfg = quick_config();
  cfg.checkpoint_every = 3;
  const auto a = vd::train<double>({ds}, vd::ModelConfig::tiny(), cfg, {out});
  const auto b = vd::train<double>({ds}, vd::ModelConfig::tiny(), cfg);
  ASSERT_EQ(a.curve.size(), 6u);
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
    EXPECT_EQ(a.curve[i].lr, b.curve[i].lr);
    EXPECT_TRUE(std::isfinite(a.curve[i].loss));
  }
  EXPECT_EQ(a.warmup_steps, 2u);
  ASSERT_TRUE(a.checkpoint.has_value());
  EXPECT_TRUE(fs::exists(*a.checkpoint));
  EXPECT_TRUE(fs::exists(out / "checkpoint_step000003.bin"));
  std::ifstream log(out / "metrics.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line);) ++lines;
  EXPECT_EQ(lines, 6u);
  const auto loaded = vd::load_checkpoint<double>(*a.checkpoint);
  const auto& w = loaded.params().at("head.conv1.w");
  EXPECT_TRUE(std::equal(w.data().begin(), w.data().end(), a.model.params().at("head.conv1.w").data().begin()));
  fs::remove_all(out);
}

TEST(Train, JointManifestsFeedBothSources) {
  const auto d1 = tiny_dataset("j1", 6, 8);
  const auto d2 = tiny_dataset("j2", 7, 8);
  auto cfg = quick_config();
  cfg.batch_size = 1;
  cfg.max_steps = 0;
  cfg.epochs = 1;
  cfg.warmup_steps = 1;
  const auto r = vd::train<double>({d1, d2}, vd::ModelConfig::tiny(), cfg);
  ASSERT_EQ(r.samples_per_source.size(), 2u);
  EXPECT_GT(r.samples_per_source[0], 0u);
  EXPECT_GT(r.samples_per_source[1], 0u);
  EXPECT_EQ(r.samples_per_source[0] + r.samples_per_source[1], r.total_steps);
}

TEST(Train, NonFiniteLossAborts) {
  const auto ds = tiny_dataset("nan", 8, 4);
  const vd::ViewDeltaModel<double> probe(vd::ModelConfig::tiny(), 0);
  auto examples = vd::load_examples<double>({ds}, probe, "all");
  ASSERT_FALSE(examples.empty());
  for (auto& ex : examples) {
    ex.input.image_a = ex.input.image_a.detach();
    ex.input.image_a.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  }
  EXPECT_THROW(vd::train<double>(examples, 1, vd::ModelConfig::tiny(), quick_config()), vd::TrainingError);
}

TEST(Train, WarmupMustBeBelowTotal) {
  const auto ds = tiny_dataset("warm", 9, 4);
  auto cfg = quick_config();
  cfg.warmup_steps = 6;
  EXPECT_THROW(vd::train<double>({ds}, vd::ModelConfig::tiny(), cfg), vd::ConfigError);
}

TEST(GradCheck, TinyModelPassesAndInjectedFaultFails) {
  vd::ModelConfig cfg = vd::ModelConfig::tiny();
  cfg.layers = 1;
  const auto ok = vd::grad_check(cfg);
  EXPECT_TRUE(ok.passed) << vd::to_text(ok);
  EXPECT_LT(ok.max_rel_error, 1e-3);
  vd::engine_config().inject_fault = "layer_norm";
  const auto bad = vd::grad_check(cfg);
  vd::engine_config().inject_fault.clear();
  EXPECT_FALSE(bad.passed);
  EXPECT_FALSE(bad.failing.empty());
}
