#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "viewdelta/model.hpp"
#include "viewdelta/ops.hpp"
#include "viewdelta/rng.hpp"
#include "viewdelta/train.hpp"

namespace vd = viewdelta;
namespace fs = std::filesystem;
using Model = vd::ViewDeltaModel<double>;

namespace {

vd::RgbImage random_image(std::size_t side, std::uint64_t seed) {
  vd::Rng rng(seed);
  vd::RgbImage img(side, side);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

std::vector<double> vals(const vd::Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const vd::Tensor<double>& a, const vd::Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

vd::ModelConfig tiny_with(bool sqt, bool prompts, bool frozen) {
  vd::ModelConfig c = vd::ModelConfig::tiny();
  c.use_sqt = sqt;
  c.use_prompts = prompts;
  c.use_frozen_image_embedder = frozen;
  return c;
}

}  // namespace

TEST(ModelConfig, DeskDefaultsAndSequenceLength) {
  const vd::ModelConfig c;
  EXPECT_EQ(c.image_side, 64u);
  EXPECT_EQ(c.d_model, 128u);
  EXPECT_EQ(c.layers, 4u);
  EXPECT_EQ(c.seq_len(), 208u);
  vd::ModelConfig np = c;
  np.use_prompts = false;
  EXPECT_EQ(np.seq_len(), 192u);
  vd::ModelConfig ns = c;
  ns.use_sqt = false;
  EXPECT_EQ(ns.seq_len(), 2u * 64 + 16);
  EXPECT_EQ(vd::ModelParams<double>::init(np, 0).at("pos").shape(), (vd::Shape{192, 128}));
}

TEST(ModelConfig, ValidationNamesField) {
  vd::ModelConfig c;
  c.heads = 3;
  try {
    c.validate();
    FAIL();
  } catch (const vd::ConfigError& e) {
    EXPECT_EQ(e.field(), "heads");
  }
  c = {};
  c.n_sqt = 50;
  EXPECT_THROW(c.validate(), vd::ConfigError);
  c = {};
  c.patch = 7;
  EXPECT_THROW(c.validate(), vd::ConfigError);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  vd::ModelConfig c = vd::ModelConfig::tiny();
  c.use_sqt = false;
  EXPECT_EQ(vd::model_config_from_json(vd::to_json(c)), c);
  EXPECT_THROW(vd::model_config_from_json(R"({"dmodel": 3})"), vd::ConfigError);
}

TEST(ModelParams, CountIsFunctionOfConfigAndInitIsSeeded) {
  const vd::ModelConfig c;
  const auto a = vd::ModelParams<double>::init(c, 3);
  EXPECT_EQ(a.scalar_count(), 928129u);
  const auto b = vd::ModelParams<double>::init(c, 3);
  const auto d = vd::ModelParams<double>::init(c, 4);
  EXPECT_EQ(vals(a.at("blocks.2.mlp.fc1.w")), vals(b.at("blocks.2.mlp.fc1.w")));
  EXPECT_NE(vals(a.at("blocks.2.mlp.fc1.w")), vals(d.at("blocks.2.mlp.fc1.w")));
  EXPECT_EQ(vd::ModelParams<float>::init(c, 3).scalar_count(), 928129u);
}

TEST(ModelParams, VariantsOwnTheRightTensors) {
  const auto base = vd::ModelParams<double>::init(tiny_with(true, true, true), 0);
  EXPECT_TRUE(base.contains("embed.image.w"));
  EXPECT_TRUE(base.contains("sqt"));
  EXPECT_FALSE(base.contains("embed.patch.w"));
  const auto patch = vd::ModelParams<double>::init(tiny_with(true, true, false), 0);
  EXPECT_TRUE(patch.contains("embed.patch.w"));
  EXPECT_FALSE(patch.contains("embed.image.w"));
  const auto no_sqt = vd::ModelParams<double>::init(tiny_with(false, true, true), 0);
  EXPECT_FALSE(no_sqt.contains("sqt"));
  const auto no_prompt = vd::ModelParams<double>::init(tiny_with(true, false, true), 0);
  EXPECT_FALSE(no_prompt.contains("embed.text.w"));
}

TEST(Model, DeskForwardShapeAndDeterminism) {
  const vd::ModelConfig c;
  const Model m(c, 1);
  const auto in = m.prepare(random_image(64, 1), random_image(64, 2), "highlight the red disk");
  const auto a = m.forward(in);
  EXPECT_EQ(a.shape(), (vd::Shape{1, 64, 64}));
  const Model m2(c, 1);
  EXPECT_EQ(vals(m2.forward(m2.prepare(random_image(64, 1), random_image(64, 2), "highlight the red disk"))), vals(a));
  for (double v : a.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, ImageOrderAndPromptAreSemantic) {
  const Model m(vd::ModelConfig::tiny(), 2);
  const auto ia = random_image(16, 3), ib = random_image(16, 4);
  const auto base = m.forward(m.prepare(ia, ib, "red disk"));
  EXPECT_GT(max_abs_diff(base, m.forward(m.prepare(ib, ia, "red disk"))), 0.0);
  EXPECT_GT(max_abs_diff(base, m.forward(m.prepare(ia, ib, "blue ring"))), 0.0);
}

TEST(Model, VariantsDifferAndKeepOutputShape) {
  const auto ia = random_image(16, 5), ib = random_image(16, 6);
  std::vector<vd::Tensor<double>> outs;
  for (const auto& cfg : {tiny_with(true, true, true), tiny_with(false, true, true), tiny_with(true, false, true),
                          tiny_with(true, true, false)}) {
    const Model m(cfg, 7);
    outs.push_back(m.forward(m.prepare(ia, ib, "green star")));
    EXPECT_EQ(outs.back().shape(), (vd::Shape{1, 16, 16}));
  }
  EXPECT_GT(max_abs_diff(outs[0], outs[1]), 0.0);
  EXPECT_GT(max_abs_diff(outs[0], outs[3]), 0.0);
}

TEST(Model, VariantEntryPointsCheckFlags) {
  const Model m(vd::ModelConfig::tiny(), 0);
  const auto in = m.prepare(random_image(16, 1), random_image(16, 2), "x");
  EXPECT_THROW(m.forward_no_sqt(in), vd::ConfigError);
  EXPECT_THROW(m.forward_patch_embed(in), vd::ConfigError);
  const Model ns(tiny_with(false, true, true), 0);
  vd::ForwardTrace<double> trace;
  ns.forward_no_sqt(ns.prepare(random_image(16, 1), random_image(16, 2), "x"), &trace);
  EXPECT_EQ(trace.layout.sqt_len, 0u);
  EXPECT_EQ(trace.layout.length, 2u * 16 + ns.config().t_max);
  EXPECT_EQ(trace.head_input.dim(0), 2 * ns.config().d_model);
}

TEST(Model, SqtSliceIsTrailingRows) {
  const Model m(vd::ModelConfig::tiny(), 3);
  vd::ForwardTrace<double> trace;
  m.forward(m.prepare(random_image(16, 8), random_image(16, 9), "blue ring"), &trace);
  const auto& c = m.config();
  const std::size_t g = c.grid(), L = c.seq_len();
  ASSERT_EQ(trace.backbone_out.shape(), (vd::Shape{L, c.d_model}));
  for (std::size_t ch = 0; ch < c.d_model; ++ch) {
    for (std::size_t p = 0; p < g * g; ++p) {
      ASSERT_EQ(trace.head_input.data()[ch * g * g + p], trace.backbone_out.at({L - c.n_sqt + p, ch}));
    }
  }
}

TEST(Model, SegHeadGeometryAndZeroInput) {
  const vd::ModelConfig c;
  Model m(c, 4);
  for (auto& [name, t] : m.params().entries()) {
    if (name.starts_with("head.") && name.ends_with(".b")) {
      for (auto& v : t.mutable_data()) v = 0;
    }
  }
  const auto out = m.seg_head(vd::Tensor<double>::zeros({c.d_model, 8, 8}));
  EXPECT_EQ(out.shape(), (vd::Shape{1, 64, 64}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(m.seg_head(vd::Tensor<double>::zeros({c.d_model, 6, 6})), std::invalid_argument);
}

TEST(Model, EveryParameterGetsAFiniteGradient) {
  for (const auto& cfg : {tiny_with(true, true, true), tiny_with(false, true, true), tiny_with(true, true, false)}) {
    Model m(cfg, 5);
    const auto logits = m.forward(m.prepare(random_image(16, 10), random_image(16, 11), "red disk"));
    vd::Mask label(16, 16);
    for (std::size_t i = 0; i < 40; ++i) label.values[i * 5 % 256] = 1;
    auto loss = vd::bce_loss(logits, label);
    loss.backward();
    for (const auto& [name, t] : m.params().entries()) {
      double norm = 0;
      for (double g : t.grad()) {
        ASSERT_TRUE(std::isfinite(g)) << name;
        norm += g * g;
      }
      // Key biases shift every attention score of a query equally, so softmax
      // removes them exactly.
      if (name.ends_with("attn.k.b")) {
        EXPECT_LT(norm, 1e-20) << name;
      } else {
        EXPECT_GT(norm, 0.0) << name;
      }
    }
  }
}

TEST(Model, BinarizeUsesThreshold) {
  vd::ModelConfig c = vd::ModelConfig::tiny();
  const Model m(c, 0);
  std::vector<double> z(16 * 16, -5.0);
  z[0] = -1.0;
  z[1] = 0.1;
  z[2] = 3.0;
  const auto logits = vd::Tensor<double>::from({1, 16, 16}, z);
  vd::Mask expect(16, 16);
  expect.values[1] = expect.values[2] = 1;
  EXPECT_EQ(m.binarize(logits), expect);
  c.threshold = 0.9;
  const Model strict(c, 0);
  expect.values[1] = 0;
  EXPECT_EQ(strict.binarize(logits), expect);
}

TEST(Checkpoint, RoundTripAndDtypeConversion) {
  const auto dir = fs::temp_directory_path() / "vd_test_ckpt";
  fs::create_directories(dir);
  const vd::ModelConfig cfg = tiny_with(true, false, true);
  const Model m(cfg, 9);
  vd::save_checkpoint(dir / "m.bin", m, 9, 123);
  vd::CheckpointInfo info;
  const auto back = vd::load_checkpoint<double>(dir / "m.bin", &info);
  EXPECT_EQ(info.config, cfg);
  EXPECT_EQ(info.step, 123u);
  EXPECT_EQ(info.seed, 9u);
  for (std::size_t i = 0; i < m.params().entries().size(); ++i) {
    EXPECT_EQ(vals(m.params().entries()[i].second), vals(back.params().entries()[i].second));
  }
  const auto as_float = vd::load_checkpoint<float>(dir / "m.bin");
  EXPECT_FLOAT_EQ(as_float.params().at("sqt").data()[5], static_cast<float>(m.params().at("sqt").data()[5]));

  // Truncated data is rejected.
  fs::copy_file(dir / "m.bin", dir / "cut.bin", fs::copy_options::overwrite_existing);
  fs::resize_file(dir / "cut.bin", fs::file_size(dir / "cut.bin") - 16);
  EXPECT_THROW(vd::load_checkpoint<double>(dir / "cut.bin"), vd::CheckpointError);
  fs::remove_all(dir);
}
