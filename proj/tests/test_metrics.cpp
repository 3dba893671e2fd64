#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "viewdelta/metrics.hpp"
#include "viewdelta/rng.hpp"
#include "viewdelta/verify/oracles.hpp"

namespace vd = viewdelta;
namespace fs = std::filesystem;

namespace {

vd::Mask mask2(std::initializer_list<std::uint8_t> v) {
  vd::Mask m(2, 2);
  m.values.assign(v);
  return m;
}

// Keeps only the lower half of the label.
class HalfPredictor : public vd::Predictor {
 public:
  vd::Mask predict(const vd::EvalItem& item) override {
    vd::Mask m = item.label;
    std::fill(m.values.begin(), m.values.begin() + static_cast<long>(m.values.size() / 2), 0);
    ++calls;
    return m;
  }
  std::size_t calls = 0;
};

// Generated once for the whole file.
const vd::DatasetManifest& toy_manifest() {
  static const vd::DatasetManifest m = [] {
    vd::DatasetOptions o;
    o.n_pairs = 30;
    o.seed = 21;
    o.split_ratio = 0.5;
    const auto dir = fs::temp_directory_path() / "vd_test_metrics_ds";
    fs::remove_all(dir);
    return vd::generate_dataset(o, dir);
  }();
  return m;
}

}  // namespace

TEST(Confusion, HandCounts) {
  EXPECT_EQ(vd::confusion(mask2({1, 1, 1, 1}), mask2({1, 1, 1, 1})), (vd::ConfusionCounts{4, 0, 0, 0}));
  EXPECT_EQ(vd::confusion(mask2({1, 0, 0, 0}), mask2({1, 1, 0, 0})), (vd::ConfusionCounts{1, 0, 1, 2}));
  EXPECT_EQ(vd::confusion(mask2({1, 0, 0, 0}), mask2({1, 1, 0, 0})).total(), 4u);
}

TEST(Confusion, Errors) {
  EXPECT_THROW(vd::confusion(vd::Mask(2, 2), vd::Mask(3, 2)), std::invalid_argument);
  EXPECT_THROW(vd::confusion(mask2({2, 0, 0, 0}), mask2({1, 0, 0, 0})), std::invalid_argument);
}

TEST(Confusion, MatchesLoopOracle) {
  vd::Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    vd::Mask a(64, 64), b(64, 64);
    for (auto& v : a.values) v = rng.coin(0.2);
    for (auto& v : b.values) v = rng.coin(0.4);
    EXPECT_EQ(vd::confusion(a, b), vd::oracle::confusion(a, b));
  }
}

TEST(ComputeMetrics, ArithmeticAndDegenerateRule) {
  const auto m = vd::compute_metrics({1, 1, 1, 0});
  EXPECT_DOUBLE_EQ(m.iou, 1.0 / 3);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.f1, 0.5);
  const auto e = vd::compute_metrics({0, 0, 0, 16});
  EXPECT_EQ(e.iou, 1.0);
  EXPECT_EQ(e.f1, 1.0);
  EXPECT_EQ(e.recall, 1.0);
  EXPECT_EQ(e.precision, 1.0);
  const auto miss = vd::compute_metrics({0, 0, 3, 13});
  EXPECT_EQ(miss.precision, 0.0);
  EXPECT_EQ(miss.recall, 0.0);
  EXPECT_EQ(miss.f1, 0.0);
}

TEST(ComputeMetrics, Properties) {
  vd::Rng rng(2);
  for (int t = 0; t < 500; ++t) {
    vd::Mask a(16, 16), b(16, 16);
    const double pa = rng.uniform(), pb = rng.uniform();
    for (auto& v : a.values) v = rng.coin(pa);
    for (auto& v : b.values) v = rng.coin(pb);
    const auto m = vd::compute_metrics(vd::confusion(a, b));
    for (double x : {m.iou, m.f1, m.recall, m.precision}) {
      ASSERT_GE(x, 0.0);
      ASSERT_LE(x, 1.0);
    }
    ASSERT_LE(m.iou, m.f1 + 1e-15);
    if (m.precision + m.recall > 0) {
      ASSERT_NEAR(m.f1, 2 * m.precision * m.recall / (m.precision + m.recall), 1e-15);
    }
    const auto same = vd::compute_metrics(vd::confusion(a, a));
    ASSERT_EQ(same.iou, 1.0);
    ASSERT_EQ(same.f1, 1.0);
  }
}

TEST(Accumulator, MicroIsOrderInvariantAndPoliciesDiffer) {
  vd::Rng rng(3);
  std::vector<vd::ConfusionCounts> counts;
  for (int i = 0; i < 30; ++i) {
    counts.push_back({static_cast<std::uint64_t>(rng.uniform_int(0, 9)), static_cast<std::uint64_t>(rng.uniform_int(0, 9)),
                      static_cast<std::uint64_t>(rng.uniform_int(0, 9)), 50});
  }
  counts.push_back({0, 0, 0, 64});
  vd::MetricAccumulator fwd, rev, skip(vd::EmptyPairPolicy::skip);
  for (const auto& c : counts) {
    fwd.add(c);
    skip.add(c);
  }
  for (auto it = counts.rbegin(); it != counts.rend(); ++it) rev.add(*it);
  const auto a = fwd.report("native", 0.5), b = rev.report("native", 0.5), s = skip.report("native", 0.5);
  EXPECT_EQ(a.micro.iou, b.micro.iou);
  EXPECT_EQ(a.totals, b.totals);
  EXPECT_NEAR(a.macro.iou, b.macro.iou, 1e-15);
  EXPECT_EQ(s.skipped_pairs, 1u);
  EXPECT_EQ(a.micro.iou, s.micro.iou);
  EXPECT_GT(a.macro.iou, s.macro.iou);
  EXPECT_EQ(a.n_pairs, counts.size());
}

TEST(Evaluate, PerfectAndEmptyPredictors) {
  const auto& m = toy_manifest();
  vd::LabelPredictor perfect;
  vd::EvalOptions opts;
  opts.split = "all";
  const auto r = vd::evaluate(m, perfect, opts);
  EXPECT_EQ(r.micro.iou, 1.0);
  EXPECT_EQ(r.n_pairs, 30u);
  vd::EmptyPredictor empty;
  const auto e = vd::evaluate(m, empty, opts);
  EXPECT_EQ(e.micro.recall, 0.0);
  opts.split = "test";
  EXPECT_EQ(vd::evaluate(m, perfect, opts).n_pairs, 15u);
}

TEST(Evaluate, PerClassIsMeanOfSingleClassRuns) {
  const auto& m = toy_manifest();
  std::set<std::string> seen;
  for (const auto& r : m.records) seen.insert(r.classes.begin(), r.classes.end());
  ASSERT_GE(seen.size(), 2u);
  const std::vector<std::string> two(seen.begin(), std::next(seen.begin(), 2));
  vd::EvalOptions opts;
  opts.protocol = vd::Protocol::per_class;
  opts.split = "all";
  HalfPredictor p;
  opts.classes = two;
  const auto both = vd::evaluate(m, p, opts);
  EXPECT_EQ(p.calls, 2 * m.records.size());
  ASSERT_EQ(both.per_class.size(), 2u);
  opts.classes = {two[0]};
  const auto r0 = vd::evaluate(m, p, opts);
  opts.classes = {two[1]};
  const auto r1 = vd::evaluate(m, p, opts);
  EXPECT_NEAR(both.micro.iou, (r0.micro.iou + r1.micro.iou) / 2, 1e-15);
  EXPECT_NEAR(both.macro.f1, (r0.macro.f1 + r1.macro.f1) / 2, 1e-15);
  EXPECT_NEAR(both.micro.recall, (r0.micro.recall + r1.micro.recall) / 2, 1e-15);
}

TEST(Evaluate, FixedPromptReachesPredictor) {
  class PromptSpy : public vd::Predictor {
   public:
    vd::Mask predict(const vd::EvalItem& item) override {
      prompts.insert(item.prompt);
      return vd::Mask(item.label.width, item.label.height);
    }
    std::set<std::string> prompts;
  } spy;
  vd::EvalOptions opts;
  opts.protocol = vd::Protocol::fixed;
  opts.fixed_prompt = "any change at all";
  vd::evaluate(toy_manifest(), spy, opts);
  EXPECT_EQ(spy.prompts, (std::set<std::string>{"any change at all"}));
  opts.fixed_prompt.clear();
  EXPECT_THROW(vd::evaluate(toy_manifest(), spy, opts), std::invalid_argument);
}

TEST(Evaluate, ReportsAndOverlays) {
  const auto dir = fs::temp_directory_path() / "vd_test_overlays";
  fs::remove_all(dir);
  vd::LabelPredictor perfect;
  vd::EvalOptions opts;
  opts.overlay_dir = dir;
  const auto r = vd::evaluate(toy_manifest(), perfect, opts);
  EXPECT_FALSE(fs::is_empty(dir));
  EXPECT_NE(vd::to_text(r).find("micro"), std::string::npos);
  EXPECT_NE(vd::to_json(r).find("\"macro\""), std::string::npos);
  fs::remove_all(dir);
  EXPECT_EQ(vd::parse_protocol("per_class"), vd::Protocol::per_class);
  EXPECT_THROW(vd::parse_protocol("bogus"), std::invalid_argument);
}

TEST(Overlay, ColorsPredictionRedAndLabelBlue) {
  vd::RgbImage img(2, 1);
  img.pixels = {90, 90, 90, 90, 90, 90};
  vd::Mask pred(2, 1), label(2, 1);
  pred.values = {1, 0};
  label.values = {0, 1};
  const auto o = vd::overlay(img, pred, label);
  EXPECT_EQ(o.at(0, 0, 0), 255);
  EXPECT_EQ(o.at(1, 0, 2), 255);
  EXPECT_EQ(o.at(1, 0, 0), 30);
}
