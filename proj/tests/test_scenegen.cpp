#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "viewdelta/scenegen.hpp"
#include "viewdelta/verify/oracles.hpp"

namespace vd = viewdelta;
namespace fs = std::filesystem;

namespace {

vd::ObjectInstance object(std::uint32_t id, const std::string& cls, std::size_t pixels) {
  vd::ObjectInstance o;
  o.id = id;
  o.class_name = cls;
  o.mask = vd::Mask(16, 16);
  for (std::size_t i = 0; i < pixels; ++i) o.mask.values[id * 20 + i] = 1;
  return o;
}

vd::SceneSpec scene_of(const std::vector<std::string>& classes) {
  vd::SceneSpec s;
  s.side = 16;
  for (std::size_t i = 0; i < classes.size(); ++i) s.objects.push_back(object(static_cast<std::uint32_t>(i), classes[i], 5));
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("vd_test_" + name);
  fs::remove_all(p);
  return p;
}

bool pixels_differ(const vd::RgbImage& a, const vd::RgbImage& b, std::size_t i) {
  return a.pixels[3 * i] != b.pixels[3 * i] || a.pixels[3 * i + 1] != b.pixels[3 * i + 1] ||
         a.pixels[3 * i + 2] != b.pixels[3 * i + 2];
}

// A rendered scene with at least two classes, plus one object of each of two classes.
struct Fixture {
  vd::RenderedScene r;
  vd::ObjectInstance change, herring;
};

Fixture two_class_scene(const vd::GeneratorConfig& cfg) {
  for (std::uint64_t seed = 0;; ++seed) {
    Fixture f{vd::render_scene(seed, cfg), {}, {}};
    const auto& objs = f.r.scene.objects;
    for (const auto& o : objs) {
      for (const auto& p : objs) {
        if (o.class_name != p.class_name) {
          bool shared = false;  // no other object of the change class
          for (const auto& q : objs) shared |= q.id != o.id && q.class_name == o.class_name;
          if (!shared) {
            f.change = o;
            f.herring = p;
            return f;
          }
        }
      }
    }
  }
}

}  // namespace

TEST(Vocabulary, FortyDistinctClassNames) {
  const auto& v = vd::class_vocabulary();
  EXPECT_GE(v.size(), 40u);
  EXPECT_EQ(std::set<std::string>(v.begin(), v.end()).size(), v.size());
  EXPECT_TRUE(vd::in_vocabulary("red disk"));
  EXPECT_FALSE(vd::in_vocabulary("purple elephant"));
}

TEST(RenderScene, DeterministicAndWithinBounds) {
  const vd::GeneratorConfig cfg;
  const auto a = vd::render_scene(42, cfg), b = vd::render_scene(42, cfg);
  EXPECT_EQ(a.image.pixels, b.image.pixels);
  std::size_t lo = 1000, hi = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto r = vd::render_scene(seed, cfg);
    lo = std::min(lo, r.scene.objects.size());
    hi = std::max(hi, r.scene.objects.size());
    std::set<std::uint32_t> ids;
    for (const auto& o : r.scene.objects) {
      ids.insert(o.id);
      ASSERT_EQ(o.mask.width, cfg.canvas);
      ASSERT_EQ(o.mask.height, cfg.canvas);
      ASSERT_GE(o.mask.count(), cfg.min_visible_pixels);
      ASSERT_TRUE(vd::in_vocabulary(o.class_name));
    }
    ASSERT_EQ(ids.size(), r.scene.objects.size());
  }
  EXPECT_GE(lo, 6u);
  EXPECT_LE(hi, 14u);
}

TEST(RenderScene, VisibleMasksAreDisjoint) {
  const auto r = vd::render_scene(7, {});
  std::vector<int> owner(64 * 64, 0);
  for (const auto& o : r.scene.objects) {
    for (std::size_t i = 0; i < owner.size(); ++i) owner[i] += o.mask.values[i];
  }
  for (int c : owner) EXPECT_LE(c, 1);
}

TEST(ProposeClasses, LeastRepresentedWithLexicographicTies) {
  const std::string a = "blue disk", b = "green ring", c = "red triangle";
  const auto scene = scene_of({c, a, b});
  auto ledger_abc = [&] {
    vd::ClassBalanceLedger l;
    l.set(a, 5);
    l.set(b, 1);
    l.set(c, 3);
    return l;
  };
  auto l1 = ledger_abc();
  EXPECT_EQ(vd::propose_classes(scene, l1, 1), (std::vector<std::string>{b}));
  EXPECT_EQ(l1.count(b), 2u);
  auto l2 = ledger_abc();
  EXPECT_EQ(vd::propose_classes(scene, l2, 2), (std::vector<std::string>{b, c}));
  vd::ClassBalanceLedger tie;
  tie.set(a, 2);
  tie.set(b, 2);
  EXPECT_EQ(vd::propose_classes(scene_of({b, a}), tie, 1), (std::vector<std::string>{a}));
  auto l3 = ledger_abc();
  EXPECT_EQ(vd::propose_classes(scene, l3, 9).size(), 3u);  // clamped to what is present
  vd::ClassBalanceLedger empty;
  EXPECT_THROW(vd::propose_classes(vd::SceneSpec{}, empty, 1), vd::GenerationError);
}

TEST(ProposeClasses, CapKeepsLargestVisibleClasses) {
  vd::SceneSpec s;
  s.side = 16;
  const auto& vocab = vd::class_vocabulary();
  for (std::uint32_t i = 0; i < 12; ++i) s.objects.push_back(object(i, vocab[i], 1 + i));
  vd::ClassBalanceLedger ledger;
  const auto chosen = vd::propose_classes(s, ledger, 5, 10);
  for (const auto& c : chosen) {
    EXPECT_NE(c, vocab[0]);
    EXPECT_NE(c, vocab[1]);
  }
}

TEST(Prompts, RawAndTemplatedForms) {
  vd::Rng rng(1);
  const auto& bank = vd::TemplateBank::builtin_classes();
  EXPECT_EQ(vd::make_prompt({"red disk"}, bank, rng, 1.0), "red disk");
  EXPECT_EQ(vd::fill_template("highlight any changes to {classes}", {"a", "b"}), "highlight any changes to a, b");
  const auto templated = vd::make_prompt({"red disk", "blue ring"}, bank, rng, 0.0);
  EXPECT_NE(templated.find("red disk, blue ring"), std::string::npos);
  EXPECT_NE(templated, "red disk, blue ring");
  EXPECT_THROW(vd::make_prompt({"x"}, vd::TemplateBank{}, rng, 0.0), vd::GenerationError);
}

TEST(Prompts, BuiltinBanksHaveExpectedSizes) {
  const auto& cls = vd::TemplateBank::builtin_classes();
  const auto& all = vd::TemplateBank::builtin_all();
  EXPECT_EQ(cls.templates.size(), 45u);
  EXPECT_EQ(all.templates.size(), 96u);
  for (const auto& t : cls.templates) EXPECT_NE(t.find(vd::kClassesPlaceholder), std::string::npos) << t;
  EXPECT_EQ(std::set<std::string>(cls.templates.begin(), cls.templates.end()).size(), 45u);
  EXPECT_EQ(std::set<std::string>(all.templates.begin(), all.templates.end()).size(), 96u);
  const auto parsed = vd::TemplateBank::parse("first {classes}\n\nsecond {classes}\n");
  EXPECT_EQ(parsed.templates.size(), 2u);
}

TEST(Prompts, TemplateChoiceIsUniform) {
  const auto& bank = vd::TemplateBank::builtin_classes();
  const std::size_t n = 10000, k = bank.templates.size();
  std::map<std::string, std::size_t> counts;
  std::map<std::string, std::string> by_prompt;
  for (const auto& t : bank.templates) by_prompt[vd::fill_template(t, {"zz"})] = t;
  vd::Rng rng(123);
  for (std::size_t i = 0; i < n; ++i) ++counts[by_prompt.at(vd::make_prompt({"zz"}, bank, rng, 0.0))];
  const double expected = static_cast<double>(n) / static_cast<double>(k);
  const double sigma = std::sqrt(expected * (1.0 - 1.0 / static_cast<double>(k)));
  double chi2 = 0;
  for (const auto& t : bank.templates) {
    const double c = static_cast<double>(counts[t]);
    // 4 sigma keeps the family-wise false alarm rate near 0.3% over 45 templates.
    EXPECT_LE(std::abs(c - expected), 4 * sigma) << t;
    chi2 += (c - expected) * (c - expected) / expected;
  }
  EXPECT_LT(chi2, 78.75);  // chi-square, 44 dof, p = 0.001
}

TEST(ChangePair, SingleChangeLabelIsItsMask) {
  vd::GeneratorConfig cfg;
  const auto f = two_class_scene(cfg);
  const auto pair = vd::synthesize_change_pair(f.r.scene, f.r.image, {f.change.class_name}, {f.change.id}, {},
                                               f.change.class_name, cfg);
  EXPECT_EQ(pair.label, f.change.mask);
  EXPECT_EQ(pair.image_a.pixels, f.r.image.pixels);
  EXPECT_EQ(pair.prompt, f.change.class_name);
}

TEST(ChangePair, RedHerringPixelsChangeButStayUnlabelled) {
  vd::GeneratorConfig cfg;
  const auto f = two_class_scene(cfg);
  const auto pair = vd::synthesize_change_pair(f.r.scene, f.r.image, {f.change.class_name}, {f.change.id},
                                               {f.herring.id}, f.change.class_name, cfg);
  std::size_t n = 0;
  for (std::size_t i = 0; i < pair.label.values.size(); ++i) {
    if (!f.herring.mask.values[i]) continue;
    ++n;
    EXPECT_TRUE(pixels_differ(pair.image_a, pair.image_b, i));
    EXPECT_EQ(pair.label.values[i], 0);
  }
  EXPECT_GT(n, 0u);
  EXPECT_EQ(pair.meta.red_herring_ids, (std::vector<std::uint32_t>{f.herring.id}));
  // Herring classes get their own per-class label.
  EXPECT_EQ(pair.class_label(f.herring.class_name), f.herring.mask);
}

TEST(ChangePair, RejectsInconsistentIdSets) {
  vd::GeneratorConfig cfg;
  const auto f = two_class_scene(cfg);
  EXPECT_THROW(vd::synthesize_change_pair(f.r.scene, f.r.image, {f.change.class_name}, {f.herring.id}, {}, "x", cfg),
               vd::GenerationError);
  EXPECT_THROW(vd::synthesize_change_pair(f.r.scene, f.r.image, {f.change.class_name}, {f.change.id},
                                          {f.change.id}, "x", cfg),
               vd::GenerationError);
}

TEST(ChangePair, SampledCountsStayInBounds) {
  vd::GeneratorConfig cfg;
  cfg.affine = false;
  const auto banks = vd::PromptBanks::from_config(cfg);
  const vd::ProceduralSceneBackend backend(cfg);
  vd::ClassBalanceLedger ledger;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto g = vd::generate_sample(s, false, ledger, cfg, banks, backend);
    const auto& m = g.pair.meta;
    ASSERT_GE(m.change_ids.size(), 1u);
    ASSERT_LE(m.change_ids.size(), 10u);
    ASSERT_LE(m.red_herring_ids.size(), 10u);
    ASSERT_GE(m.classes_in_prompt.size(), 1u);
    ASSERT_LE(m.classes_in_prompt.size(), 5u);
  }
}

TEST(AllPair, RemovesFiveToTenAndLabelsEverything) {
  vd::GeneratorConfig cfg;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto r = vd::render_scene(seed, cfg);
    vd::Rng rng(seed);
    const auto pair = vd::synthesize_all_pair(r.scene, r.image, rng, cfg, vd::TemplateBank::builtin_all());
    const auto& m = pair.meta;
    ASSERT_TRUE(m.is_all);
    ASSERT_GE(m.change_ids.size(), 5u);
    ASSERT_LE(m.change_ids.size(), 10u);
    ASSERT_TRUE(m.red_herring_ids.empty());
    vd::Mask expect(cfg.canvas, cfg.canvas);
    for (auto id : m.change_ids) expect = vd::mask_union(expect, r.scene.object(id).mask);
    ASSERT_EQ(pair.label, expect);
  }
  vd::SceneSpec small = scene_of({"red disk", "blue disk"});
  vd::Rng rng(0);
  EXPECT_THROW(vd::synthesize_all_pair(small, vd::RgbImage(16, 16), rng, cfg, vd::TemplateBank::builtin_all()),
               vd::GenerationError);
}

TEST(Affine, IdentityLeavesPairUnchanged) {
  vd::GeneratorConfig cfg;
  const auto f = two_class_scene(cfg);
  const auto pair = vd::synthesize_change_pair(f.r.scene, f.r.image, {f.change.class_name}, {f.change.id},
                                               {f.herring.id}, "p", cfg);
  const auto out = vd::apply_affine_and_prune(pair, vd::AffineParams::identity(), 0.5);
  EXPECT_EQ(out.image_a.pixels, pair.image_a.pixels);
  EXPECT_EQ(out.image_b.pixels, pair.image_b.pixels);
  EXPECT_EQ(out.label, pair.label);
}

TEST(Affine, ObjectMovedOutOfFrameIsPruned) {
  vd::GeneratorConfig cfg;
  const auto f = two_class_scene(cfg);
  const auto pair =
      vd::synthesize_change_pair(f.r.scene, f.r.image, {f.change.class_name}, {f.change.id}, {}, "p", cfg);
  vd::AffineParams shift;
  shift.tx = 64;
  const auto out = vd::apply_affine_and_prune(pair, shift, 0.5);
  EXPECT_TRUE(out.label.empty());
  ASSERT_EQ(out.meta.removed.size(), 1u);
  EXPECT_FALSE(out.meta.removed[0].survived);
  EXPECT_EQ(out.meta.removed[0].visible_fraction, 0.0);
  // Shifted-in canvas area of B takes the background fill.
  EXPECT_EQ(out.image_b.at(0, 0, 0), out.meta.fill_color[0]);
}

TEST(Affine, LabelMatchesPerObjectOracle) {
  vd::GeneratorConfig cfg;
  cfg.max_translation = 0.4;
  cfg.max_rotation_deg = 25;
  const auto banks = vd::PromptBanks::from_config(cfg);
  const vd::ProceduralSceneBackend backend(cfg);
  vd::ClassBalanceLedger ledger;
  std::size_t pruned = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto g = vd::generate_sample(s, s % 4 == 0, ledger, cfg, banks, backend);
    ASSERT_TRUE(g.pair.meta.affine_applied);
    ASSERT_EQ(g.pair.label, vd::oracle::pruned_label(g.before_affine, g.pair.meta.affine, cfg.tau_vis)) << s;
    for (const auto& o : g.pair.meta.removed) pruned += !o.survived;
  }
  EXPECT_GT(pruned, 0u);
}

TEST(Affine, WarpMaskMatchesOracle) {
  vd::Rng rng(3);
  vd::GeneratorConfig cfg;
  cfg.max_rotation_deg = 45;
  cfg.max_translation = 0.3;
  cfg.min_scale = 0.6;
  cfg.max_scale = 1.4;
  for (int t = 0; t < 50; ++t) {
    vd::Mask m(64, 64);
    for (auto& v : m.values) v = rng.coin(0.3);
    const auto a = vd::sample_affine(rng, cfg);
    EXPECT_EQ(vd::warp_mask(m, a), vd::oracle::warp_mask(m, a));
  }
}

TEST(Affine, SampledParametersRespectRanges) {
  vd::Rng rng(4);
  const vd::GeneratorConfig cfg;
  std::size_t on_b = 0;
  for (int t = 0; t < 2000; ++t) {
    const auto a = vd::sample_affine(rng, cfg);
    ASSERT_LE(std::abs(a.rotation_deg), 10.0);
    ASSERT_LE(std::abs(a.tx), 6.4);
    ASSERT_LE(std::abs(a.ty), 6.4);
    ASSERT_GE(a.scale, 0.9);
    ASSERT_LE(a.scale, 1.1);
    on_b += a.applied_to_b;
  }
  EXPECT_NEAR(static_cast<double>(on_b) / 2000, 0.5, 0.05);
}

TEST(Dataset, AllPairCountFloorRule) {
  EXPECT_EQ(vd::all_pair_count(100, 0.12), 12u);
  EXPECT_EQ(vd::all_pair_count(200, 0.12), 24u);
  EXPECT_EQ(vd::all_pair_count(2000, 0.12), 240u);
  EXPECT_EQ(vd::all_pair_count(7, 0.12), 0u);
  EXPECT_EQ(vd::all_pair_count(10, 1.0), 10u);
}

TEST(Dataset, ReplayIsByteIdenticalAndStatsMatchScan) {
  vd::DatasetOptions o;
  o.n_pairs = 40;
  o.seed = 9;
  const auto d1 = scratch("ds1"), d2 = scratch("ds2");
  const auto m1 = vd::generate_dataset(o, d1);
  vd::generate_dataset(o, d2);
  EXPECT_EQ(slurp(d1 / vd::kManifestFile), slurp(d2 / vd::kManifestFile));
  EXPECT_EQ(slurp(d1 / vd::kStatsFile), slurp(d2 / vd::kStatsFile));
  for (const auto& r : m1.records) {
    EXPECT_EQ(slurp(d1 / r.image_b), slurp(d2 / r.image_b));
    EXPECT_EQ(slurp(d1 / r.label), slurp(d2 / r.label));
    const auto label = vd::read_png_mask(d1 / r.label, true);  // only 0 / 255 on disk
    EXPECT_EQ(label.width, 64u);
  }

  const auto back = vd::read_manifest(d1);
  EXPECT_EQ(back.records, m1.records);
  EXPECT_EQ(vd::read_manifest(d1 / vd::kManifestFile).records.size(), 40u);
  std::set<std::string> classes;
  std::size_t all = 0, train = 0;
  for (const auto& r : back.records) {
    classes.insert(r.classes.begin(), r.classes.end());
    all += r.is_all;
    train += r.split == "train";
  }
  const auto stats = nlohmann::json::parse(slurp(d1 / vd::kStatsFile));
  EXPECT_EQ(stats["unique_classes"].get<std::size_t>(), classes.size());
  EXPECT_EQ(stats["all_pairs"].get<std::size_t>(), 4u);
  EXPECT_EQ(all, 4u);
  EXPECT_EQ(train, 36u);
  for (const char* key : {"pairs", "unique_classes", "unique_prompts", "all_fraction"}) {
    EXPECT_TRUE(stats.contains(key)) << key;
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Dataset, ManifestErrors) {
  const auto d = scratch("bad_manifest");
  fs::create_directories(d);
  EXPECT_THROW(vd::read_manifest(d), vd::ManifestError);
  std::ofstream(d / vd::kManifestFile) << "{\"id\": 3}\n";
  EXPECT_THROW(vd::read_manifest(d), vd::ManifestError);
  fs::remove_all(d);
}

TEST(GeneratorConfig, JsonRoundTripAndValidation) {
  vd::GeneratorConfig c;
  c.max_changes = 4;
  c.affine = false;
  EXPECT_EQ(vd::generator_config_from_json(vd::to_json(c)), c);
  EXPECT_THROW(vd::generator_config_from_json(R"({"max_change": 4})"), std::invalid_argument);
  c = {};
  c.max_prompt_classes = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.tau_vis = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
