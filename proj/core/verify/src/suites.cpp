#include "viewdelta/verify/suites.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "viewdelta/ops.hpp"
#include "viewdelta/rng.hpp"
#include "viewdelta/verify/oracles.hpp"

namespace viewdelta::verify {

namespace {

using Vec = oracle::Vec;
using Clock = std::chrono::steady_clock;

std::string fmt(const char* format, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, a);
  return buf;
}

Vec random_vec(Rng& rng, std::size_t n) {
  Vec v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

Tensor<double> tensor(Shape shape, const Vec& v) { return Tensor<double>::from(std::move(shape), v); }

double max_abs_diff(std::span<const double> a, const Vec& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::size_t as_size(std::int64_t v) { return static_cast<std::size_t>(v); }

template <typename Fn>
SuiteResult timed(std::string name, Fn&& fn) {
  const auto t0 = Clock::now();
  SuiteResult r;
  r.name = std::move(name);
  try {
    fn(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

}  // namespace

// --- gradients --------------------------------------------------------------------------

SuiteResult grad_check_suite(const GradCheckOptions& options) {
  return timed("grad_check", [&](SuiteResult& r) {
    ModelConfig sqt = ModelConfig::tiny();
    ModelConfig no_sqt = sqt;
    no_sqt.use_sqt = false;
    ModelConfig patch = sqt;
    patch.use_frozen_image_embedder = false;
    std::ostringstream detail;
    r.passed = true;
    double worst = 0.0;
    for (const auto& [config, name] : {std::pair{sqt, "sqt"}, {no_sqt, "no-sqt"}, {patch, "patch-embed"}}) {
      const GradCheckReport rep = grad_check(config, options, name);
      worst = std::max(worst, rep.max_rel_error);
      detail << name << " " << fmt("%.2e", rep.max_rel_error);
      if (!rep.passed) {
        r.passed = false;
        detail << " [failing:";
        for (std::size_t i = 0; i < std::min<std::size_t>(rep.failing.size(), 4); ++i) detail << " " << rep.failing[i];
        if (rep.failing.size() > 4) detail << " and " << rep.failing.size() - 4 << " more";
        detail << "]";
      }
      detail << "; ";
    }
    detail << "max rel error " << fmt("%.2e", worst) << " (tolerance " << fmt("%.0e", options.tolerance) << ")";
    r.detail = detail.str();
  });
}

// --- op oracles ---------------------------------------------------------------------------

SuiteResult op_oracle_suite(std::size_t shapes, std::uint64_t seed, double tol) {
  return timed("op_oracles", [&](SuiteResult& r) {
    Rng rng(seed);
    double worst_mm = 0, worst_conv = 0, worst_convt = 0, worst_attn = 0, worst_bil = 0, worst_adj = 0;
    for (std::size_t s = 0; s < shapes; ++s) {
      {
        const auto m = as_size(rng.uniform_int(1, 12)), k = as_size(rng.uniform_int(1, 12)),
                   n = as_size(rng.uniform_int(1, 12));
        const Vec a = random_vec(rng, m * k), b = random_vec(rng, k * n);
        const auto got = ops::matmul(tensor({m, k}, a), tensor({k, n}, b));
        worst_mm = std::max(worst_mm, max_abs_diff(got.data(), oracle::matmul(a, b, m, k, n)));
      }
      // Shared geometry for conv, transposed conv and the adjoint identity.
      const auto ci = as_size(rng.uniform_int(1, 4)), co = as_size(rng.uniform_int(1, 4));
      const auto kh = as_size(rng.uniform_int(1, 3)), kw = as_size(rng.uniform_int(1, 3));
      const auto stride = as_size(rng.uniform_int(1, 2));
      const auto pad = as_size(rng.uniform_int(0, static_cast<std::int64_t>(std::min(kh, kw)) - 1));
      const auto oh = as_size(rng.uniform_int(1, 5)), ow = as_size(rng.uniform_int(1, 5));
      const std::size_t h = (oh - 1) * stride + kh - 2 * pad, w = (ow - 1) * stride + kw - 2 * pad;
      if (h == 0 || w == 0 || h > 64 || w > 64) {
        --s;
        continue;
      }
      const Vec kernel = random_vec(rng, co * ci * kh * kw);
      const Vec x = random_vec(rng, ci * h * w);
      const Vec y = random_vec(rng, co * oh * ow);
      const bool with_bias = rng.coin();
      const Vec bias_o = with_bias ? random_vec(rng, co) : Vec{};
      const Vec bias_i = with_bias ? random_vec(rng, ci) : Vec{};
      const auto K = tensor({co, ci, kh, kw}, kernel);
      {
        std::optional<Tensor<double>> b;
        if (with_bias) b = tensor({co}, bias_o);
        const auto got = ops::conv2d(tensor({ci, h, w}, x), K, b, stride, pad);
        worst_conv = std::max(worst_conv, max_abs_diff(got.data(), oracle::conv2d(x, ci, h, w, kernel, co, kh, kw,
                                                                                   bias_o, stride, pad)));
      }
      {
        std::optional<Tensor<double>> b;
        if (with_bias) b = tensor({ci}, bias_i);
        const auto got = ops::conv_transpose2d(tensor({co, oh, ow}, y), K, b, stride, pad);
        worst_convt = std::max(worst_convt, max_abs_diff(got.data(), oracle::conv_transpose2d(
                                                                         y, co, oh, ow, kernel, ci, kh, kw,
                                                                         bias_i, stride, pad)));
      }
      {
        const auto cx = ops::conv2d(tensor({ci, h, w}, x), K, std::optional<Tensor<double>>{}, stride, pad);
        const auto ty = ops::conv_transpose2d(tensor({co, oh, ow}, y), K, std::optional<Tensor<double>>{}, stride, pad);
        const double lhs = oracle::dot(Vec(cx.data().begin(), cx.data().end()), y);
        const double rhs = oracle::dot(x, Vec(ty.data().begin(), ty.data().end()));
        worst_adj = std::max(worst_adj, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
      }
      {
        const auto heads = as_size(rng.uniform_int(1, 3)), dh = as_size(rng.uniform_int(1, 4));
        const auto n = as_size(rng.uniform_int(1, 10)), d = heads * dh;
        const Vec q = random_vec(rng, n * d), k = random_vec(rng, n * d), v = random_vec(rng, n * d);
        const auto got = ops::attention(tensor({n, d}, q), tensor({n, d}, k), tensor({n, d}, v), heads);
        worst_attn = std::max(worst_attn, max_abs_diff(got.data(), oracle::attention(q, k, v, n, d, heads)));
      }
      {
        const auto c = as_size(rng.uniform_int(1, 3)), bh = as_size(rng.uniform_int(1, 6)),
                   bw = as_size(rng.uniform_int(1, 6)), f = as_size(rng.uniform_int(1, 4));
        const Vec img = random_vec(rng, c * bh * bw);
        const auto got = ops::bilinear_upsample(tensor({c, bh, bw}, img), f);
        worst_bil = std::max(worst_bil, max_abs_diff(got.data(), oracle::bilinear_upsample(img, c, bh, bw, f)));
      }
    }
    const double worst = std::max({worst_mm, worst_conv, worst_convt, worst_attn, worst_bil, worst_adj});
    r.passed = worst <= tol;
    std::ostringstream d;
    d << shapes << " shapes/op; max abs diff matmul " << fmt("%.1e", worst_mm) << ", conv2d "
      << fmt("%.1e", worst_conv) << ", conv_transpose2d " << fmt("%.1e", worst_convt) << ", attention "
      << fmt("%.1e", worst_attn) << ", bilinear " << fmt("%.1e", worst_bil) << "; adjoint rel "
      << fmt("%.1e", worst_adj) << " (tolerance " << fmt("%.0e", tol) << ")";
    r.detail = d.str();
  });
}

// --- sequence layout -----------------------------------------------------------------------

SuiteResult sequence_layout_suite(std::uint64_t seed) {
  return timed("sequence_layout", [&](SuiteResult& r) {
    const ModelConfig cfg;  // 64 px, patch 8, t_max 16, n_sqt 64
    const ViewDeltaModel<double> model(cfg, seed);
    Rng rng(seed);
    RgbImage a(cfg.image_side, cfg.image_side), b(cfg.image_side, cfg.image_side);
    for (auto& v : a.pixels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    for (auto& v : b.pixels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    const auto input = model.prepare(a, b, "highlight any changes to red disk");
    ForwardTrace<double> trace;
    const auto logits = model.forward(input, &trace);

    std::vector<std::string> problems;
    const std::size_t g = cfg.grid(), g2 = g * g, d = cfg.d_model;
    const std::size_t expected_len = 2 * g2 + cfg.t_max + cfg.n_sqt;
    const auto& l = trace.layout;
    if (l.length != expected_len || trace.concatenated.dim(0) != expected_len) problems.push_back("length");
    if (!(l.image_a_begin == 0 && l.image_a_len == g2 && l.image_b_begin == g2 && l.image_b_len == g2 &&
          l.text_begin == 2 * g2 && l.text_len == cfg.t_max && l.sqt_begin == 2 * g2 + cfg.t_max &&
          l.sqt_len == cfg.n_sqt)) {
      problems.push_back("segment offsets");
    }

    // Each segment's rows must equal its own projection, in order Ia | Ib | T | SQT.
    const auto cat = trace.concatenated.data();
    auto rows_match = [&](std::size_t begin, const Vec& expected) {
      return max_abs_diff(cat.subspan(begin * d, expected.size()), expected) <= 1e-12;
    };
    auto project = [&](const Tensor<double>& x, std::size_t rows, std::size_t in, const char* w, const char* bias) {
      Vec xv(x.data().begin(), x.data().end());
      Vec wv(model.params().at(w).data().begin(), model.params().at(w).data().end());
      Vec out = oracle::matmul(xv, wv, rows, in, d);
      const auto bv = model.params().at(bias).data();
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
      }
      return out;
    };
    if (!rows_match(0, project(input.image_a, g2, cfg.d_img, "embed.image.w", "embed.image.b"))) {
      problems.push_back("Ia rows");
    }
    if (!rows_match(g2, project(input.image_b, g2, cfg.d_img, "embed.image.w", "embed.image.b"))) {
      problems.push_back("Ib rows");
    }
    if (!rows_match(2 * g2, project(input.text, cfg.t_max, cfg.d_text, "embed.text.w", "embed.text.b"))) {
      problems.push_back("T rows");
    }
    const auto sqt = model.params().at("sqt").data();
    if (!rows_match(2 * g2 + cfg.t_max, Vec(sqt.begin(), sqt.end()))) problems.push_back("SQT rows");

    // Head input = trailing n_sqt backbone rows laid out as a [d, g, g] map.
    const auto out = trace.backbone_out.data();
    const auto head = trace.head_input.data();
    if (trace.head_input.shape() != Shape{d, g, g}) problems.push_back("head input shape");
    bool slice_ok = true;
    for (std::size_t c = 0; c < d && slice_ok; ++c) {
      for (std::size_t p = 0; p < g2; ++p) {
        if (head[c * g2 + p] != out[(expected_len - cfg.n_sqt + p) * d + c]) {
          slice_ok = false;
          break;
        }
      }
    }
    if (!slice_ok) problems.push_back("SQT slice");
    if (logits.shape() != Shape{1, cfg.image_side, cfg.image_side}) problems.push_back("logit shape");

    ModelConfig no_prompt = cfg;
    no_prompt.use_prompts = false;
    if (SegmentLayout::of(no_prompt).length != 2 * g2 + cfg.n_sqt) problems.push_back("no-prompt length");

    r.passed = problems.empty();
    std::ostringstream det;
    det << "order [Ia|Ib|T|SQT] at rows 0/" << g2 << "/" << 2 * g2 << "/" << 2 * g2 + cfg.t_max << ", L = "
        << l.length << " (2g^2+t_max+n_sqt = " << expected_len << "), head reads rows [" << expected_len - cfg.n_sqt
        << ", " << expected_len << ")";
    for (const auto& p : problems) det << "; mismatch: " << p;
    r.detail = det.str();
  });
}

// --- metrics --------------------------------------------------------------------------------

SuiteResult metric_oracle_suite(std::size_t pairs, std::uint64_t seed) {
  return timed("metric_oracle", [&](SuiteResult& r) {
    Rng rng(seed);
    std::size_t mismatches = 0;
    auto same = [](const Metrics& a, const Metrics& b) {
      return a.iou == b.iou && a.f1 == b.f1 && a.recall == b.recall && a.precision == b.precision;
    };
    for (std::size_t i = 0; i < pairs; ++i) {
      Mask p(64, 64), l(64, 64);
      const double dp = i % 10 == 0 ? 0.0 : rng.uniform(), dl = i % 10 == 1 ? 0.0 : rng.uniform();
      for (auto& v : p.values) v = rng.coin(dp) ? 1 : 0;
      for (auto& v : l.values) v = rng.coin(dl) ? 1 : 0;
      const auto got = confusion(p, l);
      const auto want = oracle::confusion(p, l);
      if (!(got == want) || !same(compute_metrics(got), oracle::metrics(want))) ++mismatches;
    }
    // Degenerate conventions and hand counts.
    std::size_t conv_fail = 0;
    const Metrics empty = compute_metrics({0, 0, 0, 64});
    if (!(empty.iou == 1 && empty.f1 == 1 && empty.recall == 1 && empty.precision == 1)) ++conv_fail;
    const Metrics missed = compute_metrics({0, 0, 5, 10});
    if (!(missed.iou == 0 && missed.f1 == 0 && missed.recall == 0 && missed.precision == 0)) ++conv_fail;
    const Metrics spurious = compute_metrics({0, 5, 0, 10});
    if (!(spurious.iou == 0 && spurious.f1 == 0 && spurious.recall == 0 && spurious.precision == 0)) ++conv_fail;
    const Metrics third = compute_metrics({1, 1, 1, 0});
    if (!(std::abs(third.iou - 1.0 / 3) < 1e-15 && third.precision == 0.5 && third.recall == 0.5 && third.f1 == 0.5)) {
      ++conv_fail;
    }
    Mask a(2, 2), b(2, 2);
    a.at(0, 0) = 1;
    b.at(0, 0) = b.at(1, 0) = 1;
    if (!(confusion(a, b) == ConfusionCounts{1, 0, 1, 2})) ++conv_fail;
    r.passed = mismatches == 0 && conv_fail == 0;
    r.detail = std::to_string(pairs) + " random 64x64 pairs, " + std::to_string(mismatches) +
               " mismatches; degenerate and hand-count cases " + (conv_fail ? "FAILED" : "hold");
  });
}

// --- generator ------------------------------------------------------------------------------

bool GeneratorAudit::ok() const {
  return soundness_violations == 0 && consistency_violations == 0 && completeness_violations == 0 &&
         count_violations == 0 && label_mismatches == 0 && stats_mismatches == 0 && all_pairs == expected_all_pairs &&
         replay_identical;
}

namespace {

std::vector<std::pair<std::string, std::string>> read_tree(const std::filesystem::path& root) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files.emplace_back(std::filesystem::relative(e.path(), root).string(),
                       std::string(std::istreambuf_iterator<char>(in), {}));
  }
  std::sort(files.begin(), files.end());
  return files;
}

void note(GeneratorAudit& a, const std::string& what) {
  if (a.first_problem.empty()) a.first_problem = what;
}

void audit_sample(GeneratorAudit& a, const GeneratorConfig& cfg, const std::filesystem::path& root,
                  const ManifestRecord& rec, const GeneratedSample& s) {
  const SamplePair& pre = s.before_affine;
  const SamplePair& post = s.pair;
  const SampleMeta& meta = post.meta;
  const std::size_t n_px = post.label.values.size();
  ++a.pairs;
  if (meta.is_all) {
    ++a.all_pairs;
    const std::size_t removed = meta.change_ids.size();
    a.min_all_removals = a.min_all_removals ? std::min(a.min_all_removals, removed) : removed;
    a.max_all_removals = std::max(a.max_all_removals, removed);
    if (removed < 5 || removed > 10 || !meta.red_herring_ids.empty() || !rec.classes.empty()) {
      ++a.count_violations;
      note(a, rec.id + ": all-pair counts");
    }
    for (const auto& obj : meta.removed) {
      if (!obj.survived) continue;
      for (std::size_t i = 0; i < n_px; ++i) {
        if (obj.mask.values[i] && !post.label.values[i]) {
          ++a.completeness_violations;
          note(a, rec.id + ": all-pair object missing from label");
          break;
        }
      }
    }
  } else {
    const std::size_t k = rec.classes.size();
    a.min_prompt_classes = a.min_prompt_classes ? std::min(a.min_prompt_classes, k) : k;
    a.max_prompt_classes = std::max(a.max_prompt_classes, k);
    a.max_changes = std::max(a.max_changes, meta.change_ids.size());
    a.max_herrings = std::max(a.max_herrings, meta.red_herring_ids.size());
    if (k < 1 || k > 5 || meta.change_ids.size() > 10 || meta.red_herring_ids.size() > 10) {
      ++a.count_violations;
      note(a, rec.id + ": count bounds");
    }
    for (const auto& c : rec.classes) {
      if (rec.prompt.find(c) == std::string::npos) {
        ++a.consistency_violations;
        note(a, rec.id + ": prompt does not name " + c);
      }
    }
    // Red herrings, in the unwarped pair and in the label frame.
    for (const auto& obj : pre.meta.removed) {
      if (obj.role != RemovalRole::red_herring) continue;
      for (std::size_t i = 0; i < n_px; ++i) {
        if (!obj.mask.values[i]) continue;
        ++a.herring_pixels;
        const bool differs = pre.image_a.pixels[3 * i] != pre.image_b.pixels[3 * i] ||
                             pre.image_a.pixels[3 * i + 1] != pre.image_b.pixels[3 * i + 1] ||
                             pre.image_a.pixels[3 * i + 2] != pre.image_b.pixels[3 * i + 2];
        if (!differs || pre.label.values[i]) {
          ++a.soundness_violations;
          note(a, rec.id + ": red-herring pixel unchanged or labelled");
        }
      }
    }
    for (const auto& obj : meta.removed) {
      if (obj.role != RemovalRole::red_herring) continue;
      for (std::size_t i = 0; i < n_px; ++i) {
        if (obj.mask.values[i] && post.label.values[i]) {
          ++a.soundness_violations;
          note(a, rec.id + ": warped red herring labelled");
        }
      }
    }
    // Every positive pixel must come from a surviving object of a prompt class.
    for (std::size_t i = 0; i < n_px; ++i) {
      if (!post.label.values[i]) continue;
      bool explained = false;
      for (const auto& obj : meta.removed) {
        if (obj.survived && obj.mask.values[i] && obj.role == RemovalRole::change &&
            std::find(rec.classes.begin(), rec.classes.end(), obj.class_name) != rec.classes.end()) {
          explained = true;
          break;
        }
      }
      if (!explained) {
        ++a.consistency_violations;
        note(a, rec.id + ": label pixel without a prompt-class object");
      }
    }
  }
  const Mask expected = meta.affine_applied ? oracle::pruned_label(pre, meta.affine, cfg.tau_vis)
                                            : oracle::pruned_label(pre, AffineParams::identity(), 0.0);
  const Mask on_disk = read_png_mask(root / rec.label);
  if (!(expected == post.label) || !(on_disk == post.label)) {
    ++a.label_mismatches;
    note(a, rec.id + ": label differs from oracle recomputation");
  }
}

}  // namespace

GeneratorAudit audit_generator(std::size_t n_pairs, double all_fraction, std::uint64_t seed,
                               const std::filesystem::path& dir, bool replay, const GeneratorConfig& config) {
  GeneratorAudit audit;
  DatasetOptions opts;
  opts.n_pairs = n_pairs;
  opts.all_fraction = all_fraction;
  opts.seed = seed;
  opts.generator = config;
  const auto primary = dir / "primary";
  std::filesystem::remove_all(primary);
  const auto manifest = generate_dataset(opts, primary, [&](const ManifestRecord& r, const GeneratedSample& s) {
    audit_sample(audit, config, primary, r, s);
  });
  audit.expected_all_pairs = all_pair_count(n_pairs, all_fraction);

  // Stats report against a scan of the manifest on disk.
  const auto reread = read_manifest(primary);
  std::set<std::string> classes, prompts;
  std::size_t all_pairs = 0;
  for (const auto& r : reread.records) {
    classes.insert(r.classes.begin(), r.classes.end());
    prompts.insert(r.prompt);
    all_pairs += r.is_all;
  }
  std::ifstream stats_in(primary / kStatsFile);
  const auto stats = nlohmann::json::parse(stats_in);
  if (stats.at("unique_classes").get<std::size_t>() != classes.size() ||
      stats.at("unique_prompts").get<std::size_t>() != prompts.size() ||
      stats.at("all_pairs").get<std::size_t>() != all_pairs || stats.at("pairs").get<std::size_t>() != n_pairs ||
      !(reread.records == manifest.records)) {
    ++audit.stats_mismatches;
    note(audit, "stats report disagrees with manifest scan");
  }

  if (replay) {
    const auto second = dir / "replay";
    std::filesystem::remove_all(second);
    generate_dataset(opts, second);
    audit.replay_identical = read_tree(primary) == read_tree(second);
    if (!audit.replay_identical) note(audit, "replay produced different bytes");
    std::filesystem::remove_all(second);
  }
  return audit;
}

SuiteResult generator_suite(std::size_t n_pairs, std::uint64_t seed, const std::filesystem::path& dir, bool replay) {
  return timed("generator_invariants", [&](SuiteResult& r) {
    const GeneratorAudit a = audit_generator(n_pairs, 0.12, seed, dir, replay);
    r.passed = a.ok();
    std::ostringstream d;
    d << a.pairs << " pairs; red-herring violations " << a.soundness_violations << " over " << a.herring_pixels
      << " px; prompt-label violations " << a.consistency_violations << "; all-pair completeness violations "
      << a.completeness_violations << "; count violations " << a.count_violations << " (changes <= "
      << a.max_changes << ", herrings <= " << a.max_herrings << ", all removals " << a.min_all_removals << ".."
      << a.max_all_removals << ", prompt classes " << a.min_prompt_classes << ".." << a.max_prompt_classes
      << "); all pairs " << a.all_pairs << "/" << a.expected_all_pairs << "; label oracle mismatches "
      << a.label_mismatches << "; stats mismatches " << a.stats_mismatches;
    if (replay) d << "; replay " << (a.replay_identical ? "byte-identical" : "DIFFERS");
    if (!a.first_problem.empty()) d << "; first problem: " << a.first_problem;
    r.detail = d.str();
  });
}

SuiteResult occlusion_suite(std::size_t pairs, std::uint64_t seed) {
  return timed("occlusion_pruning", [&](SuiteResult& r) {
    GeneratorConfig mild;
    mild.affine = true;
    GeneratorConfig harsh = mild;
    harsh.max_rotation_deg = 30;
    harsh.max_translation = 0.45;
    harsh.min_scale = 0.7;
    harsh.max_scale = 1.3;
    const PromptBanks banks = PromptBanks::from_config(mild);
    ClassBalanceLedger ledger;
    std::size_t mismatches = 0, pruned = 0, kept = 0, b_side = 0;
    for (std::size_t i = 0; i < pairs; ++i) {
      const GeneratorConfig& cfg = i % 2 ? harsh : mild;
      const ProceduralSceneBackend backend(cfg);
      const auto s = generate_sample(derive_seed(seed, i), i % 5 == 0, ledger, cfg, banks, backend);
      const auto& meta = s.pair.meta;
      b_side += meta.affine.applied_to_b;
      for (const auto& obj : meta.removed) (obj.survived ? kept : pruned) += 1;
      if (!(s.pair.label == oracle::pruned_label(s.before_affine, meta.affine, cfg.tau_vis))) ++mismatches;
    }
    r.passed = mismatches == 0;
    r.detail = std::to_string(pairs) + " perturbed pairs (" + std::to_string(b_side) + " warped on B), " +
               std::to_string(pruned) + " objects pruned, " + std::to_string(kept) + " kept; " +
               std::to_string(mismatches) + " labels differ from the per-object oracle";
  });
}

// --- schedule and optimizer -------------------------------------------------------------------

SuiteResult schedule_optimizer_suite(std::uint64_t seed) {
  return timed("schedule_optimizer", [&](SuiteResult& r) {
    std::vector<std::string> problems;
    auto closed = [](std::size_t step, std::size_t warm, std::size_t total, double lr0) {
      if (step < warm) return lr0 * (static_cast<double>(step) + 1.0) / static_cast<double>(warm);
      const double t = static_cast<double>(step - warm) / static_cast<double>(total - warm);
      return lr0 / 2.0 * (1.0 + std::cos(t * std::numbers::pi));
    };
    Rng rng(seed);
    double worst = 0.0;
    std::size_t checked = 0;
    for (int trial = 0; trial < 5; ++trial) {
      const auto total = as_size(rng.uniform_int(10, 100000));
      const auto warm = as_size(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
      const double lr0 = trial == 0 ? 2e-5 : rng.uniform(1e-6, 1.0);
      std::vector<std::size_t> steps{0, total, warm};
      if (warm > 0) steps.push_back(warm - 1);
      for (int i = 0; i < 100; ++i) steps.push_back(as_size(rng.uniform_int(0, static_cast<std::int64_t>(total))));
      for (std::size_t s : steps) {
        worst = std::max(worst, std::abs(lr_schedule(s, warm, total, lr0) - closed(s, warm, total, lr0)));
        ++checked;
      }
      if (lr_schedule(total, warm, total, lr0) != 0.0) problems.push_back("lr(total) != 0");
      if (std::abs(lr_schedule(warm, warm, total, lr0) - lr0) > 1e-12) problems.push_back("lr(warmup) != lr0");
      double prev = INFINITY;
      for (std::size_t s = warm; s <= total; s += std::max<std::size_t>(1, (total - warm) / 500)) {
        const double lr = lr_schedule(s, warm, total, lr0);
        if (lr > prev) problems.push_back("increase after warmup");
        prev = lr;
      }
    }
    if (std::abs(lr_schedule(49, 100, 1000, 2e-5) - 1.0e-5) > 1e-12) problems.push_back("warmup example");
    if (worst > 1e-12) problems.push_back("closed form");

    // Adam identities.
    auto make = [&](std::size_t n) {
      std::vector<double> v(n);
      for (double& x : v) x = rng.normal();
      return Tensor<double>::from({n}, v, true);
    };
    std::vector<Tensor<double>> params{make(17), make(5)};
    std::vector<std::vector<double>> before;
    for (auto& p : params) {
      p.zero_grad();
      before.emplace_back(p.data().begin(), p.data().end());
    }
    OptimizerState<double> st;
    for (int i = 0; i < 10; ++i) adam_step(params, st, 1e-3, 0.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!std::equal(before[i].begin(), before[i].end(), params[i].data().begin())) {
        problems.push_back("zero-grad fixed point");
      }
    }
    const double lr = 3e-3, wd = 0.05;
    for (int i = 0; i < 5; ++i) {
      std::vector<std::vector<double>> prev;
      for (auto& p : params) prev.emplace_back(p.data().begin(), p.data().end());
      adam_step(params, st, lr, wd);
      for (std::size_t k = 0; k < params.size(); ++k) {
        for (std::size_t j = 0; j < prev[k].size(); ++j) {
          if (params[k].data()[j] != prev[k][j] * (1.0 - lr * wd)) {
            problems.push_back("weight-decay shrink");
            k = params.size();
            break;
          }
        }
      }
    }
    // First step with a constant gradient moves by lr * g / (|g| + eps).
    auto p = Tensor<double>::from({3}, {0.5, -1.0, 2.0}, true);
    std::vector<Tensor<double>> one{p};
    auto loss = ops::sum(ops::scale(p, 0.25));
    loss.backward();
    OptimizerState<double> fresh;
    adam_step(one, fresh, 1e-2, 0.0);
    const double expected_step = 1e-2 * 0.25 / (0.25 + 1e-8);
    const std::array<double, 3> start{0.5, -1.0, 2.0};
    for (std::size_t j = 0; j < 3; ++j) {
      if (std::abs((start[j] - p.data()[j]) - expected_step) > 1e-12) problems.push_back("first-step formula");
    }
    r.passed = problems.empty();
    std::ostringstream d;
    d << checked << " schedule points, max |lr - closed form| " << fmt("%.1e", worst)
      << "; Adam zero-grad fixed point, decoupled shrink factor and first-step formula checked";
    for (const auto& pr : problems) d << "; FAILED " << pr;
    r.detail = d.str();
  });
}

// --- driver --------------------------------------------------------------------------------------

std::vector<SuiteResult> run_all(const VerifyOptions& options) {
  std::vector<SuiteResult> out;
  out.push_back(grad_check_suite(options.grad));
  out.push_back(op_oracle_suite());
  out.push_back(sequence_layout_suite());
  out.push_back(metric_oracle_suite());
  out.push_back(generator_suite(options.generator_pairs, 4, options.scratch_dir / "generator"));
  out.push_back(occlusion_suite(options.occlusion_pairs));
  out.push_back(schedule_optimizer_suite());
  return out;
}

std::string format_line(const SuiteResult& r) {
  char head[96];
  std::snprintf(head, sizeof(head), "%s  %-22s %7.2fs  ", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds);
  return head + r.detail;
}

}  // namespace viewdelta::verify
