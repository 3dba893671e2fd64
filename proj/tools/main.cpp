// viewdelta: dataset generation, training, evaluation, prediction and
// self-verification for the text-conditioned change detector.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "run_config.hpp"
#include "viewdelta/verify/suites.hpp"

namespace fs = std::filesystem;
using namespace viewdelta;
using namespace viewdelta::cli;

namespace {

// Flag values; unset optionals leave the config file (or default) alone.
struct Flags {
  std::string config;
  std::optional<std::string> precision;

  // gen
  std::optional<std::size_t> n;
  std::optional<double> all_fraction, split_ratio;
  std::optional<std::uint64_t> gen_seed;
  bool no_affine = false, no_red_herrings = false;

  // train
  std::vector<std::string> data;
  std::optional<std::size_t> steps, epochs, batch, checkpoint_every, progress_every;
  std::optional<double> lr, wd, dice;
  std::optional<long long> warmup;
  std::optional<std::uint64_t> seed, data_seed;
  std::optional<std::string> split;
  bool no_sqt = false, no_prompts = false, patch_embed = false;

  // eval / predict
  std::optional<std::string> checkpoint, protocol, prompt, empty_policy, eval_split;
  std::vector<std::string> classes;
  bool overlays = false;
  std::string image_a, image_b;

  // verify
  std::optional<std::size_t> generator_pairs, occlusion_pairs;
  std::optional<double> tolerance;
  std::optional<std::string> inject_fault;
  std::vector<std::string> suites;

  std::optional<std::string> out;
};

template <typename T>
void set_if(const std::optional<T>& v, T& field) {
  if (v) field = *v;
}

RunConfig resolve(const Flags& f) {
  RunConfig base;
  base.precision = precision_from_env();
  RunConfig c = f.config.empty() ? base : load_run_config(f.config, base);
  if (f.precision) {
    try {
      c.precision = parse_precision(*f.precision);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("precision", e.what());
    }
  }
  set_if(f.n, c.dataset.n_pairs);
  set_if(f.all_fraction, c.dataset.all_fraction);
  set_if(f.split_ratio, c.dataset.split_ratio);
  set_if(f.gen_seed, c.dataset.seed);
  if (f.no_affine) c.generator.affine = false;
  if (f.no_red_herrings) c.generator.red_herrings = false;

  if (!f.data.empty()) c.paths.data = f.data;
  set_if(f.steps, c.train.max_steps);
  set_if(f.epochs, c.train.epochs);
  set_if(f.batch, c.train.batch_size);
  set_if(f.checkpoint_every, c.train.checkpoint_every);
  set_if(f.lr, c.train.lr0);
  set_if(f.wd, c.train.weight_decay);
  set_if(f.dice, c.train.dice_weight);
  set_if(f.warmup, c.train.warmup_steps);
  set_if(f.seed, c.train.seed);
  set_if(f.data_seed, c.train.data_seed);
  set_if(f.split, c.train.split);
  if (f.no_sqt) c.model.use_sqt = false;
  if (f.no_prompts) c.model.use_prompts = false;
  if (f.patch_embed) c.model.use_frozen_image_embedder = false;

  set_if(f.checkpoint, c.paths.checkpoint);
  set_if(f.protocol, c.eval.protocol);
  set_if(f.prompt, c.eval.fixed_prompt);
  set_if(f.empty_policy, c.eval.empty_policy);
  set_if(f.eval_split, c.eval.split);
  if (!f.classes.empty()) c.eval.classes = f.classes;
  if (f.overlays) c.eval.overlays = true;

  set_if(f.generator_pairs, c.verify.generator_pairs);
  set_if(f.occlusion_pairs, c.verify.occlusion_pairs);
  set_if(f.tolerance, c.verify.tolerance);
  set_if(f.inject_fault, c.verify.inject_fault);

  set_if(f.out, c.paths.out);
  c.validate();
  return c;
}

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw ConfigError(field, what);
}

std::vector<DatasetManifest> load_manifests(const RunConfig& c) {
  std::vector<DatasetManifest> out;
  for (const auto& d : c.paths.data) out.push_back(read_manifest(d));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// --- subcommands -----------------------------------------------------------------------

int cmd_gen(RunConfig c) {
  require(!c.paths.out.empty(), "paths.out", "gen needs --out");
  const fs::path out = c.paths.out;
  const auto manifest = generate_dataset(c.dataset_options(), out);
  write_resolved(c, out);
  const auto stats = compute_stats(manifest.records);
  std::cout << "generated " << stats.pairs << " pairs (" << stats.all_pairs << " all, " << stats.train_pairs
            << " train / " << stats.test_pairs << " test) in " << out.string() << "\n"
            << to_json(stats) << "\n";
  return kOk;
}

int cmd_train(RunConfig c, std::optional<std::size_t> progress_every) {
  require(!c.paths.data.empty(), "paths.data", "train needs at least one --data manifest");
  require(!c.paths.out.empty(), "paths.out", "train needs --out");
  const auto manifests = load_manifests(c);
  const fs::path out = c.paths.out;
  write_resolved(c, out);
  TrainOutputs outputs;
  outputs.out_dir = out;
  outputs.progress = &std::cout;
  if (progress_every) outputs.progress_every = *progress_every;
  return dispatch_precision(c.precision, [&]<typename Real>() {
    const auto result = train<Real>(manifests, c.model, c.train, outputs);
    const auto& last = result.curve.back();
    std::cout << "trained " << result.total_steps << " steps (warmup " << result.warmup_steps << "), final loss "
              << last.loss << ", iou estimate " << last.iou_estimate << "\n";
    for (std::size_t i = 0; i < result.samples_per_source.size(); ++i) {
      std::cout << "  " << c.paths.data[i] << ": " << result.samples_per_source[i] << " samples\n";
    }
    if (result.checkpoint) std::cout << "checkpoint " << result.checkpoint->string() << "\n";
    return int(kOk);
  });
}

int cmd_eval(RunConfig c) {
  require(c.paths.data.size() == 1, "paths.data", "eval needs exactly one --data manifest");
  require(!c.paths.checkpoint.empty(), "paths.checkpoint", "eval needs --checkpoint");
  const auto manifest = read_manifest(c.paths.data.front());
  CheckpointInfo info = read_checkpoint_info(c.paths.checkpoint);
  c.model = info.config;
  EvalOptions options = c.eval_options();
  const fs::path out = c.paths.out;
  if (!out.empty()) {
    write_resolved(c, out);
    if (c.eval.overlays) options.overlay_dir = out / "overlays";
  }
  const MetricReport report = dispatch_precision(c.precision, [&]<typename Real>() {
    const auto model = load_checkpoint<Real>(c.paths.checkpoint);
    ModelPredictor<Real> predictor(model);
    return evaluate(manifest, predictor, options);
  });
  if (!out.empty()) {
    write_text(out / "report.json", to_json(report) + "\n");
    write_text(out / "report.txt", to_text(report));
  }
  std::cout << to_text(report);
  return kOk;
}

int cmd_predict(RunConfig c, const Flags& f) {
  require(!c.paths.checkpoint.empty(), "paths.checkpoint", "predict needs --checkpoint");
  require(!c.paths.out.empty(), "paths.out", "predict needs --out");
  require(f.prompt.has_value(), "prompt", "predict needs --prompt");
  const RgbImage a = read_png_rgb(f.image_a);
  const RgbImage b = read_png_rgb(f.image_b);
  CheckpointInfo info = read_checkpoint_info(c.paths.checkpoint);
  c.model = info.config;
  const std::size_t side = info.config.image_side;
  if (a.width != side || a.height != side || b.width != side || b.height != side) {
    throw ConfigError("image", "inputs must be " + std::to_string(side) + "x" + std::to_string(side) + " pixels");
  }
  const fs::path out = c.paths.out;
  const Mask mask = dispatch_precision(c.precision, [&]<typename Real>() {
    const auto model = load_checkpoint<Real>(c.paths.checkpoint);
    return predict_mask(model, a, b, *f.prompt);
  });
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_png(out, mask);
  write_resolved(c, out.has_parent_path() ? out.parent_path() : fs::path("."));
  std::cout << "wrote " << out.string() << " (" << mask.count() << " changed pixels)\n";
  return kOk;
}

int cmd_verify(RunConfig c, const Flags& f) {
  engine_config().inject_fault = c.verify.inject_fault;
  const fs::path out = c.paths.out;
  const fs::path scratch = (out.empty() ? fs::temp_directory_path() / ("viewdelta-verify-" + std::to_string(getpid()))
                                        : out / "scratch");
  if (!out.empty()) write_resolved(c, out);
  auto wanted = [&](const std::string& name) {
    return f.suites.empty() || std::find(f.suites.begin(), f.suites.end(), name) != f.suites.end();
  };
  GradCheckOptions grad;
  grad.tolerance = c.verify.tolerance;
  std::vector<verify::SuiteResult> results;
  auto run = [&](const std::string& name, auto&& fn) {
    if (!wanted(name)) return;
    results.push_back(fn());
    std::cout << verify::format_line(results.back()) << std::endl;
  };
  // Gradient checks are defined in 64-bit regardless of the run precision.
  run("grad_check", [&] { return verify::grad_check_suite(grad); });
  run("op_oracles", [&] { return verify::op_oracle_suite(); });
  run("sequence_layout", [&] { return verify::sequence_layout_suite(); });
  run("metric_oracle", [&] { return verify::metric_oracle_suite(); });
  run("generator_invariants",
      [&] { return verify::generator_suite(c.verify.generator_pairs, c.dataset.seed, scratch / "generator"); });
  run("occlusion_pruning", [&] { return verify::occlusion_suite(c.verify.occlusion_pairs); });
  run("schedule_optimizer", [&] { return verify::schedule_optimizer_suite(); });
  std::error_code ec;
  fs::remove_all(scratch, ec);

  require(!results.empty(), "suite", "no suite matched");
  std::size_t failed = 0;
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  std::string text;
  for (const auto& r : results) {
    failed += !r.passed;
    j.push_back({{"suite", r.name}, {"passed", r.passed}, {"seconds", r.seconds}, {"detail", r.detail}});
    text += verify::format_line(r) + "\n";
  }
  std::cout << (failed ? "verification FAILED: " : "verification passed: ") << results.size() - failed << "/"
            << results.size() << " suites\n";
  if (!out.empty()) {
    write_text(out / "verify_report.json", j.dump(2) + "\n");
    write_text(out / "verify_report.txt", text);
  }
  return failed ? kVerification : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"viewdelta: text-conditioned scene change detection"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", f.config, "JSON run config; flags override it")->check(CLI::ExistingFile);
    sub->add_option("--precision", f.precision, "f32 or f64 (default $VIEWDELTA_PRECISION, else f32)");
  };
  auto model_flags = [&](CLI::App* sub) {
    sub->add_flag("--no-sqt", f.no_sqt, "Feed the head from the image tokens instead of query tokens");
    sub->add_flag("--no-prompts", f.no_prompts, "Drop the text segment");
    sub->add_flag("--patch-embed", f.patch_embed, "Trainable patch embedding instead of the frozen image embedder");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic change-pair dataset");
  common(gen);
  gen->add_option("--n", f.n, "Number of pairs");
  gen->add_option("--all-fraction", f.all_fraction, "Fraction of \"all\" pairs");
  gen->add_option("--split-ratio", f.split_ratio, "Train fraction");
  gen->add_option("--seed", f.gen_seed, "Dataset seed");
  gen->add_flag("--no-affine", f.no_affine, "Disable the affine perturbation");
  gen->add_flag("--no-red-herrings", f.no_red_herrings, "Disable red-herring removals");
  gen->add_option("-o,--out", f.out, "Output directory");

  auto* tr = app.add_subcommand("train", "Train a model on one or more manifests");
  common(tr);
  model_flags(tr);
  tr->add_option("-d,--data", f.data, "Dataset directory or manifest (repeatable)");
  tr->add_option("-o,--out", f.out, "Output directory");
  tr->add_option("--steps", f.steps, "Stop after this many optimizer steps");
  tr->add_option("--epochs", f.epochs, "Epochs");
  tr->add_option("--batch", f.batch, "Effective batch size");
  tr->add_option("--lr", f.lr, "Peak learning rate");
  tr->add_option("--wd", f.wd, "Weight decay");
  tr->add_option("--warmup", f.warmup, "Warmup steps (-1: one epoch)");
  tr->add_option("--dice", f.dice, "Dice loss weight");
  tr->add_option("--seed", f.seed, "Parameter init seed");
  tr->add_option("--data-seed", f.data_seed, "Shuffling seed");
  tr->add_option("--split", f.split, "Manifest split to train on (train, test, all)");
  tr->add_option("--progress-every", f.progress_every, "Progress line cadence in steps");
  tr->add_option("--checkpoint-every", f.checkpoint_every, "Checkpoint cadence in steps (0: final only)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  common(ev);
  ev->add_option("-d,--data", f.data, "Dataset directory or manifest");
  ev->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
  ev->add_option("--protocol", f.protocol, "native, per_class or fixed");
  ev->add_option("--prompt", f.prompt, "Prompt for the fixed protocol");
  ev->add_option("--classes", f.classes, "Classes for the per-class protocol");
  ev->add_option("--split", f.eval_split, "Split to evaluate (train, test, all)");
  ev->add_option("--empty-policy", f.empty_policy, "score_one or skip");
  ev->add_flag("--overlays", f.overlays, "Write prediction overlays");
  ev->add_option("-o,--out", f.out, "Report directory");

  auto* pr = app.add_subcommand("predict", "Predict a change mask for one image pair");
  common(pr);
  pr->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
  pr->add_option("-a,--image-a", f.image_a, "Image A (PNG)")->required()->check(CLI::ExistingFile);
  pr->add_option("-b,--image-b", f.image_b, "Image B (PNG)")->required()->check(CLI::ExistingFile);
  pr->add_option("-p,--prompt", f.prompt, "Text prompt");
  pr->add_option("-o,--out", f.out, "Output mask PNG");

  auto* vf = app.add_subcommand("verify", "Run gradient checks, oracle suites and generator audits");
  common(vf);
  vf->add_option("--generator-pairs", f.generator_pairs, "Pairs for the generator audit");
  vf->add_option("--occlusion-pairs", f.occlusion_pairs, "Pairs for the occlusion oracle");
  vf->add_option("--tolerance", f.tolerance, "grad_check relative tolerance");
  vf->add_option("--inject-fault", f.inject_fault, "Corrupt a backward rule: gelu, matmul or layer_norm");
  vf->add_option("--suite", f.suites, "Run only these suites (repeatable)");
  vf->add_option("-o,--out", f.out, "Report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  RunConfig config;
  try {
    config = resolve(f);
    set_engine_precision(config.precision);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen(config);
    if (tr->parsed()) return cmd_train(config, f.progress_every);
    if (ev->parsed()) return cmd_eval(config);
    if (pr->parsed()) return cmd_predict(config, f);
    return cmd_verify(config, f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
