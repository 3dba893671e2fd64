#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "viewdelta/engine.hpp"
#include "viewdelta/metrics.hpp"
#include "viewdelta/model.hpp"
#include "viewdelta/scenegen.hpp"
#include "viewdelta/train.hpp"

namespace viewdelta::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2, kVerification = 3 };

struct DatasetSection {
  std::size_t n_pairs = 100;
  double all_fraction = 0.12;
  double split_ratio = 0.9;
  std::uint64_t seed = 0;
};

struct EvalSection {
  std::string protocol = "native";
  std::string fixed_prompt;
  std::vector<std::string> classes;
  std::string split = "test";
  std::string empty_policy = "score_one";
  bool overlays = false;
};

struct VerifySection {
  std::size_t generator_pairs = 200;
  std::size_t occlusion_pairs = 100;
  double tolerance = 1e-3;
  std::string inject_fault;
};

struct PathsSection {
  std::vector<std::string> data;
  std::string out;
  std::string checkpoint;
};

/// Everything one subcommand run depends on. Serialized as JSON with one
/// object per section; absent sections keep their defaults.
struct RunConfig {
  Precision precision = Precision::f32;
  ModelConfig model;
  TrainConfig train;
  GeneratorConfig generator;
  DatasetSection dataset;
  EvalSection eval;
  VerifySection verify;
  PathsSection paths;

  /// Throws ConfigError naming the first bad field.
  void validate() const;
  DatasetOptions dataset_options() const;
  EvalOptions eval_options() const;
};

/// Unknown sections or keys are rejected with a ConfigError naming them.
RunConfig run_config_from_json(std::string_view text, const RunConfig& base = {});
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = {});
std::string to_json(const RunConfig& config);

/// Writes resolved_config.json into dir.
std::filesystem::path write_resolved(const RunConfig& config, const std::filesystem::path& dir);

EmptyPairPolicy parse_empty_policy(const std::string& text);

}  // namespace viewdelta::cli
