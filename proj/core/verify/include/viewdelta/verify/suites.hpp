#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "viewdelta/scenegen.hpp"
#include "viewdelta/train.hpp"

/// Self-checks run by `viewdelta verify` and the acceptance binary.
namespace viewdelta::verify {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// grad_check on the SQT, no-SQT and patch-embedding tiny configs.
SuiteResult grad_check_suite(const GradCheckOptions& options = {});

/// Kernels against loop oracles on `shapes` random shapes per op, plus the
/// conv / transposed-conv adjoint identity. 64-bit.
SuiteResult op_oracle_suite(std::size_t shapes = 20, std::uint64_t seed = 1, double tolerance = 1e-10);

/// Instrumented forward: segment order, sequence length and SQT slice.
SuiteResult sequence_layout_suite(std::uint64_t seed = 2);

/// confusion + compute_metrics against nested loops on random masks, plus
/// the degenerate conventions.
SuiteResult metric_oracle_suite(std::size_t pairs = 100, std::uint64_t seed = 3);

struct GeneratorAudit {
  std::size_t pairs = 0;
  std::size_t all_pairs = 0;
  std::size_t expected_all_pairs = 0;
  std::size_t herring_pixels = 0;
  std::size_t soundness_violations = 0;
  std::size_t consistency_violations = 0;
  std::size_t completeness_violations = 0;
  std::size_t count_violations = 0;
  std::size_t label_mismatches = 0;
  std::size_t stats_mismatches = 0;
  std::size_t max_changes = 0;
  std::size_t max_herrings = 0;
  std::size_t min_all_removals = 0;
  std::size_t max_all_removals = 0;
  std::size_t min_prompt_classes = 0;
  std::size_t max_prompt_classes = 0;
  bool replay_identical = true;
  std::string first_problem;

  bool ok() const;
};

/// Generates n pairs into dir (and again into dir/replay when `replay`),
/// checking every sample as it is produced.
GeneratorAudit audit_generator(std::size_t n_pairs, double all_fraction, std::uint64_t seed,
                               const std::filesystem::path& dir, bool replay,
                               const GeneratorConfig& config = {});

SuiteResult generator_suite(std::size_t n_pairs, std::uint64_t seed, const std::filesystem::path& dir,
                            bool replay = true);

/// Post-affine labels against the per-object warp-and-threshold oracle.
SuiteResult occlusion_suite(std::size_t pairs = 500, std::uint64_t seed = 5);

/// lr_schedule closed form and Adam fixed-point / shrink identities.
SuiteResult schedule_optimizer_suite(std::uint64_t seed = 6);

struct VerifyOptions {
  std::filesystem::path scratch_dir;
  std::size_t generator_pairs = 200;
  std::size_t occlusion_pairs = 100;
  GradCheckOptions grad;
};

std::vector<SuiteResult> run_all(const VerifyOptions& options);

std::string format_line(const SuiteResult& result);

}  // namespace viewdelta::verify
