#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "viewdelta/image.hpp"
#include "viewdelta/metrics.hpp"
#include "viewdelta/model.hpp"
#include "viewdelta/scenegen.hpp"
#include "viewdelta/tensor.hpp"

namespace viewdelta {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean stable BCE with logits: max(z,0) - z*y + log(1 + exp(-|z|)).
/// logits [1, h, w] (or any shape with h*w elements), label h x w.
template <typename Real>
Tensor<Real> bce_loss(const Tensor<Real>& logits, const Mask& label);

/// 1 - (2 sum(p y) + 1) / (sum(p) + sum(y) + 1) with p = sigmoid(z).
template <typename Real>
Tensor<Real> dice_loss(const Tensor<Real>& logits, const Mask& label);

/// Label as a {0,1} tensor shaped [1, h, w].
template <typename Real>
Tensor<Real> label_tensor(const Mask& label);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled (AdamW) when true; otherwise wd * theta is added to the gradient.
  bool decoupled = true;
  friend bool operator==(const AdamHyper&, const AdamHyper&) = default;
};

template <typename Real>
struct OptimizerState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::uint64_t step = 0;
  AdamHyper hyper;
};

/// One Adam update over `params` (handles share storage with the model).
/// Throws TrainingError if a parameter has no gradient buffer.
template <typename Real>
void adam_step(std::vector<Tensor<Real>>& params, OptimizerState<Real>& state, double lr, double weight_decay);

template <typename Real>
void adam_step(ModelParams<Real>& params, OptimizerState<Real>& state, double lr, double weight_decay);

/// Linear warmup lr0 (step+1)/warmup, then cosine decay to 0 at total.
double lr_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double lr0);

struct TrainConfig {
  double lr0 = 2e-5;
  double weight_decay = 0.01;
  AdamHyper adam;
  /// Effective batch; gradients are accumulated over this many samples.
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  /// Caps the run when nonzero.
  std::size_t max_steps = 0;
  /// -1 means one epoch.
  long long warmup_steps = -1;
  std::uint64_t seed = 0;       // parameter init
  std::uint64_t data_seed = 0;  // shuffling
  double dice_weight = 0.0;
  std::size_t checkpoint_every = 0;
  /// Manifest split used for training: "train", "test" or "all".
  std::string split = "train";

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

std::string to_json(const TrainConfig& config);
TrainConfig train_config_from_json(std::string_view json);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double iou_estimate = 0.0;
};

/// One preprocessed training example.
template <typename Real>
struct TrainExample {
  ModelInput<Real> input;
  Mask label;
  std::string id;
  std::size_t source = 0;  // index of the manifest it came from
};

template <typename Real>
std::vector<TrainExample<Real>> load_examples(const std::vector<DatasetManifest>& manifests,
                                              const ViewDeltaModel<Real>& model, const std::string& split);

template <typename Real>
struct TrainResult {
  ViewDeltaModel<Real> model;
  std::vector<StepRecord> curve;
  std::vector<std::size_t> samples_per_source;
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;
  std::optional<std::filesystem::path> checkpoint;
};

struct TrainOutputs {
  /// Checkpoints and metrics.jsonl go here when set.
  std::optional<std::filesystem::path> out_dir;
  /// Progress lines, one per `progress_every` steps.
  std::ostream* progress = nullptr;
  std::size_t progress_every = 100;
};

template <typename Real>
TrainResult<Real> train(const std::vector<TrainExample<Real>>& examples, std::size_t n_sources,
                        const ModelConfig& model_config, const TrainConfig& config, const TrainOutputs& outputs = {});

template <typename Real>
TrainResult<Real> train(const std::vector<DatasetManifest>& manifests, const ModelConfig& model_config,
                        const TrainConfig& config, const TrainOutputs& outputs = {});

/// Evaluation predictor backed by a model.
template <typename Real>
class ModelPredictor : public Predictor {
 public:
  explicit ModelPredictor(const ViewDeltaModel<Real>& model) : model_(model) {}
  Mask predict(const EvalItem& item) override;
  double threshold() const override { return model_.config().threshold; }

 private:
  const ViewDeltaModel<Real>& model_;
};

template <typename Real>
Mask predict_mask(const ViewDeltaModel<Real>& model, const RgbImage& a, const RgbImage& b, std::string_view prompt);

// --- gradient check ---------------------------------------------------------------

struct ParamGradError {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::string config_name;
  double tolerance = 1e-3;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<ParamGradError> params;
  std::vector<std::string> failing;
  bool passed = true;
};

struct GradCheckOptions {
  double tolerance = 1e-3;
  double step = 1e-5;
  /// Denominator floor for relative error, so entries that are zero up to
  /// finite-difference noise do not dominate.
  double rel_floor = 1e-6;
  std::uint64_t seed = 0;
};

/// Analytic vs central-difference gradient of the BCE loss for every scalar
/// of every parameter, in 64-bit precision.
GradCheckReport grad_check(const ModelConfig& config, const GradCheckOptions& options = {},
                           std::string config_name = "");

std::string to_text(const GradCheckReport& report);

}  // namespace viewdelta
