#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "viewdelta/embedders.hpp"
#include "viewdelta/image.hpp"
#include "viewdelta/tensor.hpp"

namespace viewdelta {

/// Invalid configuration; the message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct ModelConfig {
  std::size_t image_side = 64;
  std::size_t patch = 8;
  std::size_t d_text = 64;
  std::size_t d_img = 64;
  std::size_t d_model = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t mlp_dim = 512;
  std::size_t n_sqt = 64;
  std::size_t t_max = 16;
  std::size_t head_channels = 32;
  bool use_frozen_image_embedder = true;
  bool use_sqt = true;
  bool use_prompts = true;
  /// Probability above which a pixel is marked changed.
  double threshold = 0.5;

  /// Patch grid side g = image_side / patch.
  std::size_t grid() const { return image_side / patch; }
  std::size_t text_len() const { return use_prompts ? t_max : 0; }
  std::size_t sqt_len() const { return use_sqt ? n_sqt : 0; }
  /// Full token count L = 2 g^2 + t_max + n_sqt (minus disabled segments).
  std::size_t seq_len() const { return 2 * grid() * grid() + text_len() + sqt_len(); }
  /// Bilinear factor of the segmentation head.
  std::size_t upsample_factor() const { return image_side / (2 * grid()); }

  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  /// Tiny geometry used by gradient checks: 16 px images, 4x4 grid.
  static ModelConfig tiny();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(std::string_view json);

/// Where each modality lives in the assembled sequence. Absent segments have
/// length zero.
struct SegmentLayout {
  std::size_t image_a_begin = 0, image_a_len = 0;
  std::size_t image_b_begin = 0, image_b_len = 0;
  std::size_t text_begin = 0, text_len = 0;
  std::size_t sqt_begin = 0, sqt_len = 0;
  std::size_t length = 0;

  static SegmentLayout of(const ModelConfig& config);
};

/// Ordered, named learnable tensors. Order is fixed by the config.
template <typename Real>
class ModelParams {
 public:
  using Entry = std::pair<std::string, Tensor<Real>>;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  const Tensor<Real>& at(std::string_view name) const;
  Tensor<Real>& at(std::string_view name);
  bool contains(std::string_view name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  void add(std::string name, Tensor<Real> t) { entries_.emplace_back(std::move(name), std::move(t)); }
  std::vector<Entry> entries_;
};

/// Per-sample model input after the frozen embedders. For the trainable
/// patch-embedding variant the images hold raw planar pixels [3, h, w].
template <typename Real>
struct ModelInput {
  Tensor<Real> image_a;
  Tensor<Real> image_b;
  Tensor<Real> text;  // undefined when prompts are disabled
};

/// Assembled token matrix [L, d_model] plus its segment layout.
template <typename Real>
struct TokenSequence {
  Tensor<Real> tokens;
  SegmentLayout layout;
};

/// Intermediate values captured by an instrumented forward pass.
template <typename Real>
struct ForwardTrace {
  SegmentLayout layout;
  Tensor<Real> concatenated;   // [Ia | Ib | T | SQT] after projection, before position
  Tensor<Real> assembled;      // after position + token MLP
  Tensor<Real> backbone_out;   // after the transformer
  Tensor<Real> head_input;     // [c, g, g] grid fed to the segmentation head
};

/// Text-conditioned change segmentation network.
///
///   Ia, Ib <- frozen image embedder; T <- frozen text embedder
///   X <- Concat(Ia, Ib, T, SQT) + position; X <- MLP(X); X <- ViT(X)
///   logits <- head(X[-n_sqt:])
///
/// Ablations: use_sqt = false feeds the head from the two image segments,
/// use_prompts = false drops the text segment, use_frozen_image_embedder =
/// false embeds raw patches with a trainable projection.
template <typename Real>
class ViewDeltaModel {
 public:
  ViewDeltaModel(ModelConfig config, std::uint64_t seed);
  ViewDeltaModel(ModelConfig config, ModelParams<Real> params);

  const ModelConfig& config() const { return config_; }
  const ModelParams<Real>& params() const { return params_; }
  ModelParams<Real>& params() { return params_; }

  /// Runs the frozen embedders (or raw patch extraction) for one sample.
  ModelInput<Real> prepare(const RgbImage& image_a, const RgbImage& image_b,
                           std::string_view prompt) const;

  TokenSequence<Real> assemble_sequence(const ModelInput<Real>& input,
                                        ForwardTrace<Real>* trace = nullptr) const;

  /// Logits [1, image_side, image_side]; dispatches on the variant flags.
  Tensor<Real> forward(const ModelInput<Real>& input, ForwardTrace<Real>* trace = nullptr) const;
  /// use_sqt = false variant; throws ConfigError otherwise.
  Tensor<Real> forward_no_sqt(const ModelInput<Real>& input, ForwardTrace<Real>* trace = nullptr) const;
  /// use_frozen_image_embedder = false variant; throws ConfigError otherwise.
  Tensor<Real> forward_patch_embed(const ModelInput<Real>& input,
                                   ForwardTrace<Real>* trace = nullptr) const;

  /// conv3x3+ReLU -> convT2x2/s2+ReLU -> conv3x3+ReLU -> bilinear xf -> conv1x1.
  Tensor<Real> seg_head(const Tensor<Real>& grid) const;

  /// Binary mask from logits at the configured probability threshold.
  Mask binarize(const Tensor<Real>& logits) const;

 private:
  Tensor<Real> embed_images(const Tensor<Real>& image) const;
  Tensor<Real> backbone(const Tensor<Real>& x) const;
  Tensor<Real> grid_from_tokens(const Tensor<Real>& tokens) const;
  Tensor<Real> run(const ModelInput<Real>& input, ForwardTrace<Real>* trace) const;

  ModelConfig config_;
  ModelParams<Real> params_;
};

/// Raw planar pixels grouped by patch: [g*g, 3*patch*patch], row-major grid,
/// channel-major within a patch.
template <typename Real>
Tensor<Real> patchify(const Tensor<Real>& planar, std::size_t patch);

// --- checkpoints -------------------------------------------------------------

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::string dtype;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One JSON header line (config, parameter name -> shape/offset, seed, step)
/// followed by raw little-endian parameter data. Written to a temporary file
/// and renamed into place.
template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const ViewDeltaModel<Real>& model,
                     std::uint64_t seed, std::uint64_t step);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Loads parameters, validating every shape against the stored config.
/// Values are converted if the file's dtype differs from Real.
template <typename Real>
ViewDeltaModel<Real> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

}  // namespace viewdelta
