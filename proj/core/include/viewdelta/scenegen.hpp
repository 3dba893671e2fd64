#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "viewdelta/image.hpp"
#include "viewdelta/rng.hpp"

namespace viewdelta {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { disk, rectangle, triangle, ring, blob };

std::string_view to_string(ShapeKind shape);

/// Fixed color x shape vocabulary, e.g. "red disk". 8 colors x 5 shapes.
const std::vector<std::string>& class_vocabulary();
bool in_vocabulary(std::string_view class_name);

struct Appearance {
  std::array<std::uint8_t, 3> color{};
  std::uint64_t texture_seed = 0;
};

struct ObjectInstance {
  std::uint32_t id = 0;
  std::string class_name;
  ShapeKind shape = ShapeKind::disk;
  Mask mask;  // visible region after later objects are drawn
  Appearance appearance;
};

struct BackgroundSpec {
  std::array<std::uint8_t, 3> base{};
  std::uint64_t noise_seed = 0;
  std::size_t cells = 4;
  double amplitude = 20.0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t side = 0;
  BackgroundSpec background;
  std::vector<ObjectInstance> objects;  // back to front

  const ObjectInstance& object(std::uint32_t id) const;
};

struct GeneratorConfig {
  std::size_t canvas = 64;
  std::size_t min_objects = 6;
  std::size_t max_objects = 14;
  double min_radius = 0.09;  // fraction of canvas side
  double max_radius = 0.2;
  std::size_t min_visible_pixels = 12;
  std::size_t placement_attempts = 40;

  std::size_t min_prompt_classes = 1;
  std::size_t max_prompt_classes = 5;
  std::size_t class_cap = 10;
  std::size_t min_changes = 1;
  std::size_t max_changes = 10;
  bool red_herrings = true;
  std::size_t max_red_herrings = 10;
  std::size_t all_min_removals = 5;
  std::size_t all_max_removals = 10;
  /// Inpainting artifact amplitude in 8-bit levels.
  int inpaint_noise = 2;

  double p_raw = 0.5;

  bool affine = true;
  double max_rotation_deg = 10.0;
  double max_translation = 0.1;  // fraction of side
  double min_scale = 0.9;
  double max_scale = 1.1;
  double tau_vis = 0.5;

  std::size_t max_retries = 16;
  std::string class_templates;  // empty: built-in bank
  std::string all_templates;

  void validate() const;
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

std::string to_json(const GeneratorConfig& config);
GeneratorConfig generator_config_from_json(std::string_view json);

/// Usage count per class name, carried across a generation run.
class ClassBalanceLedger {
 public:
  std::uint64_t count(const std::string& class_name) const;
  void increment(const std::string& class_name);
  void set(const std::string& class_name, std::uint64_t count) { counts_[class_name] = count; }
  const std::map<std::string, std::uint64_t>& counts() const { return counts_; }

 private:
  std::map<std::string, std::uint64_t> counts_;
};

/// One template per line with a "{classes}" placeholder.
struct TemplateBank {
  std::vector<std::string> templates;

  static TemplateBank parse(std::string_view text);
  static TemplateBank load(const std::filesystem::path& path);
  static const TemplateBank& builtin_classes();  // 45 templates
  static const TemplateBank& builtin_all();      // 96 templates
};

struct PromptBanks {
  TemplateBank classes;
  TemplateBank all;

  static PromptBanks from_config(const GeneratorConfig& config);
};

inline constexpr std::string_view kClassesPlaceholder = "{classes}";

std::string join_classes(const std::vector<std::string>& classes);
std::string fill_template(std::string_view tmpl, const std::vector<std::string>& classes);

/// Raw comma-joined classes with probability p_raw, otherwise a uniformly
/// chosen filled template.
std::string make_prompt(const std::vector<std::string>& classes, const TemplateBank& bank, Rng& rng,
                        double p_raw);
std::string make_all_prompt(const TemplateBank& bank, Rng& rng);

/// Forward map p' = s R(theta) (p - c) + c + t, c = canvas center.
struct AffineParams {
  double rotation_deg = 0.0;
  double tx = 0.0;  // pixels
  double ty = 0.0;
  double scale = 1.0;
  bool applied_to_b = true;

  static AffineParams identity() { return {}; }
  bool is_identity() const { return rotation_deg == 0.0 && tx == 0.0 && ty == 0.0 && scale == 1.0; }
};

enum class RemovalRole { change, red_herring, all };

std::string_view to_string(RemovalRole role);

/// A removed object. The mask is in the label frame: image B's frame once an
/// affine has been applied to B, otherwise the original frame.
struct RemovedObject {
  std::uint32_t id = 0;
  std::string class_name;
  RemovalRole role = RemovalRole::change;
  Mask mask;
  double visible_fraction = 1.0;
  bool survived = true;
};

struct SampleMeta {
  bool is_all = false;
  std::vector<std::uint32_t> change_ids;
  std::vector<std::uint32_t> red_herring_ids;
  AffineParams affine;
  bool affine_applied = false;
  std::vector<std::string> classes_in_prompt;
  std::array<std::uint8_t, 3> fill_color{};
  std::vector<RemovedObject> removed;
};

struct SamplePair {
  RgbImage image_a;
  RgbImage image_b;
  std::string prompt;
  Mask label;
  SampleMeta meta;

  /// Union of surviving removed masks of one class (red herrings included).
  Mask class_label(std::string_view class_name) const;
};

/// Source of scenes. The procedural backend below is the only one shipped.
class SceneBackend {
 public:
  virtual ~SceneBackend() = default;
  virtual SceneSpec render(std::uint64_t seed, RgbImage& image) const = 0;
};

class ProceduralSceneBackend : public SceneBackend {
 public:
  explicit ProceduralSceneBackend(GeneratorConfig config) : config_(std::move(config)) {}
  SceneSpec render(std::uint64_t seed, RgbImage& image) const override;

 private:
  GeneratorConfig config_;
};

struct RenderedScene {
  SceneSpec scene;
  RgbImage image;
};

RenderedScene render_scene(std::uint64_t seed, const GeneratorConfig& config);

/// Base color plus smooth value noise, identical on all channels.
RgbImage render_background(const BackgroundSpec& bg, std::size_t side);

/// Distinct scene classes capped at `cap` (largest visible area kept), then
/// the k least used by the ledger with lexicographic ties. Updates the ledger.
std::vector<std::string> propose_classes(const SceneSpec& scene, ClassBalanceLedger& ledger,
                                         std::size_t k, std::size_t cap = 10);
/// Draws k uniformly from the configured range, clamped to what is available.
std::vector<std::string> propose_classes(const SceneSpec& scene, ClassBalanceLedger& ledger, Rng& rng,
                                         const GeneratorConfig& config);

/// Removes objects from a copy of `image` by background fill plus artifact noise.
RgbImage inpaint(const SceneSpec& scene, const RgbImage& image, const std::vector<std::uint32_t>& ids,
                 int noise_amplitude);

SamplePair synthesize_change_pair(const SceneSpec& scene, const RgbImage& image,
                                  const std::vector<std::string>& classes, Rng& rng,
                                  const GeneratorConfig& config, const TemplateBank& bank);
/// Explicit id sets; label = union of change masks.
SamplePair synthesize_change_pair(const SceneSpec& scene, const RgbImage& image,
                                  const std::vector<std::string>& classes,
                                  const std::vector<std::uint32_t>& change_ids,
                                  const std::vector<std::uint32_t>& red_herring_ids, std::string prompt,
                                  const GeneratorConfig& config);

SamplePair synthesize_all_pair(const SceneSpec& scene, const RgbImage& image, Rng& rng,
                               const GeneratorConfig& config, const TemplateBank& bank);

AffineParams sample_affine(Rng& rng, const GeneratorConfig& config);

/// Bilinear warp; pixels mapping outside the canvas take `fill`.
RgbImage warp_image(const RgbImage& image, const AffineParams& affine, std::array<std::uint8_t, 3> fill);
/// Nearest-neighbour warp; outside the canvas is 0.
Mask warp_mask(const Mask& mask, const AffineParams& affine);

SamplePair apply_affine_and_prune(const SamplePair& pair, const AffineParams& affine, double tau_vis);
SamplePair apply_affine_and_prune(const SamplePair& pair, Rng& rng, const GeneratorConfig& config);

struct GeneratedSample {
  SceneSpec scene;
  SamplePair before_affine;
  SamplePair pair;
  std::size_t attempts = 0;
};

/// One full sample: render, choose classes, synthesize, perturb. Retries with
/// fresh scenes when a scene cannot support the requested pair.
GeneratedSample generate_sample(std::uint64_t seed, bool is_all, ClassBalanceLedger& ledger,
                                const GeneratorConfig& config, const PromptBanks& banks,
                                const SceneBackend& backend);

// --- datasets ----------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::string image_a;  // relative to the manifest directory
  std::string image_b;
  std::string label;
  std::string prompt;
  std::vector<std::string> classes;
  bool is_all = false;
  std::string split;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> class_labels;  // per-class label paths

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
};

inline constexpr std::string_view kManifestFile = "manifest.jsonl";
inline constexpr std::string_view kStatsFile = "stats.json";

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
/// Accepts a manifest file or a directory containing manifest.jsonl.
DatasetManifest read_manifest(const std::filesystem::path& path);

struct DatasetStats {
  std::size_t pairs = 0;
  std::size_t train_pairs = 0;
  std::size_t test_pairs = 0;
  std::size_t all_pairs = 0;
  double all_fraction = 0.0;
  std::size_t unique_classes = 0;
  std::size_t unique_prompts = 0;
  std::size_t test_classes_unseen_in_train = 0;
  std::size_t test_prompts_unseen_in_train = 0;
  std::map<std::string, std::size_t> class_histogram;  // pairs whose prompt names the class
  std::map<std::size_t, std::size_t> classes_per_prompt;
};

DatasetStats compute_stats(const std::vector<ManifestRecord>& records);
std::string to_json(const DatasetStats& stats);

struct DatasetOptions {
  std::size_t n_pairs = 100;
  double all_fraction = 0.12;
  double split_ratio = 0.9;  // train share
  std::uint64_t seed = 0;
  GeneratorConfig generator;
};

/// Number of "all" pairs: floor(n * f).
std::size_t all_pair_count(std::size_t n_pairs, double all_fraction);

/// Sees every sample in index order, after its files are written.
using SampleObserver = std::function<void(const ManifestRecord&, const GeneratedSample&)>;

/// Writes images/, labels/, manifest.jsonl and stats.json under out_dir.
DatasetManifest generate_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir,
                                 const SampleObserver& observer = {});

}  // namespace viewdelta
