#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "viewdelta/image.hpp"
#include "viewdelta/scenegen.hpp"

namespace viewdelta {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Throws std::invalid_argument on shape mismatch or values other than 0/1.
ConfusionCounts confusion(const Mask& pred, const Mask& label);

struct Metrics {
  double iou = 0.0;
  double f1 = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

/// A zero denominator gives 1.0 when tp + fp + fn == 0, else 0.0.
Metrics compute_metrics(const ConfusionCounts& counts);

enum class Protocol { native, per_class, fixed };

std::string to_string(Protocol protocol);
Protocol parse_protocol(const std::string& text);

/// Pairs with an empty label and empty prediction either score 1.0 or are
/// left out of the macro average.
enum class EmptyPairPolicy { score_one, skip };

struct MetricReport {
  std::string protocol;
  Metrics micro;
  Metrics macro;
  ConfusionCounts totals;
  std::size_t n_pairs = 0;
  std::size_t skipped_pairs = 0;
  double threshold = 0.5;
  std::vector<std::pair<std::string, MetricReport>> per_class;  // per-class protocol only
};

std::string to_text(const MetricReport& report);
std::string to_json(const MetricReport& report);

/// Everything a predictor may look at for one evaluation.
struct EvalItem {
  const ManifestRecord& record;
  const RgbImage& image_a;
  const RgbImage& image_b;
  const std::string& prompt;
  const Mask& label;
};

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual Mask predict(const EvalItem& item) = 0;
  virtual double threshold() const { return 0.5; }
};

/// Returns the label itself.
class LabelPredictor : public Predictor {
 public:
  Mask predict(const EvalItem& item) override { return item.label; }
};

/// Predicts no change anywhere.
class EmptyPredictor : public Predictor {
 public:
  Mask predict(const EvalItem& item) override { return Mask(item.label.width, item.label.height); }
};

struct EvalOptions {
  Protocol protocol = Protocol::native;
  std::string fixed_prompt;
  /// Class names for the per-class protocol; empty means every class named
  /// anywhere in the manifest.
  std::vector<std::string> classes;
  /// "train", "test" or "all".
  std::string split = "test";
  EmptyPairPolicy empty_policy = EmptyPairPolicy::score_one;
  std::optional<std::filesystem::path> overlay_dir;
};

/// Accumulates counts pair by pair.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(EmptyPairPolicy policy = EmptyPairPolicy::score_one) : policy_(policy) {}
  void add(const ConfusionCounts& counts);
  MetricReport report(std::string protocol, double threshold) const;

 private:
  EmptyPairPolicy policy_;
  ConfusionCounts totals_;
  std::vector<Metrics> per_pair_;
  std::size_t n_pairs_ = 0;
  std::size_t skipped_ = 0;
};

MetricReport evaluate(const DatasetManifest& manifest, Predictor& predictor, const EvalOptions& options);

/// Image A dimmed, prediction in red, label in blue.
RgbImage overlay(const RgbImage& image, const Mask& pred, const Mask& label);

}  // namespace viewdelta
