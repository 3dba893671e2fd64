#include "viewdelta/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace viewdelta {

using nlohmann::ordered_json;

ConfusionCounts confusion(const Mask& pred, const Mask& label) {
  if (pred.width != label.width || pred.height != label.height) {
    throw std::invalid_argument("confusion: prediction is " + std::to_string(pred.width) + "x" +
                                std::to_string(pred.height) + ", label is " + std::to_string(label.width) + "x" +
                                std::to_string(label.height));
  }
  std::uint64_t cell[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const std::uint8_t p = pred.values[i], l = label.values[i];
    if (p > 1 || l > 1) throw std::invalid_argument("confusion: masks must be binary");
    ++cell[(p << 1) | l];
  }
  ConfusionCounts c;
  c.tn = cell[0];
  c.fn = cell[1];
  c.fp = cell[2];
  c.tp = cell[3];
  return c;
}

Metrics compute_metrics(const ConfusionCounts& c) {
  const bool nothing = c.tp + c.fp + c.fn == 0;
  auto ratio = [&](double num, double den) { return den > 0 ? num / den : (nothing ? 1.0 : 0.0); };
  Metrics m;
  const double tp = static_cast<double>(c.tp);
  m.iou = ratio(tp, tp + static_cast<double>(c.fp + c.fn));
  m.precision = ratio(tp, tp + static_cast<double>(c.fp));
  m.recall = ratio(tp, tp + static_cast<double>(c.fn));
  m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
  return m;
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::native: return "native";
    case Protocol::per_class: return "per-class";
    case Protocol::fixed: return "fixed";
  }
  return "?";
}

Protocol parse_protocol(const std::string& text) {
  if (text == "native") return Protocol::native;
  if (text == "per-class" || text == "per_class") return Protocol::per_class;
  if (text == "fixed") return Protocol::fixed;
  throw std::invalid_argument("protocol: expected native, per-class or fixed, got '" + text + "'");
}

void MetricAccumulator::add(const ConfusionCounts& counts) {
  totals_ += counts;
  ++n_pairs_;
  if (policy_ == EmptyPairPolicy::skip && counts.tp + counts.fp + counts.fn == 0) {
    ++skipped_;
    return;
  }
  per_pair_.push_back(compute_metrics(counts));
}

MetricReport MetricAccumulator::report(std::string protocol, double threshold) const {
  MetricReport r;
  r.protocol = std::move(protocol);
  r.threshold = threshold;
  r.totals = totals_;
  r.n_pairs = n_pairs_;
  r.skipped_pairs = skipped_;
  r.micro = compute_metrics(totals_);
  if (!per_pair_.empty()) {
    for (const auto& m : per_pair_) {
      r.macro.iou += m.iou;
      r.macro.f1 += m.f1;
      r.macro.recall += m.recall;
      r.macro.precision += m.precision;
    }
    const auto n = static_cast<double>(per_pair_.size());
    r.macro.iou /= n;
    r.macro.f1 /= n;
    r.macro.recall /= n;
    r.macro.precision /= n;
  }
  return r;
}

namespace {

ordered_json metrics_json(const Metrics& m) {
  return ordered_json{{"iou", m.iou}, {"f1", m.f1}, {"recall", m.recall}, {"precision", m.precision}};
}

ordered_json report_json(const MetricReport& r) {
  ordered_json j{{"protocol", r.protocol},
                 {"threshold", r.threshold},
                 {"n_pairs", r.n_pairs},
                 {"skipped_pairs", r.skipped_pairs},
                 {"micro", metrics_json(r.micro)},
                 {"macro", metrics_json(r.macro)},
                 {"counts", {{"tp", r.totals.tp}, {"fp", r.totals.fp}, {"fn", r.totals.fn}, {"tn", r.totals.tn}}}};
  if (!r.per_class.empty()) {
    ordered_json pc = ordered_json::object();
    for (const auto& [name, sub] : r.per_class) pc[name] = report_json(sub);
    j["per_class"] = pc;
  }
  return j;
}

bool split_matches(const std::string& wanted, const std::string& split) {
  return wanted == "all" || wanted == split;
}

Mask load_class_label(const DatasetManifest& m, const ManifestRecord& r, const std::string& cls, std::size_t w,
                      std::size_t h) {
  auto it = r.class_labels.find(cls);
  if (it == r.class_labels.end()) return Mask(w, h);
  return read_png_mask(m.resolve(it->second));
}

}  // namespace

std::string to_json(const MetricReport& report) { return report_json(report).dump(2); }

std::string to_text(const MetricReport& r) {
  std::ostringstream os;
  char buf[160];
  os << "protocol   " << r.protocol << "\n";
  os << "pairs      " << r.n_pairs;
  if (r.skipped_pairs) os << " (" << r.skipped_pairs << " empty pairs left out of macro)";
  os << "\nthreshold  " << r.threshold << "\n";
  os << "             iou      f1       recall   precision\n";
  std::snprintf(buf, sizeof(buf), "micro      %8.4f %8.4f %8.4f %8.4f\n", r.micro.iou, r.micro.f1, r.micro.recall,
                r.micro.precision);
  os << buf;
  std::snprintf(buf, sizeof(buf), "macro      %8.4f %8.4f %8.4f %8.4f\n", r.macro.iou, r.macro.f1, r.macro.recall,
                r.macro.precision);
  os << buf;
  for (const auto& [name, sub] : r.per_class) {
    std::snprintf(buf, sizeof(buf), "  %-20s micro iou %.4f  macro iou %.4f  (%zu pairs)\n", name.c_str(),
                  sub.micro.iou, sub.macro.iou, sub.n_pairs);
    os << buf;
  }
  return os.str();
}

RgbImage overlay(const RgbImage& image, const Mask& pred, const Mask& label) {
  RgbImage out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = static_cast<std::uint8_t>(image.at(x, y, c) / 3);
      if (label.at(x, y)) out.at(x, y, 2) = 255;
      if (pred.at(x, y)) out.at(x, y, 0) = 255;
    }
  }
  return out;
}

MetricReport evaluate(const DatasetManifest& manifest, Predictor& predictor, const EvalOptions& options) {
  if (options.split != "train" && options.split != "test" && options.split != "all") {
    throw std::invalid_argument("split: expected train, test or all, got '" + options.split + "'");
  }
  if (options.protocol == Protocol::fixed && options.fixed_prompt.empty()) {
    throw std::invalid_argument("fixed_prompt: required by the fixed protocol");
  }
  if (options.overlay_dir) std::filesystem::create_directories(*options.overlay_dir);

  std::vector<const ManifestRecord*> records;
  for (const auto& r : manifest.records) {
    if (split_matches(options.split, r.split)) records.push_back(&r);
  }

  auto dump = [&](const ManifestRecord& r, const std::string& tag, const RgbImage& a, const Mask& pred,
                  const Mask& label) {
    if (!options.overlay_dir) return;
    write_png(*options.overlay_dir / (r.id + tag + ".png"), overlay(a, pred, label));
  };

  if (options.protocol != Protocol::per_class) {
    MetricAccumulator acc(options.empty_policy);
    for (const ManifestRecord* r : records) {
      const RgbImage a = read_png_rgb(manifest.resolve(r->image_a));
      const RgbImage b = read_png_rgb(manifest.resolve(r->image_b));
      const Mask label = read_png_mask(manifest.resolve(r->label));
      const std::string& prompt = options.protocol == Protocol::fixed ? options.fixed_prompt : r->prompt;
      const Mask pred = predictor.predict({*r, a, b, prompt, label});
      acc.add(confusion(pred, label));
      dump(*r, "", a, pred, label);
    }
    return acc.report(to_string(options.protocol), predictor.threshold());
  }

  std::vector<std::string> classes = options.classes;
  if (classes.empty()) {
    std::set<std::string> seen;
    for (const auto* r : records) {
      seen.insert(r->classes.begin(), r->classes.end());
      for (const auto& [c, path] : r->class_labels) seen.insert(c);
    }
    classes.assign(seen.begin(), seen.end());
  }
  if (classes.empty()) throw std::invalid_argument("classes: the per-class protocol needs a class list");

  std::vector<MetricAccumulator> accs(classes.size(), MetricAccumulator(options.empty_policy));
  for (const ManifestRecord* r : records) {
    const RgbImage a = read_png_rgb(manifest.resolve(r->image_a));
    const RgbImage b = read_png_rgb(manifest.resolve(r->image_b));
    for (std::size_t k = 0; k < classes.size(); ++k) {
      const Mask label = load_class_label(manifest, *r, classes[k], a.width, a.height);
      const Mask pred = predictor.predict({*r, a, b, classes[k], label});
      accs[k].add(confusion(pred, label));
    }
  }
  MetricReport out;
  out.protocol = to_string(Protocol::per_class);
  out.threshold = predictor.threshold();
  for (std::size_t k = 0; k < classes.size(); ++k) {
    MetricReport sub = accs[k].report(out.protocol, out.threshold);
    out.totals += sub.totals;
    out.n_pairs += sub.n_pairs;
    out.skipped_pairs += sub.skipped_pairs;
    out.per_class.emplace_back(classes[k], std::move(sub));
  }
  const auto n = static_cast<double>(classes.size());
  for (const auto& [name, sub] : out.per_class) {
    out.micro.iou += sub.micro.iou / n;
    out.micro.f1 += sub.micro.f1 / n;
    out.micro.recall += sub.micro.recall / n;
    out.micro.precision += sub.micro.precision / n;
    out.macro.iou += sub.macro.iou / n;
    out.macro.f1 += sub.macro.f1 / n;
    out.macro.recall += sub.macro.recall / n;
    out.macro.precision += sub.macro.precision / n;
  }
  return out;
}

}  // namespace viewdelta
