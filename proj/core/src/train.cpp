#include "viewdelta/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "viewdelta/ops.hpp"
#include "viewdelta/rng.hpp"

namespace viewdelta {

using nlohmann::json;

namespace {

void check_label(std::size_t numel, const Mask& label, const char* op) {
  if (numel != label.values.size()) {
    throw DimensionError(std::string(op) + ": logits have " + std::to_string(numel) + " elements, label has " +
                         std::to_string(label.values.size()));
  }
  for (std::uint8_t v : label.values) {
    if (v > 1) throw std::invalid_argument(std::string(op) + ": label must be binary");
  }
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

template <typename Real>
Tensor<Real> label_tensor(const Mask& label) {
  std::vector<Real> v(label.values.begin(), label.values.end());
  return Tensor<Real>::from({1, label.height, label.width}, std::move(v));
}

template <typename Real>
Tensor<Real> bce_loss(const Tensor<Real>& logits, const Mask& label) {
  const std::size_t n = logits.numel();
  check_label(n, label, "bce_loss");
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double zi = z[i];
    total += std::max(zi, 0.0) - zi * label.values[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  const auto labels = label.values;
  return Tensor<Real>::make_result(
      {1}, {static_cast<Real>(total / static_cast<double>(n))}, {logits}, "bce_loss",
      [z_saved = std::vector<Real>(z.begin(), z.end()), labels, n](std::span<const Real> g,
                                                                   std::span<std::vector<Real>*> in) {
        if (!in[0]) return;
        const double scale = static_cast<double>(g[0]) / static_cast<double>(n);
        auto& gz = *in[0];
        for (std::size_t i = 0; i < n; ++i) {
          gz[i] += static_cast<Real>((stable_sigmoid(z_saved[i]) - labels[i]) * scale);
        }
      });
}

template <typename Real>
Tensor<Real> dice_loss(const Tensor<Real>& logits, const Mask& label) {
  const std::size_t n = logits.numel();
  check_label(n, label, "dice_loss");
  const auto z = logits.data();
  std::vector<double> p(n);
  double inter = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = stable_sigmoid(z[i]);
    inter += p[i] * label.values[i];
    sp += p[i];
    sy += label.values[i];
  }
  const double num = 2.0 * inter + 1.0, den = sp + sy + 1.0;
  const auto labels = label.values;
  return Tensor<Real>::make_result(
      {1}, {static_cast<Real>(1.0 - num / den)}, {logits}, "dice_loss",
      [p = std::move(p), labels, num, den, n](std::span<const Real> g, std::span<std::vector<Real>*> in) {
        if (!in[0]) return;
        auto& gz = *in[0];
        const double g0 = g[0];
        for (std::size_t i = 0; i < n; ++i) {
          const double dp = -(2.0 * labels[i] * den - num) / (den * den);
          gz[i] += static_cast<Real>(g0 * dp * p[i] * (1.0 - p[i]));
        }
      });
}

// --- optimizer and schedule ---------------------------------------------------------

template <typename Real>
void adam_step(std::vector<Tensor<Real>>& params, OptimizerState<Real>& st, double lr, double wd) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.numel(), Real(0));
      st.v.emplace_back(p.numel(), Real(0));
    }
  }
  if (st.m.size() != params.size()) throw TrainingError("optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (st.m[i].size() != params[i].numel()) throw TrainingError("optimizer moment shape mismatch");
    if (!params[i].has_grad()) throw TrainingError("parameter " + std::to_string(i) + " has no gradient");
  }
  ++st.step;
  const AdamHyper& h = st.hyper;
  const double t = static_cast<double>(st.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  const double shrink = 1.0 - lr * wd;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto grad = params[i].grad();
    auto data = params[i].mutable_data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      double theta = data[j];
      double g = grad[j];
      if (h.decoupled) {
        theta *= shrink;
      } else {
        g += wd * theta;
      }
      const double mj = h.beta1 * m[j] + (1.0 - h.beta1) * g;
      const double vj = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      theta -= lr * (mj / c1) / (std::sqrt(vj / c2) + h.eps);
      data[j] = static_cast<Real>(theta);
    }
  }
}

template <typename Real>
void adam_step(ModelParams<Real>& params, OptimizerState<Real>& st, double lr, double wd) {
  std::vector<Tensor<Real>> handles;
  for (auto& e : params.entries()) handles.push_back(e.second);
  adam_step(handles, st, lr, wd);
}

double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total, double lr0) {
  if (warmup >= total) {
    throw std::invalid_argument("lr_schedule: warmup " + std::to_string(warmup) + " must be below total " +
                                std::to_string(total));
  }
  if (step > total) throw std::invalid_argument("lr_schedule: step past total");
  if (step < warmup) return lr0 * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * progress));
}

// --- config ----------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0", "must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("beta1", "must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("beta2", "must be in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("eps", "must be positive");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (epochs == 0 && max_steps == 0) throw ConfigError("epochs", "epochs or max_steps must be positive");
  if (warmup_steps < -1) throw ConfigError("warmup_steps", "must be -1 (one epoch) or non-negative");
  if (!(dice_weight >= 0.0)) throw ConfigError("dice_weight", "must be non-negative");
  if (split != "train" && split != "test" && split != "all") {
    throw ConfigError("split", "expected train, test or all");
  }
}

namespace {

json train_json(const TrainConfig& c) {
  return json{{"lr0", c.lr0},
              {"weight_decay", c.weight_decay},
              {"beta1", c.adam.beta1},
              {"beta2", c.adam.beta2},
              {"eps", c.adam.eps},
              {"decoupled_weight_decay", c.adam.decoupled},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"max_steps", c.max_steps},
              {"warmup_steps", c.warmup_steps},
              {"seed", c.seed},
              {"data_seed", c.data_seed},
              {"dice_weight", c.dice_weight},
              {"checkpoint_every", c.checkpoint_every},
              {"split", c.split}};
}

}  // namespace

std::string to_json(const TrainConfig& config) { return train_json(config).dump(); }

TrainConfig train_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("train", e.what());
  }
  TrainConfig c;
  const json defaults = train_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) throw ConfigError(it.key(), "unknown train field");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ConfigError(key, e.what());
    }
  };
  get("lr0", c.lr0);
  get("weight_decay", c.weight_decay);
  get("beta1", c.adam.beta1);
  get("beta2", c.adam.beta2);
  get("eps", c.adam.eps);
  get("decoupled_weight_decay", c.adam.decoupled);
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("max_steps", c.max_steps);
  get("warmup_steps", c.warmup_steps);
  get("seed", c.seed);
  get("data_seed", c.data_seed);
  get("dice_weight", c.dice_weight);
  get("checkpoint_every", c.checkpoint_every);
  get("split", c.split);
  return c;
}

// --- training loop ------------------------------------------------------------------

template <typename Real>
std::vector<TrainExample<Real>> load_examples(const std::vector<DatasetManifest>& manifests,
                                              const ViewDeltaModel<Real>& model, const std::string& split) {
  std::vector<TrainExample<Real>> out;
  for (std::size_t s = 0; s < manifests.size(); ++s) {
    const auto& m = manifests[s];
    for (const auto& r : m.records) {
      if (split != "all" && r.split != split) continue;
      const RgbImage a = read_png_rgb(m.resolve(r.image_a));
      const RgbImage b = read_png_rgb(m.resolve(r.image_b));
      TrainExample<Real> ex{model.prepare(a, b, r.prompt), read_png_mask(m.resolve(r.label)), r.id, s};
      out.push_back(std::move(ex));
    }
  }
  return out;
}

template <typename Real>
TrainResult<Real> train(const std::vector<TrainExample<Real>>& examples, std::size_t n_sources,
                        const ModelConfig& model_config, const TrainConfig& config, const TrainOutputs& outputs) {
  model_config.validate();
  config.validate();
  if (examples.empty()) throw TrainingError("no training examples");

  TrainResult<Real> result{ViewDeltaModel<Real>(model_config, config.seed), {}, {}, 0, 0, std::nullopt};
  auto& model = result.model;
  const std::size_t n = examples.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = config.max_steps ? config.max_steps : config.epochs * per_epoch;
  const std::size_t warmup =
      config.warmup_steps < 0 ? per_epoch : static_cast<std::size_t>(config.warmup_steps);
  if (warmup >= total) {
    throw ConfigError("warmup_steps", std::to_string(warmup) + " warmup steps need more than the " +
                                          std::to_string(total) + " total steps");
  }
  result.total_steps = total;
  result.warmup_steps = warmup;
  result.samples_per_source.assign(std::max<std::size_t>(n_sources, 1), 0);

  std::ofstream log;
  if (outputs.out_dir) {
    std::filesystem::create_directories(*outputs.out_dir);
    log.open(*outputs.out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!log) throw TrainingError("cannot write " + (*outputs.out_dir / "metrics.jsonl").string());
  }

  std::vector<Tensor<Real>> handles;
  for (auto& e : model.params().entries()) handles.push_back(e.second);
  OptimizerState<Real> state;
  state.hyper = config.adam;

  std::vector<std::size_t> order(n);
  std::size_t cursor = n, epoch = 0;
  auto next_index = [&] {
    if (cursor == n) {
      std::iota(order.begin(), order.end(), 0);
      Rng rng(derive_seed(config.data_seed, epoch++));
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  const Real inv_batch = Real(1) / static_cast<Real>(config.batch_size);
  for (std::size_t step = 0; step < total; ++step) {
    model.params().zero_grad();
    double loss_sum = 0.0;
    ConfusionCounts counts;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto& ex = examples[next_index()];
      ++result.samples_per_source[ex.source];
      const Tensor<Real> logits = model.forward(ex.input);
      Tensor<Real> loss = bce_loss(logits, ex.label);
      if (config.dice_weight > 0.0) {
        loss = ops::add(loss, ops::scale(dice_loss(logits, ex.label), static_cast<Real>(config.dice_weight)));
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (sample " + ex.id + ")");
      }
      loss_sum += value;
      ops::scale(loss, inv_batch).backward();
      counts += confusion(model.binarize(logits), ex.label);
    }
    const double lr = lr_schedule(step, warmup, total, config.lr0);
    adam_step(handles, state, lr, config.weight_decay);

    StepRecord rec{step, lr, loss_sum / static_cast<double>(config.batch_size), compute_metrics(counts).iou};
    result.curve.push_back(rec);
    if (log.is_open()) {
      log << json{{"step", rec.step}, {"lr", rec.lr}, {"loss", rec.loss}, {"iou_estimate", rec.iou_estimate}}.dump()
          << '\n';
    }
    if (outputs.progress && outputs.progress_every && (step + 1) % outputs.progress_every == 0) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "step %zu/%zu  lr %.3g  loss %.5f  iou %.4f\n", step + 1, total, rec.lr,
                    rec.loss, rec.iou_estimate);
      *outputs.progress << buf << std::flush;
    }
    if (outputs.out_dir && config.checkpoint_every && (step + 1) % config.checkpoint_every == 0 &&
        step + 1 < total) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_step%06zu.bin", step + 1);
      save_checkpoint(*outputs.out_dir / name, model, config.seed, step + 1);
    }
  }
  if (outputs.out_dir) {
    result.checkpoint = *outputs.out_dir / "checkpoint.bin";
    save_checkpoint(*result.checkpoint, model, config.seed, total);
  }
  return result;
}

template <typename Real>
TrainResult<Real> train(const std::vector<DatasetManifest>& manifests, const ModelConfig& model_config,
                        const TrainConfig& config, const TrainOutputs& outputs) {
  model_config.validate();
  config.validate();
  const ViewDeltaModel<Real> loader(model_config, config.seed);
  const auto examples = load_examples(manifests, loader, config.split);
  return train(examples, manifests.size(), model_config, config, outputs);
}

template <typename Real>
Mask predict_mask(const ViewDeltaModel<Real>& model, const RgbImage& a, const RgbImage& b, std::string_view prompt) {
  return model.binarize(model.forward(model.prepare(a, b, prompt)));
}

template <typename Real>
Mask ModelPredictor<Real>::predict(const EvalItem& item) {
  return predict_mask(model_, item.image_a, item.image_b, item.prompt);
}

// --- gradient check --------------------------------------------------------------------

GradCheckReport grad_check(const ModelConfig& config, const GradCheckOptions& options, std::string config_name) {
  ViewDeltaModel<double> model(config, options.seed);
  Rng rng(derive_seed(options.seed, 0x6c));
  const std::size_t side = config.image_side;
  RgbImage a(side, side), b(side, side);
  for (auto& v : a.pixels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  for (auto& v : b.pixels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  Mask label(side, side);
  for (auto& v : label.values) v = rng.coin(0.3) ? 1 : 0;
  const auto input = model.prepare(a, b, "red disk, blue ring");
  // Zero biases behind dead ReLUs sit exactly on the kink, where central
  // differences disagree with any one-sided derivative. Jitter them off it.
  for (auto& [name, param] : model.params().entries()) {
    auto data = param.mutable_data();
    if (std::adjacent_find(data.begin(), data.end(), std::not_equal_to<>()) != data.end()) continue;
    for (auto& v : data) v += rng.uniform(-0.1, 0.1);
  }

  model.params().zero_grad();
  bce_loss(model.forward(input), label).backward();

  GradCheckReport report;
  report.config_name = std::move(config_name);
  report.tolerance = options.tolerance;
  const double h = options.step;
  for (auto& [name, param] : model.params().entries()) {
    const std::vector<double> analytic(param.grad().begin(), param.grad().end());
    auto data = param.mutable_data();
    ParamGradError err{name, data.size(), 0.0, 0.0, true};
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double orig = data[j];
      data[j] = orig + h;
      const double up = bce_loss(model.forward(input), label).item();
      data[j] = orig - h;
      const double down = bce_loss(model.forward(input), label).item();
      data[j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double abs_err = std::abs(analytic[j] - numeric);
      const double rel = abs_err / std::max({std::abs(analytic[j]), std::abs(numeric), options.rel_floor});
      err.max_abs_error = std::max(err.max_abs_error, abs_err);
      err.max_rel_error = std::max(err.max_rel_error, rel);
    }
    err.passed = err.max_rel_error <= options.tolerance;
    report.checked += err.count;
    report.max_rel_error = std::max(report.max_rel_error, err.max_rel_error);
    if (!err.passed) report.failing.push_back(name);
    report.params.push_back(std::move(err));
  }
  report.passed = report.failing.empty();
  return report;
}

std::string to_text(const GradCheckReport& r) {
  std::ostringstream os;
  char buf[200];
  std::snprintf(buf, sizeof(buf), "grad_check %s: %s  max rel error %.3e (tolerance %.1e, %zu scalars)\n",
                r.config_name.c_str(), r.passed ? "PASS" : "FAIL", r.max_rel_error, r.tolerance, r.checked);
  os << buf;
  for (const auto& p : r.params) {
    std::snprintf(buf, sizeof(buf), "  %-26s %6zu  rel %.3e  abs %.3e%s\n", p.name.c_str(), p.count, p.max_rel_error,
                  p.max_abs_error, p.passed ? "" : "  FAIL");
    os << buf;
  }
  return os.str();
}

#define VIEWDELTA_INSTANTIATE_TRAIN(Real)                                                                      \
  template Tensor<Real> label_tensor<Real>(const Mask&);                                                       \
  template Tensor<Real> bce_loss<Real>(const Tensor<Real>&, const Mask&);                                      \
  template Tensor<Real> dice_loss<Real>(const Tensor<Real>&, const Mask&);                                     \
  template void adam_step<Real>(std::vector<Tensor<Real>>&, OptimizerState<Real>&, double, double);            \
  template void adam_step<Real>(ModelParams<Real>&, OptimizerState<Real>&, double, double);                    \
  template std::vector<TrainExample<Real>> load_examples<Real>(const std::vector<DatasetManifest>&,            \
                                                               const ViewDeltaModel<Real>&, const std::string&); \
  template TrainResult<Real> train<Real>(const std::vector<TrainExample<Real>>&, std::size_t,                 \
                                         const ModelConfig&, const TrainConfig&, const TrainOutputs&);         \
  template TrainResult<Real> train<Real>(const std::vector<DatasetManifest>&, const ModelConfig&,             \
                                         const TrainConfig&, const TrainOutputs&);                             \
  template Mask predict_mask<Real>(const ViewDeltaModel<Real>&, const RgbImage&, const RgbImage&,             \
                                   std::string_view);                                                          \
  template class ModelPredictor<Real>;

VIEWDELTA_INSTANTIATE_TRAIN(float)
VIEWDELTA_INSTANTIATE_TRAIN(double)

}  // namespace viewdelta
