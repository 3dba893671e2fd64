#include "viewdelta/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "template_banks.hpp"

namespace viewdelta {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct PaletteColor {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};

// Every color has a channel outside the background range [68, 152] even
// after texture modulation, so removing any object changes some pixel.
constexpr std::array<PaletteColor, 8> kPalette{{
    {"red", {210, 40, 40}},
    {"green", {40, 190, 60}},
    {"blue", {40, 70, 215}},
    {"yellow", {230, 210, 40}},
    {"cyan", {40, 200, 215}},
    {"magenta", {205, 40, 195}},
    {"white", {240, 240, 240}},
    {"black", {20, 20, 20}},
}};

constexpr std::array<ShapeKind, 5> kShapes{ShapeKind::disk, ShapeKind::rectangle, ShapeKind::triangle,
                                           ShapeKind::ring, ShapeKind::blob};

constexpr int kTextureAmplitude = 10;

std::uint8_t clamp_u8(long v) { return static_cast<std::uint8_t>(std::clamp(v, 0L, 255L)); }

std::string class_name_of(std::size_t color, ShapeKind shape) {
  return std::string(kPalette[color].name) + " " + std::string(to_string(shape));
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

struct ShapeGeometry {
  ShapeKind kind;
  double cx, cy, r, angle, aspect;
  int lobes1, lobes2;
  double phase1, phase2;

  bool contains(double px, double py) const {
    const double dx = px - cx;
    const double dy = py - cy;
    switch (kind) {
      case ShapeKind::disk:
        return dx * dx + dy * dy <= r * r;
      case ShapeKind::ring: {
        const double d2 = dx * dx + dy * dy;
        return d2 <= r * r && d2 >= 0.3 * r * r;
      }
      case ShapeKind::rectangle: {
        const double u = std::cos(angle) * dx + std::sin(angle) * dy;
        const double v = -std::sin(angle) * dx + std::cos(angle) * dy;
        return std::abs(u) <= r && std::abs(v) <= r * aspect;
      }
      case ShapeKind::triangle: {
        std::array<double, 6> v{};
        for (int k = 0; k < 3; ++k) {
          const double a = angle + 2.0 * std::numbers::pi * k / 3.0;
          v[2 * k] = cx + 1.2 * r * std::cos(a);
          v[2 * k + 1] = cy + 1.2 * r * std::sin(a);
        }
        auto edge = [&](int i, int j) {
          return (v[2 * j] - v[2 * i]) * (py - v[2 * i + 1]) - (v[2 * j + 1] - v[2 * i + 1]) * (px - v[2 * i]);
        };
        const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
        return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
      }
      case ShapeKind::blob: {
        const double phi = std::atan2(dy, dx);
        const double rr = r * (1.0 + 0.25 * std::sin(lobes1 * phi + phase1) + 0.12 * std::sin(lobes2 * phi + phase2));
        return dx * dx + dy * dy <= rr * rr;
      }
    }
    return false;
  }
};

Mask rasterize(const ShapeGeometry& g, std::size_t side) {
  Mask m(side, side);
  const double x0 = std::max(0.0, std::floor(g.cx - 1.6 * g.r));
  const double x1 = std::min(static_cast<double>(side), std::ceil(g.cx + 1.6 * g.r));
  const double y0 = std::max(0.0, std::floor(g.cy - 1.6 * g.r));
  const double y1 = std::min(static_cast<double>(side), std::ceil(g.cy + 1.6 * g.r));
  for (auto y = static_cast<std::size_t>(y0); y < static_cast<std::size_t>(y1); ++y) {
    for (auto x = static_cast<std::size_t>(x0); x < static_cast<std::size_t>(x1); ++x) {
      if (g.contains(x + 0.5, y + 0.5)) m.at(x, y) = 1;
    }
  }
  return m;
}

std::size_t overlap(const Mask& a, const Mask& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) n += a.values[i] & b.values[i];
  return n;
}

struct Texture {
  double amplitude, period, theta, phase;

  explicit Texture(std::uint64_t seed) {
    Rng rng(seed);
    amplitude = rng.uniform(0.0, kTextureAmplitude);
    period = rng.uniform(3.0, 8.0);
    theta = rng.uniform(0.0, std::numbers::pi);
    phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }

  long offset(std::size_t x, std::size_t y) const {
    const double t = (x * std::cos(theta) + y * std::sin(theta)) / period;
    return std::lround(amplitude * std::sin(2.0 * std::numbers::pi * t + phase));
  }
};

std::optional<SceneSpec> try_render(std::uint64_t seed, const GeneratorConfig& cfg, RgbImage& image) {
  const std::size_t side = cfg.canvas;
  Rng rng(seed);
  SceneSpec scene;
  scene.seed = seed;
  scene.side = side;
  for (auto& c : scene.background.base) c = static_cast<std::uint8_t>(rng.uniform_int(90, 130));
  scene.background.noise_seed = rng.next_u64();

  const auto target = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(cfg.min_objects), static_cast<std::int64_t>(cfg.max_objects)));
  std::vector<Mask> visible;
  std::vector<ObjectInstance> objects;
  for (std::size_t i = 0; i < target; ++i) {
    const std::size_t color = rng.index(kPalette.size());
    const ShapeKind shape = kShapes[rng.index(kShapes.size())];
    for (std::size_t attempt = 0; attempt < cfg.placement_attempts; ++attempt) {
      ShapeGeometry g{};
      g.kind = shape;
      g.cx = rng.uniform(0.0, static_cast<double>(side));
      g.cy = rng.uniform(0.0, static_cast<double>(side));
      g.r = rng.uniform(cfg.min_radius, cfg.max_radius) * static_cast<double>(side);
      g.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      g.aspect = rng.uniform(0.5, 1.0);
      g.lobes1 = static_cast<int>(rng.uniform_int(2, 3));
      g.lobes2 = static_cast<int>(rng.uniform_int(3, 5));
      g.phase1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
      g.phase2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
      Mask full = rasterize(g, side);
      if (full.count() < cfg.min_visible_pixels) continue;
      bool ok = true;
      for (const Mask& v : visible) {
        if (v.count() - overlap(v, full) < cfg.min_visible_pixels) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      for (Mask& v : visible) {
        for (std::size_t p = 0; p < v.values.size(); ++p) v.values[p] &= static_cast<std::uint8_t>(!full.values[p]);
      }
      ObjectInstance obj;
      obj.id = static_cast<std::uint32_t>(objects.size() + 1);
      obj.class_name = class_name_of(color, shape);
      obj.shape = shape;
      obj.appearance.color = kPalette[color].rgb;
      obj.appearance.texture_seed = rng.next_u64();
      objects.push_back(std::move(obj));
      visible.push_back(std::move(full));
      break;
    }
  }
  if (objects.size() < cfg.min_objects) return std::nullopt;

  image = render_background(scene.background, side);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    objects[i].mask = std::move(visible[i]);
    const auto& obj = objects[i];
    const Texture texture(obj.appearance.texture_seed);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        if (!obj.mask.at(x, y)) continue;
        const long t = texture.offset(x, y);
        for (std::size_t c = 0; c < 3; ++c) image.at(x, y, c) = clamp_u8(obj.appearance.color[c] + t);
      }
    }
  }
  scene.objects = std::move(objects);
  return scene;
}

Mask union_of(const std::vector<RemovedObject>& removed, std::size_t side, bool (*keep)(const RemovedObject&)) {
  Mask m(side, side);
  for (const auto& r : removed) {
    if (!keep(r)) continue;
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] |= r.mask.values[i];
  }
  return m;
}

bool is_label_object(const RemovedObject& r) { return r.survived && r.role != RemovalRole::red_herring; }

std::vector<std::uint32_t> pick(std::vector<std::uint32_t> pool, std::size_t count, Rng& rng) {
  rng.shuffle(pool);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::size_t draw_count(Rng& rng, std::size_t lo, std::size_t hi) {
  lo = std::min(lo, hi);
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

// Output pixel center -> source point under the inverse of the forward map.
struct InverseAffine {
  double cos_t, sin_t, inv_s, cx, cy, tx, ty;

  InverseAffine(const AffineParams& a, std::size_t w, std::size_t h)
      : cos_t(std::cos(a.rotation_deg * std::numbers::pi / 180.0)),
        sin_t(std::sin(a.rotation_deg * std::numbers::pi / 180.0)),
        inv_s(1.0 / a.scale),
        cx(0.5 * static_cast<double>(w)),
        cy(0.5 * static_cast<double>(h)),
        tx(a.tx),
        ty(a.ty) {}

  void map(std::size_t x, std::size_t y, double& sx, double& sy) const {
    const double dx = (x + 0.5) - cx - tx;
    const double dy = (y + 0.5) - cy - ty;
    sx = (cos_t * dx + sin_t * dy) * inv_s + cx;
    sy = (-sin_t * dx + cos_t * dy) * inv_s + cy;
  }
};

std::string slug(std::string_view name) {
  std::string s(name);
  for (char& c : s) {
    if (c == ' ') c = '_';
  }
  return s;
}

std::string format_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu", index);
  return buf;
}

json generator_json(const GeneratorConfig& c) {
  return json{{"canvas", c.canvas},
              {"min_objects", c.min_objects},
              {"max_objects", c.max_objects},
              {"min_radius", c.min_radius},
              {"max_radius", c.max_radius},
              {"min_visible_pixels", c.min_visible_pixels},
              {"placement_attempts", c.placement_attempts},
              {"min_prompt_classes", c.min_prompt_classes},
              {"max_prompt_classes", c.max_prompt_classes},
              {"class_cap", c.class_cap},
              {"min_changes", c.min_changes},
              {"max_changes", c.max_changes},
              {"red_herrings", c.red_herrings},
              {"max_red_herrings", c.max_red_herrings},
              {"all_min_removals", c.all_min_removals},
              {"all_max_removals", c.all_max_removals},
              {"inpaint_noise", c.inpaint_noise},
              {"p_raw", c.p_raw},
              {"affine", c.affine},
              {"max_rotation_deg", c.max_rotation_deg},
              {"max_translation", c.max_translation},
              {"min_scale", c.min_scale},
              {"max_scale", c.max_scale},
              {"tau_vis", c.tau_vis},
              {"max_retries", c.max_retries},
              {"class_templates", c.class_templates},
              {"all_templates", c.all_templates}};
}

}  // namespace

// --- vocabulary ----------------------------------------------------------------

std::string_view to_string(ShapeKind shape) {
  switch (shape) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::ring: return "ring";
    case ShapeKind::blob: return "blob";
  }
  return "?";
}

std::string_view to_string(RemovalRole role) {
  switch (role) {
    case RemovalRole::change: return "change";
    case RemovalRole::red_herring: return "red_herring";
    case RemovalRole::all: return "all";
  }
  return "?";
}

const std::vector<std::string>& class_vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v;
    for (std::size_t c = 0; c < kPalette.size(); ++c) {
      for (ShapeKind s : kShapes) v.push_back(class_name_of(c, s));
    }
    return v;
  }();
  return vocab;
}

bool in_vocabulary(std::string_view name) {
  const auto& v = class_vocabulary();
  return std::find(v.begin(), v.end(), name) != v.end();
}

const ObjectInstance& SceneSpec::object(std::uint32_t id) const {
  for (const auto& o : objects) {
    if (o.id == id) return o;
  }
  throw GenerationError("no object with id " + std::to_string(id));
}

// --- config --------------------------------------------------------------------

void GeneratorConfig::validate() const {
  auto fail = [](const char* field, const std::string& msg) {
    throw std::invalid_argument(std::string(field) + ": " + msg);
  };
  if (canvas < 8) fail("canvas", "must be at least 8");
  if (min_objects == 0 || min_objects > max_objects) fail("min_objects", "need 1 <= min_objects <= max_objects");
  if (!(min_radius > 0.0 && min_radius <= max_radius && max_radius < 0.5)) {
    fail("min_radius", "need 0 < min_radius <= max_radius < 0.5");
  }
  if (min_prompt_classes == 0 || min_prompt_classes > max_prompt_classes) {
    fail("min_prompt_classes", "need 1 <= min_prompt_classes <= max_prompt_classes");
  }
  if (class_cap == 0) fail("class_cap", "must be positive");
  if (min_changes > max_changes) fail("min_changes", "exceeds max_changes");
  if (all_min_removals == 0 || all_min_removals > all_max_removals) {
    fail("all_min_removals", "need 1 <= all_min_removals <= all_max_removals");
  }
  if (all_min_removals > max_objects) fail("all_min_removals", "exceeds max_objects");
  if (inpaint_noise < 0 || inpaint_noise > 64) fail("inpaint_noise", "must be in [0, 64]");
  if (!(p_raw >= 0.0 && p_raw <= 1.0)) fail("p_raw", "must be in [0, 1]");
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 180.0)) fail("max_rotation_deg", "must be in [0, 180]");
  if (!(max_translation >= 0.0 && max_translation <= 1.0)) fail("max_translation", "must be in [0, 1]");
  if (!(min_scale > 0.0 && min_scale <= max_scale)) fail("min_scale", "need 0 < min_scale <= max_scale");
  if (!(tau_vis >= 0.0 && tau_vis <= 1.0)) fail("tau_vis", "must be in [0, 1]");
  if (max_retries == 0) fail("max_retries", "must be positive");
}

std::string to_json(const GeneratorConfig& config) { return generator_json(config).dump(); }

GeneratorConfig generator_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("generator: ") + e.what());
  }
  GeneratorConfig c;
  json merged = generator_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!merged.contains(it.key())) throw std::invalid_argument(it.key() + ": unknown generator field");
    merged[it.key()] = it.value();
  }
  try {
    merged.at("canvas").get_to(c.canvas);
    merged.at("min_objects").get_to(c.min_objects);
    merged.at("max_objects").get_to(c.max_objects);
    merged.at("min_radius").get_to(c.min_radius);
    merged.at("max_radius").get_to(c.max_radius);
    merged.at("min_visible_pixels").get_to(c.min_visible_pixels);
    merged.at("placement_attempts").get_to(c.placement_attempts);
    merged.at("min_prompt_classes").get_to(c.min_prompt_classes);
    merged.at("max_prompt_classes").get_to(c.max_prompt_classes);
    merged.at("class_cap").get_to(c.class_cap);
    merged.at("min_changes").get_to(c.min_changes);
    merged.at("max_changes").get_to(c.max_changes);
    merged.at("red_herrings").get_to(c.red_herrings);
    merged.at("max_red_herrings").get_to(c.max_red_herrings);
    merged.at("all_min_removals").get_to(c.all_min_removals);
    merged.at("all_max_removals").get_to(c.all_max_removals);
    merged.at("inpaint_noise").get_to(c.inpaint_noise);
    merged.at("p_raw").get_to(c.p_raw);
    merged.at("affine").get_to(c.affine);
    merged.at("max_rotation_deg").get_to(c.max_rotation_deg);
    merged.at("max_translation").get_to(c.max_translation);
    merged.at("min_scale").get_to(c.min_scale);
    merged.at("max_scale").get_to(c.max_scale);
    merged.at("tau_vis").get_to(c.tau_vis);
    merged.at("max_retries").get_to(c.max_retries);
    merged.at("class_templates").get_to(c.class_templates);
    merged.at("all_templates").get_to(c.all_templates);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("generator: ") + e.what());
  }
  return c;
}

// --- ledger and prompts ----------------------------------------------------------

std::uint64_t ClassBalanceLedger::count(const std::string& name) const {
  auto it = counts_.find(name);
  return it == counts_.end() ? 0 : it->second;
}

void ClassBalanceLedger::increment(const std::string& name) { ++counts_[name]; }

TemplateBank TemplateBank::parse(std::string_view text) {
  TemplateBank bank;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) bank.templates.push_back(line);
  }
  return bank;
}

TemplateBank TemplateBank::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw GenerationError("cannot read template bank " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  TemplateBank bank = parse(ss.str());
  if (bank.templates.empty()) throw GenerationError("template bank " + path.string() + " is empty");
  return bank;
}

const TemplateBank& TemplateBank::builtin_classes() {
  static const TemplateBank bank = parse(kBuiltinClassTemplates);
  return bank;
}

const TemplateBank& TemplateBank::builtin_all() {
  static const TemplateBank bank = parse(kBuiltinAllTemplates);
  return bank;
}

PromptBanks PromptBanks::from_config(const GeneratorConfig& config) {
  PromptBanks b;
  b.classes = config.class_templates.empty() ? TemplateBank::builtin_classes() : TemplateBank::load(config.class_templates);
  b.all = config.all_templates.empty() ? TemplateBank::builtin_all() : TemplateBank::load(config.all_templates);
  return b;
}

std::string join_classes(const std::vector<std::string>& classes) {
  std::string out;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (i) out += ", ";
    out += classes[i];
  }
  return out;
}

std::string fill_template(std::string_view tmpl, const std::vector<std::string>& classes) {
  std::string out(tmpl);
  const std::string joined = join_classes(classes);
  for (std::size_t pos = out.find(kClassesPlaceholder); pos != std::string::npos;
       pos = out.find(kClassesPlaceholder, pos + joined.size())) {
    out.replace(pos, kClassesPlaceholder.size(), joined);
  }
  return out;
}

std::string make_prompt(const std::vector<std::string>& classes, const TemplateBank& bank, Rng& rng,
                        double p_raw) {
  if (bank.templates.empty()) throw GenerationError("empty template bank");
  if (rng.coin(p_raw)) return join_classes(classes);
  return fill_template(bank.templates[rng.index(bank.templates.size())], classes);
}

std::string make_all_prompt(const TemplateBank& bank, Rng& rng) {
  if (bank.templates.empty()) throw GenerationError("empty template bank");
  return bank.templates[rng.index(bank.templates.size())];
}

// --- scenes --------------------------------------------------------------------

RgbImage render_background(const BackgroundSpec& bg, std::size_t side) {
  const std::size_t n = bg.cells + 1;
  std::vector<double> lattice(n * n);
  Rng rng(bg.noise_seed);
  for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  RgbImage image(side, side);
  for (std::size_t y = 0; y < side; ++y) {
    const double v = (y + 0.5) / static_cast<double>(side) * static_cast<double>(bg.cells);
    const auto j = std::min(static_cast<std::size_t>(v), bg.cells - 1);
    const double fy = smoothstep(v - static_cast<double>(j));
    for (std::size_t x = 0; x < side; ++x) {
      const double u = (x + 0.5) / static_cast<double>(side) * static_cast<double>(bg.cells);
      const auto i = std::min(static_cast<std::size_t>(u), bg.cells - 1);
      const double fx = smoothstep(u - static_cast<double>(i));
      const double top = lattice[j * n + i] * (1 - fx) + lattice[j * n + i + 1] * fx;
      const double bot = lattice[(j + 1) * n + i] * (1 - fx) + lattice[(j + 1) * n + i + 1] * fx;
      const long offset = std::lround(bg.amplitude * (top * (1 - fy) + bot * fy));
      for (std::size_t c = 0; c < 3; ++c) image.at(x, y, c) = clamp_u8(bg.base[c] + offset);
    }
  }
  return image;
}

SceneSpec ProceduralSceneBackend::render(std::uint64_t seed, RgbImage& image) const {
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    auto scene = try_render(attempt == 0 ? seed : derive_seed(seed, attempt), config_, image);
    if (scene) {
      scene->seed = seed;
      return *std::move(scene);
    }
  }
  throw GenerationError("could not place " + std::to_string(config_.min_objects) + " objects on a " +
                        std::to_string(config_.canvas) + " px canvas");
}

RenderedScene render_scene(std::uint64_t seed, const GeneratorConfig& config) {
  RenderedScene r;
  r.scene = ProceduralSceneBackend(config).render(seed, r.image);
  return r;
}

std::vector<std::string> propose_classes(const SceneSpec& scene, ClassBalanceLedger& ledger, std::size_t k,
                                         std::size_t cap) {
  if (scene.objects.empty()) throw GenerationError("propose_classes: scene has no objects");
  std::map<std::string, std::size_t> area;
  for (const auto& o : scene.objects) area[o.class_name] += o.mask.count();
  std::vector<std::pair<std::string, std::size_t>> present(area.begin(), area.end());
  std::stable_sort(present.begin(), present.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (present.size() > cap) present.resize(cap);
  std::vector<std::string> names;
  for (auto& p : present) names.push_back(p.first);
  std::sort(names.begin(), names.end(), [&](const std::string& a, const std::string& b) {
    const auto ca = ledger.count(a), cb = ledger.count(b);
    return ca != cb ? ca < cb : a < b;
  });
  names.resize(std::min(k, names.size()));
  for (const auto& n : names) ledger.increment(n);
  return names;
}

std::vector<std::string> propose_classes(const SceneSpec& scene, ClassBalanceLedger& ledger, Rng& rng,
                                         const GeneratorConfig& config) {
  const std::size_t k = draw_count(rng, config.min_prompt_classes, config.max_prompt_classes);
  return propose_classes(scene, ledger, k, config.class_cap);
}

// --- synthesis -------------------------------------------------------------------

RgbImage inpaint(const SceneSpec& scene, const RgbImage& image, const std::vector<std::uint32_t>& ids,
                 int noise_amplitude) {
  const RgbImage bg = render_background(scene.background, scene.side);
  RgbImage out = image;
  for (std::uint32_t id : ids) {
    const ObjectInstance& obj = scene.object(id);
    Rng rng(derive_seed(derive_seed(scene.seed, 0x1a9a), id));
    for (std::size_t y = 0; y < scene.side; ++y) {
      for (std::size_t x = 0; x < scene.side; ++x) {
        if (!obj.mask.at(x, y)) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          out.at(x, y, c) = clamp_u8(bg.at(x, y, c) + rng.uniform_int(-noise_amplitude, noise_amplitude));
        }
      }
    }
  }
  return out;
}

SamplePair synthesize_change_pair(const SceneSpec& scene, const RgbImage& image,
                                  const std::vector<std::string>& classes,
                                  const std::vector<std::uint32_t>& change_ids,
                                  const std::vector<std::uint32_t>& red_herring_ids, std::string prompt,
                                  const GeneratorConfig& config) {
  if (classes.empty()) throw GenerationError("synthesize_change_pair: no prompt classes");
  auto named = [&](const ObjectInstance& o) {
    return std::find(classes.begin(), classes.end(), o.class_name) != classes.end();
  };
  SamplePair pair;
  pair.image_a = image;
  pair.prompt = std::move(prompt);
  pair.meta.classes_in_prompt = classes;
  pair.meta.change_ids = change_ids;
  pair.meta.red_herring_ids = red_herring_ids;
  pair.meta.fill_color = scene.background.base;
  std::set<std::uint32_t> seen;
  for (std::uint32_t id : change_ids) {
    const auto& o = scene.object(id);
    if (!named(o)) throw GenerationError("change object " + std::to_string(id) + " is not a prompt class");
    if (!seen.insert(id).second) throw GenerationError("duplicate object id " + std::to_string(id));
    pair.meta.removed.push_back({id, o.class_name, RemovalRole::change, o.mask, 1.0, true});
  }
  for (std::uint32_t id : red_herring_ids) {
    const auto& o = scene.object(id);
    if (named(o)) throw GenerationError("red herring " + std::to_string(id) + " is a prompt class");
    if (!seen.insert(id).second) throw GenerationError("duplicate object id " + std::to_string(id));
    pair.meta.removed.push_back({id, o.class_name, RemovalRole::red_herring, o.mask, 1.0, true});
  }
  std::vector<std::uint32_t> all_ids(seen.begin(), seen.end());
  pair.image_b = inpaint(scene, image, all_ids, config.inpaint_noise);
  pair.label = union_of(pair.meta.removed, scene.side, is_label_object);
  return pair;
}

SamplePair synthesize_change_pair(const SceneSpec& scene, const RgbImage& image,
                                  const std::vector<std::string>& classes, Rng& rng,
                                  const GeneratorConfig& config, const TemplateBank& bank) {
  if (classes.empty()) throw GenerationError("synthesize_change_pair: no prompt classes");
  std::vector<std::uint32_t> named, other;
  for (const auto& o : scene.objects) {
    const bool in = std::find(classes.begin(), classes.end(), o.class_name) != classes.end();
    (in ? named : other).push_back(o.id);
  }
  if (named.empty() && config.min_changes > 0) {
    throw GenerationError("no instance of any prompt class in scene");
  }
  const std::size_t n_change = draw_count(rng, config.min_changes, std::min(config.max_changes, named.size()));
  auto change = pick(named, n_change, rng);
  std::vector<std::uint32_t> herrings;
  if (config.red_herrings) {
    const std::size_t n_herring = draw_count(rng, 0, std::min(config.max_red_herrings, other.size()));
    herrings = pick(other, n_herring, rng);
  }
  std::string prompt = make_prompt(classes, bank, rng, config.p_raw);
  return synthesize_change_pair(scene, image, classes, change, herrings, std::move(prompt), config);
}

SamplePair synthesize_all_pair(const SceneSpec& scene, const RgbImage& image, Rng& rng,
                               const GeneratorConfig& config, const TemplateBank& bank) {
  if (scene.objects.size() < config.all_min_removals) {
    throw GenerationError("scene has " + std::to_string(scene.objects.size()) + " objects, \"all\" pairs need " +
                          std::to_string(config.all_min_removals));
  }
  std::vector<std::uint32_t> ids;
  for (const auto& o : scene.objects) ids.push_back(o.id);
  const std::size_t n = draw_count(rng, config.all_min_removals, std::min(config.all_max_removals, ids.size()));
  ids = pick(ids, n, rng);

  SamplePair pair;
  pair.image_a = image;
  pair.prompt = make_all_prompt(bank, rng);
  pair.meta.is_all = true;
  pair.meta.change_ids = ids;
  pair.meta.fill_color = scene.background.base;
  for (std::uint32_t id : ids) {
    const auto& o = scene.object(id);
    pair.meta.removed.push_back({id, o.class_name, RemovalRole::all, o.mask, 1.0, true});
  }
  pair.image_b = inpaint(scene, image, ids, config.inpaint_noise);
  pair.label = union_of(pair.meta.removed, scene.side, is_label_object);
  return pair;
}

Mask SamplePair::class_label(std::string_view name) const {
  Mask m(label.width, label.height);
  for (const auto& r : meta.removed) {
    if (!r.survived || r.class_name != name) continue;
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] |= r.mask.values[i];
  }
  return m;
}

// --- affine ----------------------------------------------------------------------

AffineParams sample_affine(Rng& rng, const GeneratorConfig& config) {
  AffineParams a;
  const double side = static_cast<double>(config.canvas);
  a.rotation_deg = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg);
  a.tx = rng.uniform(-config.max_translation, config.max_translation) * side;
  a.ty = rng.uniform(-config.max_translation, config.max_translation) * side;
  a.scale = rng.uniform(config.min_scale, config.max_scale);
  a.applied_to_b = rng.coin(0.5);
  return a;
}

RgbImage warp_image(const RgbImage& image, const AffineParams& affine, std::array<std::uint8_t, 3> fill) {
  const InverseAffine inv(affine, image.width, image.height);
  RgbImage out(image.width, image.height);
  const auto w = static_cast<double>(image.width);
  const auto h = static_cast<double>(image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      double px, py;
      inv.map(x, y, px, py);
      if (!(px >= 0.0 && px < w && py >= 0.0 && py < h)) {
        for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = fill[c];
        continue;
      }
      const double sx = px - 0.5, sy = py - 0.5;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      auto clampi = [](double v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n - 1)));
      };
      const std::size_t x0 = clampi(fx0, image.width), x1 = clampi(fx0 + 1, image.width);
      const std::size_t y0 = clampi(fy0, image.height), y1 = clampi(fy0 + 1, image.height);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = image.at(x0, y0, c) * (1 - fx) + image.at(x1, y0, c) * fx;
        const double bot = image.at(x0, y1, c) * (1 - fx) + image.at(x1, y1, c) * fx;
        out.at(x, y, c) = clamp_u8(std::lround(top * (1 - fy) + bot * fy));
      }
    }
  }
  return out;
}

Mask warp_mask(const Mask& mask, const AffineParams& affine) {
  const InverseAffine inv(affine, mask.width, mask.height);
  Mask out(mask.width, mask.height);
  const auto w = static_cast<double>(mask.width);
  const auto h = static_cast<double>(mask.height);
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      double px, py;
      inv.map(x, y, px, py);
      if (px >= 0.0 && px < w && py >= 0.0 && py < h) {
        out.at(x, y) = mask.at(static_cast<std::size_t>(px), static_cast<std::size_t>(py));
      }
    }
  }
  return out;
}

SamplePair apply_affine_and_prune(const SamplePair& pair, const AffineParams& affine, double tau_vis) {
  if (pair.meta.affine_applied) throw GenerationError("affine already applied to this pair");
  SamplePair out = pair;
  out.meta.affine = affine;
  out.meta.affine_applied = true;
  if (affine.applied_to_b) {
    out.image_b = warp_image(pair.image_b, affine, pair.meta.fill_color);
  } else {
    out.image_a = warp_image(pair.image_a, affine, pair.meta.fill_color);
  }
  const double area_scale = affine.scale * affine.scale;
  for (auto& r : out.meta.removed) {
    Mask warped = warp_mask(r.mask, affine);
    r.visible_fraction = static_cast<double>(warped.count()) / (static_cast<double>(r.mask.count()) * area_scale);
    r.survived = r.visible_fraction >= tau_vis;
    if (affine.applied_to_b) r.mask = std::move(warped);
  }
  out.label = union_of(out.meta.removed, pair.label.width, is_label_object);
  return out;
}

SamplePair apply_affine_and_prune(const SamplePair& pair, Rng& rng, const GeneratorConfig& config) {
  return apply_affine_and_prune(pair, sample_affine(rng, config), config.tau_vis);
}

GeneratedSample generate_sample(std::uint64_t seed, bool is_all, ClassBalanceLedger& ledger,
                                const GeneratorConfig& config, const PromptBanks& banks,
                                const SceneBackend& backend) {
  for (std::size_t attempt = 0; attempt < config.max_retries; ++attempt) {
    const std::uint64_t s = derive_seed(seed, attempt);
    GeneratedSample out;
    RgbImage image;
    out.scene = backend.render(s, image);
    out.attempts = attempt + 1;
    Rng rng(derive_seed(s, 1));
    if (is_all) {
      if (out.scene.objects.size() < config.all_min_removals) continue;
      out.before_affine = synthesize_all_pair(out.scene, image, rng, config, banks.all);
    } else {
      auto classes = propose_classes(out.scene, ledger, rng, config);
      out.before_affine = synthesize_change_pair(out.scene, image, classes, rng, config, banks.classes);
    }
    if (config.affine) {
      Rng arng(derive_seed(s, 2));
      out.pair = apply_affine_and_prune(out.before_affine, arng, config);
    } else {
      out.pair = out.before_affine;
    }
    return out;
  }
  throw GenerationError("no usable scene after " + std::to_string(config.max_retries) + " retries");
}

// --- datasets ----------------------------------------------------------------------

std::size_t all_pair_count(std::size_t n_pairs, double all_fraction) {
  // The epsilon keeps exact products such as 100 * 0.12 from rounding down.
  return static_cast<std::size_t>(std::floor(static_cast<double>(n_pairs) * all_fraction + 1e-9));
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  for (const auto& r : records) {
    ordered_json j{{"id", r.id},           {"image_a", r.image_a}, {"image_b", r.image_b},
                   {"label", r.label},     {"prompt", r.prompt},   {"classes", r.classes},
                   {"is_all", r.is_all},   {"split", r.split},     {"seed", r.seed}};
    if (!r.class_labels.empty()) j["class_labels"] = r.class_labels;
    out << j.dump() << '\n';
  }
  if (!out) throw ManifestError("failed writing manifest " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::filesystem::path file = path;
  if (std::filesystem::is_directory(path)) file = path / kManifestFile;
  std::ifstream in(file);
  if (!in) throw ManifestError("cannot read manifest " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ManifestRecord r;
      j.at("id").get_to(r.id);
      j.at("image_a").get_to(r.image_a);
      j.at("image_b").get_to(r.image_b);
      j.at("label").get_to(r.label);
      j.at("prompt").get_to(r.prompt);
      j.at("classes").get_to(r.classes);
      j.at("is_all").get_to(r.is_all);
      j.at("split").get_to(r.split);
      j.at("seed").get_to(r.seed);
      if (j.contains("class_labels")) j.at("class_labels").get_to(r.class_labels);
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ManifestError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

DatasetStats compute_stats(const std::vector<ManifestRecord>& records) {
  DatasetStats s;
  std::set<std::string> classes, prompts, train_classes, train_prompts, test_classes, test_prompts;
  for (const auto& r : records) {
    ++s.pairs;
    const bool train = r.split == "train";
    (train ? s.train_pairs : s.test_pairs) += 1;
    if (r.is_all) ++s.all_pairs;
    prompts.insert(r.prompt);
    (train ? train_prompts : test_prompts).insert(r.prompt);
    if (!r.is_all) ++s.classes_per_prompt[r.classes.size()];
    for (const auto& c : r.classes) {
      classes.insert(c);
      (train ? train_classes : test_classes).insert(c);
      ++s.class_histogram[c];
    }
  }
  s.all_fraction = s.pairs ? static_cast<double>(s.all_pairs) / static_cast<double>(s.pairs) : 0.0;
  s.unique_classes = classes.size();
  s.unique_prompts = prompts.size();
  for (const auto& c : test_classes) s.test_classes_unseen_in_train += !train_classes.count(c);
  for (const auto& p : test_prompts) s.test_prompts_unseen_in_train += !train_prompts.count(p);
  return s;
}

std::string to_json(const DatasetStats& s) {
  json per_prompt = json::object();
  for (const auto& [k, v] : s.classes_per_prompt) per_prompt[std::to_string(k)] = v;
  ordered_json j{{"pairs", s.pairs},
                 {"train_pairs", s.train_pairs},
                 {"test_pairs", s.test_pairs},
                 {"all_pairs", s.all_pairs},
                 {"all_fraction", s.all_fraction},
                 {"unique_classes", s.unique_classes},
                 {"unique_prompts", s.unique_prompts},
                 {"test_classes_unseen_in_train", s.test_classes_unseen_in_train},
                 {"test_prompts_unseen_in_train", s.test_prompts_unseen_in_train},
                 {"classes_per_prompt", per_prompt},
                 {"class_histogram", s.class_histogram}};
  return j.dump(2);
}

DatasetManifest generate_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir,
                                 const SampleObserver& observer) {
  if (options.n_pairs == 0) throw GenerationError("n_pairs must be at least 1");
  if (!(options.all_fraction >= 0.0 && options.all_fraction <= 1.0)) {
    throw GenerationError("all_fraction must be in [0, 1]");
  }
  if (!(options.split_ratio >= 0.0 && options.split_ratio <= 1.0)) {
    throw GenerationError("split_ratio must be in [0, 1]");
  }
  options.generator.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "labels", ec);
  if (ec) throw GenerationError("cannot create " + out_dir.string() + ": " + ec.message());

  const std::size_t n = options.n_pairs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<bool> is_all(n, false);
  {
    Rng rng(derive_seed(options.seed, 0xa11));
    auto perm = order;
    rng.shuffle(perm);
    const std::size_t n_all = all_pair_count(n, options.all_fraction);
    for (std::size_t i = 0; i < n_all; ++i) is_all[perm[i]] = true;
  }
  std::vector<bool> is_train(n, false);
  {
    Rng rng(derive_seed(options.seed, 0x5b1));
    auto perm = order;
    rng.shuffle(perm);
    const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * options.split_ratio + 1e-9));
    for (std::size_t i = 0; i < n_train; ++i) is_train[perm[i]] = true;
  }

  const PromptBanks banks = PromptBanks::from_config(options.generator);
  const ProceduralSceneBackend backend(options.generator);
  ClassBalanceLedger ledger;
  DatasetManifest manifest;
  manifest.root = out_dir;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = derive_seed(options.seed, i);
    GeneratedSample sample = generate_sample(seed, is_all[i], ledger, options.generator, banks, backend);
    const SamplePair& pair = sample.pair;
    ManifestRecord r;
    r.id = format_id(i);
    r.image_a = "images/" + r.id + "_a.png";
    r.image_b = "images/" + r.id + "_b.png";
    r.label = "labels/" + r.id + ".png";
    r.prompt = pair.prompt;
    r.classes = pair.meta.classes_in_prompt;
    r.is_all = pair.meta.is_all;
    r.split = is_train[i] ? "train" : "test";
    r.seed = seed;
    write_png(out_dir / r.image_a, pair.image_a);
    write_png(out_dir / r.image_b, pair.image_b);
    write_png(out_dir / r.label, pair.label);
    std::set<std::string> removed_classes;
    for (const auto& obj : pair.meta.removed) {
      if (obj.survived) removed_classes.insert(obj.class_name);
    }
    for (const auto& c : removed_classes) {
      const std::string rel = "labels/" + r.id + "__" + slug(c) + ".png";
      write_png(out_dir / rel, pair.class_label(c));
      r.class_labels[c] = rel;
    }
    if (observer) observer(r, sample);
    manifest.records.push_back(std::move(r));
  }
  write_manifest(out_dir / kManifestFile, manifest.records);
  {
    std::ofstream stats(out_dir / kStatsFile, std::ios::binary | std::ios::trunc);
    stats << to_json(compute_stats(manifest.records)) << '\n';
    if (!stats) throw GenerationError("cannot write " + (out_dir / kStatsFile).string());
  }
  return manifest;
}

}  // namespace viewdelta
