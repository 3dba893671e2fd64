#include "viewdelta/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "viewdelta/ops.hpp"
#include "viewdelta/rng.hpp"

namespace viewdelta {

using nlohmann::json;

// --- config -----------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](const char* field, std::size_t v) {
    if (v == 0) throw ConfigError(field, "must be positive");
  };
  positive("image_side", image_side);
  positive("patch", patch);
  positive("d_img", d_img);
  positive("d_model", d_model);
  positive("heads", heads);
  positive("mlp_dim", mlp_dim);
  positive("head_channels", head_channels);
  if (image_side % patch != 0) {
    throw ConfigError("patch", "image_side " + std::to_string(image_side) + " not divisible by patch " +
                                   std::to_string(patch));
  }
  if (image_side % (2 * grid()) != 0) {
    throw ConfigError("image_side", "head needs image_side divisible by 2*grid = " + std::to_string(2 * grid()));
  }
  if (d_model % heads != 0) {
    throw ConfigError("heads", "d_model " + std::to_string(d_model) + " not divisible by heads " +
                                   std::to_string(heads));
  }
  if (use_sqt && n_sqt != grid() * grid()) {
    throw ConfigError("n_sqt", "must equal grid^2 = " + std::to_string(grid() * grid()));
  }
  if (use_prompts) {
    positive("t_max", t_max);
    positive("d_text", d_text);
  }
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold", "must lie in (0, 1)");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.image_side = 16;
  c.patch = 4;
  c.d_text = 8;
  c.d_img = 8;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.mlp_dim = 32;
  c.n_sqt = 16;
  c.t_max = 4;
  c.head_channels = 4;
  return c;
}

namespace {

json config_json(const ModelConfig& c) {
  return json{{"image_side", c.image_side},
              {"patch", c.patch},
              {"d_text", c.d_text},
              {"d_img", c.d_img},
              {"d_model", c.d_model},
              {"layers", c.layers},
              {"heads", c.heads},
              {"mlp_dim", c.mlp_dim},
              {"n_sqt", c.n_sqt},
              {"t_max", c.t_max},
              {"head_channels", c.head_channels},
              {"use_frozen_image_embedder", c.use_frozen_image_embedder},
              {"use_sqt", c.use_sqt},
              {"use_prompts", c.use_prompts},
              {"threshold", c.threshold}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  const json defaults = config_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) throw ConfigError(it.key(), "unknown model field");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ConfigError(key, e.what());
    }
  };
  get("image_side", c.image_side);
  get("patch", c.patch);
  get("d_text", c.d_text);
  get("d_img", c.d_img);
  get("d_model", c.d_model);
  get("layers", c.layers);
  get("heads", c.heads);
  get("mlp_dim", c.mlp_dim);
  get("n_sqt", c.n_sqt);
  get("t_max", c.t_max);
  get("head_channels", c.head_channels);
  get("use_frozen_image_embedder", c.use_frozen_image_embedder);
  get("use_sqt", c.use_sqt);
  get("use_prompts", c.use_prompts);
  get("threshold", c.threshold);
  return c;
}

}  // namespace

std::string to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig model_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("model", e.what());
  }
  return config_from(j);
}

SegmentLayout SegmentLayout::of(const ModelConfig& c) {
  SegmentLayout s;
  const std::size_t g2 = c.grid() * c.grid();
  s.image_a_begin = 0;
  s.image_a_len = g2;
  s.image_b_begin = g2;
  s.image_b_len = g2;
  s.text_begin = 2 * g2;
  s.text_len = c.text_len();
  s.sqt_begin = s.text_begin + s.text_len;
  s.sqt_len = c.sqt_len();
  s.length = s.sqt_begin + s.sqt_len;
  return s;
}

// --- parameters ---------------------------------------------------------------

namespace {

template <typename Real>
Tensor<Real> uniform_param(Rng& rng, Shape shape, double bound) {
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor<Real>::from(std::move(shape), std::move(v), true);
}

template <typename Real>
Tensor<Real> normal_param(Rng& rng, Shape shape, double stddev) {
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.normal() * stddev);
  return Tensor<Real>::from(std::move(shape), std::move(v), true);
}

template <typename Real>
Tensor<Real> const_param(Shape shape, Real value) {
  return Tensor<Real>::full(std::move(shape), value, true);
}

}  // namespace

template <typename Real>
ModelParams<Real> ModelParams<Real>::init(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(derive_seed(seed, 0x9a7a));
  ModelParams p;
  const std::size_t d = c.d_model;
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    p.add(name + ".w", uniform_param<Real>(rng, {in, out}, bound));
    p.add(name + ".b", const_param<Real>({out}, Real(0)));
  };
  auto conv = [&](const std::string& name, std::size_t c_out, std::size_t c_in, std::size_t k,
                  std::size_t fan_in, std::size_t bias_len) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    p.add(name + ".w", uniform_param<Real>(rng, {c_out, c_in, k, k}, bound));
    p.add(name + ".b", const_param<Real>({bias_len}, Real(0)));
  };
  auto norm = [&](const std::string& name) {
    p.add(name + ".g", const_param<Real>({d}, Real(1)));
    p.add(name + ".b", const_param<Real>({d}, Real(0)));
  };

  if (c.use_frozen_image_embedder) {
    linear("embed.image", c.d_img, d);
  } else {
    linear("embed.patch", 3 * c.patch * c.patch, d);
  }
  if (c.use_prompts) linear("embed.text", c.d_text, d);
  if (c.use_sqt) p.add("sqt", normal_param<Real>(rng, {c.n_sqt, d}, 0.02));
  p.add("pos", normal_param<Real>(rng, {c.seq_len(), d}, 0.02));
  linear("token_mlp.fc1", d, d);
  linear("token_mlp.fc2", d, d);
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string b = "blocks." + std::to_string(i);
    norm(b + ".ln1");
    linear(b + ".attn.q", d, d);
    linear(b + ".attn.k", d, d);
    linear(b + ".attn.v", d, d);
    linear(b + ".attn.out", d, d);
    norm(b + ".ln2");
    linear(b + ".mlp.fc1", d, c.mlp_dim);
    linear(b + ".mlp.fc2", c.mlp_dim, d);
  }
  norm("final_ln");
  const std::size_t head_in = c.use_sqt ? d : 2 * d;
  const std::size_t ch = c.head_channels;
  conv("head.conv1", ch, head_in, 3, head_in * 9, ch);
  // Transposed-conv kernels are [c_src, c_dst, k, k]; each output sees c_src * k*k / stride^2 taps.
  conv("head.up", ch, ch, 2, ch, ch);
  conv("head.conv2", ch, ch, 3, ch * 9, ch);
  conv("head.out", 1, ch, 1, ch, 1);
  return p;
}

template <typename Real>
const Tensor<Real>& ModelParams<Real>::at(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

template <typename Real>
Tensor<Real>& ModelParams<Real>::at(std::string_view name) {
  return const_cast<Tensor<Real>&>(std::as_const(*this).at(name));
}

template <typename Real>
bool ModelParams<Real>::contains(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

template <typename Real>
std::size_t ModelParams<Real>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <typename Real>
void ModelParams<Real>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

// --- model ----------------------------------------------------------------------

template <typename Real>
Tensor<Real> patchify(const Tensor<Real>& planar, std::size_t patch) {
  if (planar.rank() != 3 || planar.dim(0) != 3 || planar.dim(1) % patch != 0 ||
      planar.dim(2) % patch != 0 || planar.dim(1) != planar.dim(2)) {
    throw DimensionError("patchify: expected square [3,h,w] divisible by " + std::to_string(patch) +
                         ", got " + shape_str(planar.shape()));
  }
  const std::size_t side = planar.dim(1), g = side / patch, width = 3 * patch * patch;
  std::vector<Real> out(g * g * width);
  const auto in = planar.data();
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      Real* dst = out.data() + (gy * g + gx) * width;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < patch; ++y) {
          for (std::size_t x = 0; x < patch; ++x) {
            *dst++ = in[(c * side + gy * patch + y) * side + gx * patch + x];
          }
        }
      }
    }
  }
  // Pixels never require gradients, so this is a constant of the graph.
  return Tensor<Real>::from({g * g, width}, std::move(out));
}

template <typename Real>
ViewDeltaModel<Real>::ViewDeltaModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), params_(ModelParams<Real>::init(config_, seed)) {}

template <typename Real>
ViewDeltaModel<Real>::ViewDeltaModel(ModelConfig config, ModelParams<Real> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
}

template <typename Real>
ModelInput<Real> ViewDeltaModel<Real>::prepare(const RgbImage& image_a, const RgbImage& image_b,
                                               std::string_view prompt) const {
  const std::size_t side = config_.image_side;
  for (const RgbImage* im : {&image_a, &image_b}) {
    if (im->width != side || im->height != side) {
      throw DimensionError("image is " + std::to_string(im->width) + "x" + std::to_string(im->height) +
                           ", model expects " + std::to_string(side) + "x" + std::to_string(side));
    }
  }
  ModelInput<Real> in;
  if (config_.use_frozen_image_embedder) {
    in.image_a = embed_image_stub<Real>(image_a, config_.patch, config_.d_img).grid;
    in.image_b = embed_image_stub<Real>(image_b, config_.patch, config_.d_img).grid;
  } else {
    in.image_a = Tensor<Real>::from({3, side, side}, to_planar<Real>(image_a));
    in.image_b = Tensor<Real>::from({3, side, side}, to_planar<Real>(image_b));
  }
  if (config_.use_prompts) in.text = embed_text_stub<Real>(prompt, config_.t_max, config_.d_text).tokens;
  return in;
}

template <typename Real>
Tensor<Real> ViewDeltaModel<Real>::embed_images(const Tensor<Real>& image) const {
  const std::size_t g = config_.grid();
  if (config_.use_frozen_image_embedder) {
    if (image.shape() != Shape{g, g, config_.d_img}) {
      throw DimensionError("image tokens " + shape_str(image.shape()) + ", expected " +
                           shape_str({g, g, config_.d_img}));
    }
    const auto flat = ops::reshape(image, {g * g, config_.d_img});
    return ops::linear(flat, params_.at("embed.image.w"), params_.at("embed.image.b"));
  }
  const auto patches = patchify(image, config_.patch);
  if (patches.dim(0) != g * g) throw DimensionError("raw image does not match image_side");
  return ops::linear(patches, params_.at("embed.patch.w"), params_.at("embed.patch.b"));
}

template <typename Real>
TokenSequence<Real> ViewDeltaModel<Real>::assemble_sequence(const ModelInput<Real>& input,
                                                            ForwardTrace<Real>* trace) const {
  std::vector<Tensor<Real>> parts{embed_images(input.image_a), embed_images(input.image_b)};
  if (config_.use_prompts) {
    if (!input.text.defined() || input.text.shape() != Shape{config_.t_max, config_.d_text}) {
      throw DimensionError("text tokens must be " + shape_str({config_.t_max, config_.d_text}));
    }
    parts.push_back(ops::linear(input.text, params_.at("embed.text.w"), params_.at("embed.text.b")));
  }
  if (config_.use_sqt) parts.push_back(params_.at("sqt"));
  auto x = ops::concat(parts);
  const auto layout = SegmentLayout::of(config_);
  if (x.dim(0) != layout.length) throw DimensionError("assembled sequence length mismatch");
  if (trace) trace->concatenated = x;
  x = ops::add(x, params_.at("pos"));
  x = ops::linear(x, params_.at("token_mlp.fc1.w"), params_.at("token_mlp.fc1.b"));
  x = ops::gelu(x);
  x = ops::linear(x, params_.at("token_mlp.fc2.w"), params_.at("token_mlp.fc2.b"));
  if (trace) {
    trace->layout = layout;
    trace->assembled = x;
  }
  return {x, layout};
}

template <typename Real>
Tensor<Real> ViewDeltaModel<Real>::backbone(const Tensor<Real>& input) const {
  constexpr Real kEps = Real(1e-5);
  auto x = input;
  for (std::size_t i = 0; i < config_.layers; ++i) {
    const std::string b = "blocks." + std::to_string(i);
    auto p = [&](const char* suffix) -> const Tensor<Real>& { return params_.at(b + suffix); };
    auto h = ops::layer_norm(x, p(".ln1.g"), p(".ln1.b"), kEps);
    const auto q = ops::linear(h, p(".attn.q.w"), p(".attn.q.b"));
    const auto k = ops::linear(h, p(".attn.k.w"), p(".attn.k.b"));
    const auto v = ops::linear(h, p(".attn.v.w"), p(".attn.v.b"));
    h = ops::attention(q, k, v, config_.heads);
    x = ops::add(x, ops::linear(h, p(".attn.out.w"), p(".attn.out.b")));
    h = ops::layer_norm(x, p(".ln2.g"), p(".ln2.b"), kEps);
    h = ops::gelu(ops::linear(h, p(".mlp.fc1.w"), p(".mlp.fc1.b")));
    x = ops::add(x, ops::linear(h, p(".mlp.fc2.w"), p(".mlp.fc2.b")));
  }
  return ops::layer_norm(x, params_.at("final_ln.g"), params_.at("final_ln.b"), kEps);
}

// [g*g, d] token rows (row-major grid) -> [d, g, g] feature map.
template <typename Real>
Tensor<Real> ViewDeltaModel<Real>::grid_from_tokens(const Tensor<Real>& tokens) const {
  const std::size_t g = config_.grid();
  return ops::reshape(ops::transpose(tokens), {tokens.dim(1), g, g});
}

template <typename Real>
Tensor<Real> ViewDeltaModel<Real>::seg_head(const Tensor<Real>& grid) const {
  const std::size_t g = config_.grid();
  const std::size_t in_channels = config_.use_sqt ? config_.d_model : 2 * config_.d_model;
  if (grid.shape() != Shape{in_channels, g, g}) {
    throw DimensionError("seg_head: input " + shape_str(grid.shape()) + ", expected " +
                         shape_str({in_channels, g, g}));
  }
  if (g * 2 * config_.upsample_factor() != config_.image_side) {
    throw DimensionError("seg_head: grid " + std::to_string(g) + " cannot reach image side " +
                         std::to_string(config_.image_side));
  }
  auto p = [&](const char* name) { return std::optional<Tensor<Real>>(params_.at(name)); };
  auto x = ops::relu(ops::conv2d(grid, params_.at("head.conv1.w"), p("head.conv1.b"), 1, 1));
  x = ops::relu(ops::conv_transpose2d(x, params_.at("head.up.w"), p("head.up.b"), 2, 0));
  x = ops::relu(ops::conv2d(x, params_.at("head.conv2.w"), p("head.conv2.b"), 1, 1));
  x = ops::bilinear_upsample(x, config_.upsample_factor());
  return ops::conv2d(x, params_.at("head.out.w"), p("head.out.b"), 1, 0);
}

template <typename Real>
Tensor<Real> ViewDeltaModel<Real>::run(const ModelInput<Real>& input, ForwardTrace<Real>* trace) const {
  const auto seq = assemble_sequence(input, trace);
  const auto x = backbone(seq.tokens);
  if (trace) trace->backbone_out = x;
  const auto& l = seq.layout;
  Tensor<Real> grid;
  if (config_.use_sqt) {
    // Segmentation query tokens are the trailing n_sqt rows.
    grid = grid_from_tokens(ops::slice(x, l.length - l.sqt_len, l.length));
  } else {
    grid = ops::concat<Real>(
        {grid_from_tokens(ops::slice(x, l.image_a_begin, l.image_a_begin + l.image_a_len)),
         grid_from_tokens(ops::slice(x, l.image_b_begin, l.image_b_begin + l.image_b_len))});
  }
  if (trace) trace->head_input = grid;
  return seg_head(grid);
}

template <typename Real>
Tensor<Real> ViewDeltaModel<Real>::forward(const ModelInput<Real>& input, ForwardTrace<Real>* trace) const {
  return run(input, trace);
}

template <typename Real>
Tensor<Real> ViewDeltaModel<Real>::forward_no_sqt(const ModelInput<Real>& input,
                                                  ForwardTrace<Real>* trace) const {
  if (config_.use_sqt) throw ConfigError("use_sqt", "forward_no_sqt requires use_sqt = false");
  return run(input, trace);
}

template <typename Real>
Tensor<Real> ViewDeltaModel<Real>::forward_patch_embed(const ModelInput<Real>& input,
                                                       ForwardTrace<Real>* trace) const {
  if (config_.use_frozen_image_embedder) {
    throw ConfigError("use_frozen_image_embedder", "forward_patch_embed requires a trainable patch embedding");
  }
  return run(input, trace);
}

template <typename Real>
Mask ViewDeltaModel<Real>::binarize(const Tensor<Real>& logits) const {
  const std::size_t side = config_.image_side;
  if (logits.shape() != Shape{1, side, side}) {
    throw DimensionError("binarize: logits " + shape_str(logits.shape()));
  }
  // p > t  <=>  z > log(t / (1 - t))
  const double cut = std::log(config_.threshold / (1.0 - config_.threshold));
  Mask m(side, side);
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = logits.data()[i] > cut ? 1 : 0;
  return m;
}

// --- checkpoints -----------------------------------------------------------------

namespace {

template <typename Real>
std::string dtype_of() {
  return sizeof(Real) == 4 ? "f32" : "f64";
}

json read_header(std::ifstream& in, const std::filesystem::path& path) {
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(path.string() + ": empty checkpoint");
  try {
    json header = json::parse(line);
    if (header.value("format", "") != "viewdelta-checkpoint") {
      throw CheckpointError(path.string() + ": not a viewdelta checkpoint");
    }
    if (header.value("version", 0) != 1) {
      throw CheckpointError(path.string() + ": unsupported checkpoint version " +
                            std::to_string(header.value("version", 0)));
    }
    return header;
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  }
}

template <typename Stored, typename Real>
void decode(const std::string& raw, std::size_t offset, std::span<Real> dst) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    using Bits = std::conditional_t<sizeof(Stored) == 4, std::uint32_t, std::uint64_t>;
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(Stored); ++b) {
      bits |= static_cast<Bits>(static_cast<unsigned char>(raw[offset + i * sizeof(Stored) + b])) << (8 * b);
    }
    Stored v;
    std::memcpy(&v, &bits, sizeof(Stored));
    dst[i] = static_cast<Real>(v);
  }
}

}  // namespace

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const ViewDeltaModel<Real>& model,
                     std::uint64_t seed, std::uint64_t step) {
  json params = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : model.params().entries()) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(Real);
  }
  const json header{{"format", "viewdelta-checkpoint"},
                    {"version", 1},
                    {"dtype", dtype_of<Real>()},
                    {"config", config_json(model.config())},
                    {"seed", seed},
                    {"step", step},
                    {"data_bytes", offset},
                    {"params", params}};
  std::string blob = header.dump();
  blob.push_back('\n');
  blob.reserve(blob.size() + offset);
  for (const auto& entry : model.params().entries()) {
    for (Real v : entry.second.data()) {
      using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
      Bits bits;
      std::memcpy(&bits, &v, sizeof(Real));
      for (std::size_t b = 0; b < sizeof(Real); ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const json header = read_header(in, path);
  CheckpointInfo info;
  info.config = config_from(header.at("config"));
  info.seed = header.value("seed", std::uint64_t{0});
  info.step = header.value("step", std::uint64_t{0});
  info.dtype = header.value("dtype", "");
  return info;
}

template <typename Real>
ViewDeltaModel<Real> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const json header = read_header(in, path);
  CheckpointInfo info;
  try {
    info.config = config_from(header.at("config"));
    info.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": invalid config: " + e.what());
  }
  info.seed = header.value("seed", std::uint64_t{0});
  info.step = header.value("step", std::uint64_t{0});
  info.dtype = header.value("dtype", "");
  if (info.dtype != "f32" && info.dtype != "f64") throw CheckpointError(path.string() + ": unknown dtype " + info.dtype);
  const std::size_t width = info.dtype == "f32" ? 4 : 8;
  const std::string raw{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (raw.size() != header.value("data_bytes", std::size_t{0})) {
    throw CheckpointError(path.string() + ": data section is " + std::to_string(raw.size()) +
                          " bytes, header says " + std::to_string(header.value("data_bytes", 0)));
  }

  // Start from the expected layout so every stored shape is checked.
  auto params = ModelParams<Real>::init(info.config, 0);
  const auto& stored = header.at("params");
  if (stored.size() != params.entries().size()) {
    throw CheckpointError(path.string() + ": holds " + std::to_string(stored.size()) + " parameters, config needs " +
                          std::to_string(params.entries().size()));
  }
  for (std::size_t i = 0; i < stored.size(); ++i) {
    auto& [name, tensor] = params.entries()[i];
    const std::string stored_name = stored[i].at("name");
    const Shape stored_shape = stored[i].at("shape").get<Shape>();
    if (stored_name != name) throw CheckpointError(path.string() + ": expected parameter " + name + ", found " + stored_name);
    if (stored_shape != tensor.shape()) {
      throw CheckpointError(path.string() + ": parameter " + name + " has shape " + shape_str(stored_shape) +
                            ", config implies " + shape_str(tensor.shape()));
    }
    const std::size_t offset = stored[i].at("offset");
    if (offset + tensor.numel() * width > raw.size()) throw CheckpointError(path.string() + ": parameter " + name + " out of bounds");
    if (width == 4) {
      decode<float>(raw, offset, tensor.mutable_data());
    } else {
      decode<double>(raw, offset, tensor.mutable_data());
    }
  }
  if (info_out) *info_out = info;
  return ViewDeltaModel<Real>(info.config, std::move(params));
}

template class ModelParams<float>;
template class ModelParams<double>;
template class ViewDeltaModel<float>;
template class ViewDeltaModel<double>;
template Tensor<float> patchify(const Tensor<float>&, std::size_t);
template Tensor<double> patchify(const Tensor<double>&, std::size_t);
template void save_checkpoint(const std::filesystem::path&, const ViewDeltaModel<float>&, std::uint64_t, std::uint64_t);
template void save_checkpoint(const std::filesystem::path&, const ViewDeltaModel<double>&, std::uint64_t, std::uint64_t);
template ViewDeltaModel<float> load_checkpoint(const std::filesystem::path&, CheckpointInfo*);
template ViewDeltaModel<double> load_checkpoint(const std::filesystem::path&, CheckpointInfo*);

}  // namespace viewdelta
