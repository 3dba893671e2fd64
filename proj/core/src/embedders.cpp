#include "viewdelta/embedders.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>

#include "viewdelta/rng.hpp"

namespace viewdelta {

std::vector<std::string> tokenize_prompt(std::string_view prompt) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < prompt.size()) {
    while (i < prompt.size() && std::isspace(static_cast<unsigned char>(prompt[i]))) ++i;
    std::size_t j = i;
    while (j < prompt.size() && !std::isspace(static_cast<unsigned char>(prompt[j]))) ++j;
    std::size_t b = i, e = j;
    while (b < e && std::ispunct(static_cast<unsigned char>(prompt[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(prompt[e - 1]))) --e;
    if (e > b) {
      std::string w(prompt.substr(b, e - b));
      for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      words.push_back(std::move(w));
    }
    i = j;
  }
  return words;
}

std::vector<double> word_vector(std::string_view word, std::size_t d_text) {
  Rng rng(mix64(fnv1a64(word)));
  std::vector<double> v(d_text);
  double norm2 = 0;
  for (auto& x : v) {
    x = rng.normal();
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

template <typename Real>
TextTokens<Real> embed_text_stub(std::string_view prompt, std::size_t t_max, std::size_t d_text) {
  if (t_max == 0 || d_text == 0) throw DimensionError("embed_text_stub: t_max and d_text must be positive");
  auto words = tokenize_prompt(prompt);
  if (words.empty()) words.emplace_back(kEmptyPromptToken);
  const std::size_t used = std::min(words.size(), t_max);
  std::vector<Real> values(t_max * d_text, Real(0));
  for (std::size_t t = 0; t < used; ++t) {
    const auto v = word_vector(words[t], d_text);
    for (std::size_t j = 0; j < d_text; ++j) values[t * d_text + j] = static_cast<Real>(v[j]);
  }
  return {Tensor<Real>::from({t_max, d_text}, std::move(values)), used};
}

std::array<double, kPatchStatCount> patch_statistics(std::span<const double> planar, std::size_t h,
                                                     std::size_t w, std::size_t y0, std::size_t x0,
                                                     std::size_t patch) {
  std::array<double, kPatchStatCount> s{};
  const double n = static_cast<double>(patch * patch);
  const double n_diff = static_cast<double>(patch * (patch - 1));
  for (std::size_t c = 0; c < 3; ++c) {
    const double* img = planar.data() + c * h * w;
    double sum = 0;
    for (std::size_t y = y0; y < y0 + patch; ++y) {
      for (std::size_t x = x0; x < x0 + patch; ++x) sum += img[y * w + x];
    }
    const double mu = sum / n;
    double var = 0, dx = 0, dy = 0;
    for (std::size_t y = y0; y < y0 + patch; ++y) {
      for (std::size_t x = x0; x < x0 + patch; ++x) {
        const double v = img[y * w + x];
        var += (v - mu) * (v - mu);
        if (x + 1 < x0 + patch) dx += std::abs(img[y * w + x + 1] - v);
        if (y + 1 < y0 + patch) dy += std::abs(img[(y + 1) * w + x] - v);
      }
    }
    s[c] = mu;
    s[3 + c] = std::sqrt(var / n);
    s[6 + c] = patch > 1 ? dx / n_diff : 0.0;
    s[9 + c] = patch > 1 ? dy / n_diff : 0.0;
  }
  return s;
}

const std::vector<double>& image_projection(std::size_t d_img) {
  static std::mutex mu;
  static std::map<std::size_t, std::vector<double>> tables;
  std::lock_guard lock(mu);
  auto it = tables.find(d_img);
  if (it == tables.end()) {
    Rng rng(0x1d0c5eedULL);
    std::vector<double> p(kPatchStatCount * d_img);
    const double scale = 1.0 / std::sqrt(static_cast<double>(kPatchStatCount));
    for (auto& v : p) v = rng.normal() * scale;
    it = tables.emplace(d_img, std::move(p)).first;
  }
  return it->second;
}

template <typename Real>
ImageTokens<Real> embed_image_stub(const RgbImage& image, std::size_t patch, std::size_t d_img) {
  if (patch == 0 || image.width % patch != 0 || image.height % patch != 0) {
    throw DimensionError("embed_image_stub: image " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + " not divisible by patch " +
                         std::to_string(patch));
  }
  if (image.width != image.height) throw DimensionError("embed_image_stub: image must be square");
  const std::size_t g = image.width / patch;
  const auto planar = to_planar<double>(image);
  const auto& proj = image_projection(d_img);
  std::vector<Real> values(g * g * d_img);
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      const auto stats = patch_statistics(planar, image.height, image.width, gy * patch, gx * patch, patch);
      Real* dst = values.data() + (gy * g + gx) * d_img;
      for (std::size_t j = 0; j < d_img; ++j) {
        double acc = 0;
        for (std::size_t s = 0; s < kPatchStatCount; ++s) acc += stats[s] * proj[s * d_img + j];
        dst[j] = static_cast<Real>(acc);
      }
    }
  }
  return {Tensor<Real>::from({g, g, d_img}, std::move(values)), sha256(image.pixels)};
}

std::string text_embedder_id(std::size_t t_max, std::size_t d_text) {
  return "stub-text/v1/t" + std::to_string(t_max) + "/d" + std::to_string(d_text);
}

std::string image_embedder_id(std::size_t patch, std::size_t d_img) {
  return "stub-image/v1/p" + std::to_string(patch) + "/d" + std::to_string(d_img);
}

// --- cache -----------------------------------------------------------------

Digest cache_key(const Digest& content, std::string_view embedder_id) {
  std::vector<std::uint8_t> bytes(content.begin(), content.end());
  bytes.insert(bytes.end(), embedder_id.begin(), embedder_id.end());
  return sha256(bytes);
}

namespace {

constexpr char kMagic[4] = {'V', 'D', 'E', 'C'};

template <typename Real>
constexpr std::uint8_t dtype_code() {
  return sizeof(Real) == 4 ? 1 : 2;
}

std::string_view dtype_name(std::uint8_t code) {
  return code == 1 ? "f32" : code == 2 ? "f64" : "unknown";
}

// Advisory whole-file lock held on a sidecar file.
class FileLock {
 public:
  FileLock(const std::filesystem::path& target, bool exclusive) {
    const auto lock_path = target.string() + ".lock";
    fd_ = ::open(lock_path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ >= 0) ::flock(fd_, exclusive ? LOCK_EX : LOCK_SH);
  }
  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename Word>
Word get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(Word) > in.size()) throw CacheFormatError("embedding cache truncated");
  Word v = 0;
  for (std::size_t i = 0; i < sizeof(Word); ++i) {
    v |= static_cast<Word>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(Word);
  return v;
}

template <typename Real>
void put_real(std::string& out, Real v) {
  using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
  Bits bits;
  std::memcpy(&bits, &v, sizeof(Real));
  if constexpr (sizeof(Real) == 4) put_u32(out, bits); else put_u64(out, bits);
}

template <typename Real>
Real get_real(const std::string& in, std::size_t& pos) {
  using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
  const Bits bits = get_le<Bits>(in, pos);
  Real v;
  std::memcpy(&v, &bits, sizeof(Real));
  return v;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Validates the header and returns the dtype code; pos is left after it.
std::uint8_t check_header(const std::string& bytes, std::size_t& pos) {
  if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CacheFormatError("embedding cache: bad magic (expected VDEC)");
  }
  pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCacheVersion) {
    throw CacheFormatError("embedding cache version " + std::to_string(version) +
                           " unsupported (expected " + std::to_string(kCacheVersion) + ")");
  }
  const auto code = static_cast<std::uint8_t>(bytes[pos++]);
  if (code != 1 && code != 2) throw CacheFormatError("embedding cache: unknown dtype code " + std::to_string(code));
  return code;
}

}  // namespace

template <typename Real>
void cache_store(const std::filesystem::path& path, const Digest& key, const Tensor<Real>& tokens) {
  FileLock lock(path, true);
  std::string out;
  if (std::filesystem::exists(path) && std::filesystem::file_size(path) > 0) {
    const std::string existing = read_all(path);
    std::size_t pos = 0;
    const auto code = check_header(existing, pos);
    if (code != dtype_code<Real>()) {
      throw CacheFormatError("embedding cache holds " + std::string(dtype_name(code)) +
                             " data, cannot store " + std::string(dtype_name(dtype_code<Real>())));
    }
  } else {
    out.append(kMagic, 4);
    put_u32(out, kCacheVersion);
    out.push_back(static_cast<char>(dtype_code<Real>()));
  }
  std::string record(reinterpret_cast<const char*>(key.data()), key.size());
  put_u32(record, static_cast<std::uint32_t>(tokens.rank()));
  for (std::size_t e : tokens.shape()) put_u64(record, e);
  for (Real v : tokens.data()) put_real(record, v);
  put_u64(out, record.size());
  out += record;
  std::ofstream file(path, std::ios::binary | std::ios::app);
  if (!file) throw std::runtime_error("cannot open embedding cache " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("failed writing embedding cache " + path.string());
}

template <typename Real>
std::optional<Tensor<Real>> cache_load(const std::filesystem::path& path, const Digest& key) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  FileLock lock(path, false);
  const std::string bytes = read_all(path);
  std::size_t pos = 0;
  const auto code = check_header(bytes, pos);
  if (code != dtype_code<Real>()) {
    throw CacheFormatError("embedding cache holds " + std::string(dtype_name(code)) + " data, requested " +
                           std::string(dtype_name(dtype_code<Real>())));
  }
  std::optional<Tensor<Real>> found;
  while (pos < bytes.size()) {
    const auto length = get_le<std::uint64_t>(bytes, pos);
    const std::size_t end = pos + length;
    if (end > bytes.size() || length < key.size() + 4) throw CacheFormatError("embedding cache record truncated");
    const bool match = std::memcmp(bytes.data() + pos, key.data(), key.size()) == 0;
    if (match) {
      std::size_t p = pos + key.size();
      const auto rank = get_le<std::uint32_t>(bytes, p);
      Shape shape(rank);
      for (auto& e : shape) e = get_le<std::uint64_t>(bytes, p);
      const std::size_t n = shape_numel(shape);
      if (p + n * sizeof(Real) != end) throw CacheFormatError("embedding cache record length mismatch");
      std::vector<Real> values(n);
      for (auto& v : values) v = get_real<Real>(bytes, p);
      found = Tensor<Real>::from(std::move(shape), std::move(values));
    }
    pos = end;
  }
  return found;
}

template TextTokens<float> embed_text_stub<float>(std::string_view, std::size_t, std::size_t);
template TextTokens<double> embed_text_stub<double>(std::string_view, std::size_t, std::size_t);
template ImageTokens<float> embed_image_stub<float>(const RgbImage&, std::size_t, std::size_t);
template ImageTokens<double> embed_image_stub<double>(const RgbImage&, std::size_t, std::size_t);
template void cache_store<float>(const std::filesystem::path&, const Digest&, const Tensor<float>&);
template void cache_store<double>(const std::filesystem::path&, const Digest&, const Tensor<double>&);
template std::optional<Tensor<float>> cache_load<float>(const std::filesystem::path&, const Digest&);
template std::optional<Tensor<double>> cache_load<double>(const std::filesystem::path&, const Digest&);

}  // namespace viewdelta
