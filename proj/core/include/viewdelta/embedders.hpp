#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "viewdelta/image.hpp"
#include "viewdelta/tensor.hpp"

namespace viewdelta {

/// Frozen text encoder output: [t_max, d_text], rows past valid_len are zero.
template <typename Real>
struct TextTokens {
  Tensor<Real> tokens;
  std::size_t valid_len = 0;
};

/// Frozen image encoder output: [g, g, d_img] patch grid.
template <typename Real>
struct ImageTokens {
  Tensor<Real> grid;
  Digest source_hash{};
};

/// Lower-cased words of a prompt. Splits on whitespace and strips ASCII
/// punctuation from both ends of each word, so "disk," and "disk" coincide.
std::vector<std::string> tokenize_prompt(std::string_view prompt);

/// Token used for prompts with no words.
inline constexpr std::string_view kEmptyPromptToken = "\x01<empty>";

/// Unit-norm pseudo-random vector seeded by a 64-bit hash of the word. Two
/// distinct words collide with probability about 2^-64 per pair.
std::vector<double> word_vector(std::string_view word, std::size_t d_text);

template <typename Real>
TextTokens<Real> embed_text_stub(std::string_view prompt, std::size_t t_max, std::size_t d_text);

inline constexpr std::size_t kPatchStatCount = 12;

/// Per-channel mean, std, mean |horizontal diff|, mean |vertical diff| of one
/// patch of a planar [3,h,w] image in [0,1]. Layout: 3 means, 3 stds, 3 dx, 3 dy.
std::array<double, kPatchStatCount> patch_statistics(std::span<const double> planar, std::size_t h,
                                                     std::size_t w, std::size_t y0, std::size_t x0,
                                                     std::size_t patch);

/// Fixed [12, d_img] projection used by the image stub.
const std::vector<double>& image_projection(std::size_t d_img);

template <typename Real>
ImageTokens<Real> embed_image_stub(const RgbImage& image, std::size_t patch, std::size_t d_img);

std::string text_embedder_id(std::size_t t_max, std::size_t d_text);
std::string image_embedder_id(std::size_t patch, std::size_t d_img);

// --- embedding cache ---------------------------------------------------------

class CacheFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCacheVersion = 1;

/// Key = SHA-256(content digest || embedder id), so entries from different
/// embedders never alias.
Digest cache_key(const Digest& content, std::string_view embedder_id);

/// Appends one record. Creates the file (with header) if missing. The file's
/// dtype must match Real.
template <typename Real>
void cache_store(const std::filesystem::path& path, const Digest& key, const Tensor<Real>& tokens);

/// Latest record for `key`, or nullopt when absent (including a missing file).
template <typename Real>
std::optional<Tensor<Real>> cache_load(const std::filesystem::path& path, const Digest& key);

}  // namespace viewdelta
