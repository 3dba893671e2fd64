#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace viewdelta {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);
Digest sha256(std::string_view text);
std::string to_hex(const Digest& digest);

/// 8-bit RGB image, interleaved, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Single-channel binary mask; values are 0 or 1 in memory.
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(std::size_t w, std::size_t h) : width(w), height(h), values(w * h, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

Mask mask_union(const Mask& a, const Mask& b);

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_png(const std::filesystem::path& path, const RgbImage& image);
/// Labels are written as 8-bit grayscale with 0 -> 0 and 1 -> 255.
void write_png(const std::filesystem::path& path, const Mask& mask);
RgbImage read_png_rgb(const std::filesystem::path& path);
/// Reads an 8-bit grayscale label; any nonzero value becomes 1. Values other
/// than 0/255 are rejected when `strict` is set.
Mask read_png_mask(const std::filesystem::path& path, bool strict = true);

/// Planar [3, h, w] copy scaled to [0, 1].
template <typename Real>
std::vector<Real> to_planar(const RgbImage& image) {
  const std::size_t plane = image.width * image.height;
  std::vector<Real> out(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      out[c * plane + i] = static_cast<Real>(image.pixels[i * 3 + c]) / Real(255);
    }
  }
  return out;
}

}  // namespace viewdelta
