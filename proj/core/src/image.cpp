#include "viewdelta/image.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <cstdio>
#include <memory>

namespace viewdelta {

Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size()) {
    throw std::runtime_error("sha256 failed");
  }
  return out;
}

Digest sha256(std::string_view text) {
  return sha256(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string to_hex(const Digest& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (std::uint8_t b : digest) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 15]);
  }
  return out;
}

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto v : values) n += v != 0;
  return n;
}

Mask mask_union(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("mask_union: size mismatch");
  Mask out(a.width, a.height);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = (a.values[i] | b.values[i]) ? 1 : 0;
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_rows(const std::filesystem::path& path, std::size_t width, std::size_t height,
                    int color_type, const std::uint8_t* data, std::size_t stride) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageIoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct Decoded {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> data;
};

Decoded read_png_any(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageIoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("failed reading " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  Decoded out;
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.data.resize(stride * out.height);
  for (std::size_t y = 0; y < out.height; ++y) png_read_row(png, out.data.data() + y * stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  write_png_rows(path, image.width, image.height, PNG_COLOR_TYPE_RGB, image.pixels.data(), image.width * 3);
}

void write_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> gray(mask.values.size());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = mask.values[i] ? 255 : 0;
  write_png_rows(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, gray.data(), mask.width);
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
  Decoded d = read_png_any(path);
  RgbImage image(d.width, d.height);
  for (std::size_t i = 0; i < d.width * d.height; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      image.pixels[i * 3 + c] = d.channels >= 3 ? d.data[i * d.channels + c] : d.data[i * d.channels];
    }
  }
  return image;
}

Mask read_png_mask(const std::filesystem::path& path, bool strict) {
  Decoded d = read_png_any(path);
  Mask mask(d.width, d.height);
  for (std::size_t i = 0; i < d.width * d.height; ++i) {
    const std::uint8_t v = d.data[i * d.channels];
    if (strict && v != 0 && v != 255) {
      throw ImageIoError(path.string() + ": label value " + std::to_string(v) + " is not 0 or 255");
    }
    mask.values[i] = v ? 1 : 0;
  }
  return mask;
}

}  // namespace viewdelta
