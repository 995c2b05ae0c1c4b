#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace aspf {

// 8-bit interleaved image, 1 (gray) or 3 (RGB) channels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  bool operator==(const Image&) const = default;
};

// Binary P5 (gray) / P6 (RGB) with maxval 255.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& image);

// Bilinear resize, corner-aligned: destination pixel i samples source
// coordinate i * (src - 1) / (dst - 1); a 1-pixel destination samples the centre.
Image resize_bilinear(const Image& src, std::size_t width, std::size_t height);

// Same sampling rule over a float plane (row-major, height x width).
std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t src_w, std::size_t src_h,
                                   std::size_t width, std::size_t height);

Image crop(const Image& src, std::size_t x, std::size_t y, std::size_t width, std::size_t height);

Image to_rgb(const Image& src);

}  // namespace aspf
