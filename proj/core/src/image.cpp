#include "aspf/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "aspf/error.hpp"

namespace aspf {

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in, const std::filesystem::path& path) {
  std::string token;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) return token;
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  if (token.empty()) throw Error(ErrorCode::kImageFormat, path.string() + ": truncated header");
  return token;
}

std::size_t parse_extent(const std::string& token, const std::filesystem::path& path) {
  std::size_t value = 0;
  try {
    std::size_t used = 0;
    value = std::stoul(token, &used);
    if (used != token.size()) throw std::invalid_argument(token);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kImageFormat, path.string() + ": bad header field '" + token + "'");
  }
  return value;
}

double sample_coord(std::size_t i, std::size_t src, std::size_t dst) {
  if (dst == 1) return (static_cast<double>(src) - 1.0) / 2.0;
  return static_cast<double>(i) * (static_cast<double>(src) - 1.0) / (static_cast<double>(dst) - 1.0);
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  const std::string magic = next_token(in, path);
  std::size_t channels;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw Error(ErrorCode::kImageFormat, path.string() + ": unsupported magic '" + magic + "'");
  }
  const std::size_t width = parse_extent(next_token(in, path), path);
  const std::size_t height = parse_extent(next_token(in, path), path);
  const std::size_t maxval = parse_extent(next_token(in, path), path);
  if (width == 0 || height == 0 || width > 65536 || height > 65536) {
    throw Error(ErrorCode::kImageFormat, path.string() + ": bad dimensions");
  }
  if (maxval != 255) throw Error(ErrorCode::kImageFormat, path.string() + ": only maxval 255 is supported");
  Image image(width, height, channels);
  in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != image.pixels.size()) {
    throw Error(ErrorCode::kImageFormat, path.string() + ": truncated pixel data");
  }
  return image;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw Error(ErrorCode::kImageFormat, "only 1- or 3-channel images can be written");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t src_w, std::size_t src_h,
                                   std::size_t width, std::size_t height) {
  std::vector<float> out(width * height);
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = sample_coord(y, src_h, height);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, src_h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = sample_coord(x, src_w, width);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, src_w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
      const double bottom = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
      out[y * width + x] = static_cast<float>(top * (1.0 - fy) + bottom * fy);
    }
  }
  return out;
}

Image resize_bilinear(const Image& src, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw Error(ErrorCode::kInvalidArgument, "resize target must be positive");
  Image out(width, height, src.channels);
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = sample_coord(y, src.height, height);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = sample_coord(x, src.width, width);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(x0, y0, c) * (1.0 - fx) + src.at(x1, y0, c) * fx;
        const double bottom = src.at(x0, y1, c) * (1.0 - fx) + src.at(x1, y1, c) * fx;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(top * (1.0 - fy) + bottom * fy), 0L, 255L));
      }
    }
  }
  return out;
}

Image crop(const Image& src, std::size_t x, std::size_t y, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0 || x + width > src.width || y + height > src.height) {
    throw Error(ErrorCode::kInvalidArgument, "crop rectangle outside image");
  }
  Image out(width, height, src.channels);
  for (std::size_t r = 0; r < height; ++r) {
    const auto* from = &src.pixels[((y + r) * src.width + x) * src.channels];
    std::copy(from, from + width * src.channels, &out.pixels[r * width * src.channels]);
  }
  return out;
}

Image to_rgb(const Image& src) {
  if (src.channels == 3) return src;
  Image out(src.width, src.height, 3);
  for (std::size_t i = 0; i < src.width * src.height; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = src.pixels[i * src.channels];
  }
  return out;
}

}  // namespace aspf
