#include "aspf/explain.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace aspf {

float Heatmap::max() const { return values.empty() ? 0.0f : *std::max_element(values.begin(), values.end()); }

namespace {

void normalize_by_max(std::vector<float>& values) {
  const float peak = values.empty() ? 0.0f : *std::max_element(values.begin(), values.end());
  if (!(peak > 0.0f)) {
    std::fill(values.begin(), values.end(), 0.0f);
    return;
  }
  for (auto& v : values) v = std::clamp(v / peak, 0.0f, 1.0f);
}

// Scalar score for `target_class` out of [1,K] scores.
TensorF class_score(Tape<float>& tape, const TensorF& scores, std::size_t target_class) {
  if (scores.rank() != 2 || scores.dim(0) != 1) {
    throw Error(ErrorCode::kShapeMismatch, "expected [1,K] scores, got " + shape_string(scores.shape()));
  }
  if (scores.dim(1) == 1) {
    if (target_class > 1) throw Error(ErrorCode::kInvalidArgument, "target class must be 0 or 1");
    return target_class == 1 ? scores : mul(tape, scores, TensorF({1, 1}, -1.0f));
  }
  if (target_class >= scores.dim(1)) throw Error(ErrorCode::kInvalidArgument, "target class out of range");
  return select_column(tape, scores, target_class);
}

void require_single(const TensorF& input) {
  if (input.rank() != 4 || input.dim(0) != 1) {
    throw Error(ErrorCode::kShapeMismatch, "attribution expects one [1,H,W,C] input, got " + shape_string(input.shape()));
  }
}

}  // namespace

Scorer model_scorer(const Model& model) {
  auto frozen = std::make_shared<Model>(model.clone());
  for (auto p : frozen->parameters()) p.tensor.set_requires_grad(false);
  return [frozen](Tape<float>& tape, const TensorF& input) {
    auto fwd = frozen->forward(tape, input, Mode::kInfer);
    return ScoredForward{fwd.logits, std::move(fwd.features)};
  };
}

Heatmap grad_cam(const Scorer& scorer, const TensorF& input, const std::string& layer, std::size_t target_class) {
  require_single(input);
  Tape<float> tape;
  // Tracking the input makes every downstream feature map part of the graph.
  TensorF x = input.clone();
  x.set_requires_grad();
  auto fwd = scorer(tape, x);
  const TensorF* feature = nullptr;
  for (const auto& [name, t] : fwd.features) {
    if (name == layer) feature = &t;
  }
  if (feature == nullptr) throw Error(ErrorCode::kUnknownLayer, "no feature map named '" + layer + "'");
  if (feature->rank() != 4) throw Error(ErrorCode::kNotConvLayer, "'" + layer + "' is not a convolutional feature map");
  const TensorF activation = *feature;
  const TensorF score = class_score(tape, fwd.scores, target_class);

  const std::size_t h = activation.dim(1), w = activation.dim(2), k = activation.dim(3);
  Heatmap map{w, h, std::vector<float>(h * w, 0.0f), layer, target_class};
  if (!score.requires_grad()) return map;
  const TensorF loss = sum(tape, score);
  tape.backward(loss);
  if (!activation.has_grad()) return map;

  const auto grad = activation.grad();
  const auto act = activation.values();
  std::vector<double> channel_weight(k, 0.0);
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t c = 0; c < k; ++c) channel_weight[c] += grad[p * k + c];
  }
  for (auto& cw : channel_weight) cw /= static_cast<double>(h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < k; ++c) s += channel_weight[c] * act[p * k + c];
    map.values[p] = static_cast<float>(std::max(s, 0.0));
  }
  normalize_by_max(map.values);
  return map;
}

Heatmap grad_cam(const Model& model, const TensorF& input, const std::string& layer, std::size_t target_class) {
  const std::string target = layer.empty() ? model.default_cam_layer() : layer;
  for (const auto& d : model.head()) {
    if (d.name == target) throw Error(ErrorCode::kNotConvLayer, "'" + target + "' is a dense layer");
  }
  return grad_cam(model_scorer(model), input, target, target_class);
}

Heatmap saliency(const Scorer& scorer, const TensorF& input, std::size_t target_class) {
  require_single(input);
  Tape<float> tape;
  TensorF x = input.clone();
  x.set_requires_grad();
  auto fwd = scorer(tape, x);
  const TensorF score = class_score(tape, fwd.scores, target_class);
  const std::size_t h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Heatmap map{w, h, std::vector<float>(h * w, 0.0f), "input", target_class};
  if (!score.requires_grad()) return map;
  tape.backward(sum(tape, score));
  if (!x.has_grad()) return map;
  const auto grad = x.grad();
  for (std::size_t p = 0; p < h * w; ++p) {
    float m = 0;
    for (std::size_t ch = 0; ch < c; ++ch) m = std::max(m, std::abs(grad[p * c + ch]));
    map.values[p] = m;
  }
  normalize_by_max(map.values);
  return map;
}

Heatmap saliency(const Model& model, const TensorF& input, std::size_t target_class) {
  return saliency(model_scorer(model), input, target_class);
}

Heatmap resize(const Heatmap& map, std::size_t width, std::size_t height) {
  Heatmap out = map;
  out.width = width;
  out.height = height;
  out.values = resize_bilinear(map.values, map.width, map.height, width, height);
  for (auto& v : out.values) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

KernelGrid render_kernel_grid(const TensorF& kernels, std::size_t scale) {
  if (scale == 0) throw Error(ErrorCode::kInvalidArgument, "tile scale must be positive");
  std::size_t kh, kw, cin, tiles;
  if (kernels.rank() == 4) {
    kh = kernels.dim(0), kw = kernels.dim(1), cin = kernels.dim(2), tiles = kernels.dim(3);
  } else if (kernels.rank() == 3) {
    // Depthwise [kh,kw,C]: one single-channel filter per channel.
    kh = kernels.dim(0), kw = kernels.dim(1), cin = 1, tiles = kernels.dim(2);
  } else {
    throw Error(ErrorCode::kNotConvLayer, "kernel tensor of shape " + shape_string(kernels.shape()));
  }
  const bool color = cin == 3;
  const auto value = [&](std::size_t i, std::size_t j, std::size_t ci, std::size_t t) {
    return kernels.rank() == 4 ? kernels[((i * kw + j) * cin + ci) * tiles + t] : kernels[(i * kw + j) * tiles + t];
  };

  KernelGrid grid;
  grid.tiles = tiles;
  grid.cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(tiles))));
  grid.rows = (tiles + grid.cols - 1) / grid.cols;
  const std::size_t tile_w = kw * scale, tile_h = kh * scale;
  grid.image = Image(grid.cols * tile_w + (grid.cols - 1), grid.rows * tile_h + (grid.rows - 1), 3, 255);
  for (std::size_t t = 0; t < tiles; ++t) {
    // Tap colours before scaling: either per-channel values or the channel mean.
    std::vector<std::array<float, 3>> taps(kh * kw);
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        auto& tap = taps[i * kw + j];
        if (color) {
          for (std::size_t c = 0; c < 3; ++c) tap[c] = value(i, j, c, t);
        } else {
          float s = 0;
          for (std::size_t c = 0; c < cin; ++c) s += value(i, j, c, t);
          tap.fill(s / static_cast<float>(cin));
        }
      }
    }
    float lo = taps[0][0], hi = taps[0][0];
    for (const auto& tap : taps) {
      for (const float v : tap) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    const float range = hi - lo;
    const std::size_t ox = (t % grid.cols) * (tile_w + 1);
    const std::size_t oy = (t / grid.cols) * (tile_h + 1);
    for (std::size_t y = 0; y < tile_h; ++y) {
      for (std::size_t x = 0; x < tile_w; ++x) {
        const auto& tap = taps[(y / scale) * kw + x / scale];
        for (std::size_t c = 0; c < 3; ++c) {
          const long level = range > 0 ? std::lround((tap[c] - lo) / range * 255.0f) : 128L;
          grid.image.at(ox + x, oy + y, c) = static_cast<std::uint8_t>(std::clamp(level, 0L, 255L));
        }
      }
    }
  }
  // Unused trailing grid cells stay black.
  for (std::size_t t = tiles; t < grid.rows * grid.cols; ++t) {
    const std::size_t ox = (t % grid.cols) * (tile_w + 1);
    const std::size_t oy = (t / grid.cols) * (tile_h + 1);
    for (std::size_t y = 0; y < tile_h; ++y) {
      for (std::size_t x = 0; x < tile_w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) grid.image.at(ox + x, oy + y, c) = 0;
      }
    }
  }
  return grid;
}

KernelGrid dump_kernels(const Model& model, const std::string& layer, std::size_t scale) {
  return render_kernel_grid(model.conv_kernels(layer), scale);
}

std::array<std::uint8_t, 3> heat_color(float value) {
  const float h = std::clamp(value, 0.0f, 1.0f);
  return {static_cast<std::uint8_t>(std::lround(255.0f * h)), 0,
          static_cast<std::uint8_t>(std::lround(255.0f * (1.0f - h)))};
}

Image colorize(const Heatmap& map) {
  Image out(map.width, map.height, 3);
  for (std::size_t p = 0; p < map.values.size(); ++p) {
    const auto c = heat_color(map.values[p]);
    for (std::size_t ch = 0; ch < 3; ++ch) out.pixels[p * 3 + ch] = c[ch];
  }
  return out;
}

Image overlay(const Heatmap& map, const Image& image, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "overlay alpha must be in [0,1]");
  const Heatmap sized = (map.width == image.width && map.height == image.height)
                            ? map
                            : resize(map, image.width, image.height);
  const Image rgb = to_rgb(image);
  const Image heat = colorize(sized);
  Image out(rgb.width, rgb.height, 3);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double v = alpha * heat.pixels[i] + (1.0 - alpha) * rgb.pixels[i];
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return out;
}

}  // namespace aspf
