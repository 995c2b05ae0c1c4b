#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aspf/image.hpp"
#include "aspf/model.hpp"

namespace aspf {

// Row-major 2-D map with values in [0,1]; the maximum is 1 unless the map is
// identically zero.
struct Heatmap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> values;
  std::string source_layer;
  std::size_t target_class = 0;

  float at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
  float max() const;
};

// What the attribution methods need from a network: linear (pre-activation)
// class scores [N,K] and the named convolutional feature maps that led to them.
struct ScoredForward {
  TensorF scores;
  std::vector<std::pair<std::string, TensorF>> features;
};
using Scorer = std::function<ScoredForward(Tape<float>&, const TensorF&)>;

// Inference-mode scorer over a model's logits. For the one-unit light model,
// class 1 (real) scores +logit and class 0 (fake) scores -logit. The scorer
// owns a gradient-free copy of the model, so attribution never touches the
// caller's parameter gradients.
Scorer model_scorer(const Model& model);

Heatmap grad_cam(const Scorer& scorer, const TensorF& input, const std::string& layer, std::size_t target_class);
// An empty `layer` selects Model::default_cam_layer().
Heatmap grad_cam(const Model& model, const TensorF& input, const std::string& layer, std::size_t target_class);

Heatmap saliency(const Scorer& scorer, const TensorF& input, std::size_t target_class);
Heatmap saliency(const Model& model, const TensorF& input, std::size_t target_class);

// Bilinear upsampling (corner-aligned, values stay in [0,1]).
Heatmap resize(const Heatmap& map, std::size_t width, std::size_t height);

struct KernelGrid {
  Image image;
  std::size_t tiles = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// One tile per output filter, each min-max scaled to [0,255] on its own (a
// constant filter renders as 128). Three-input-channel filters render in
// colour; others in gray, averaged over input channels. Tiles are `scale`
// pixels per tap, laid out row-major in a ceil(sqrt(n))-wide grid with
// 1-pixel white separators.
KernelGrid render_kernel_grid(const TensorF& kernels, std::size_t scale = 8);
KernelGrid dump_kernels(const Model& model, const std::string& layer, std::size_t scale = 8);

// Blue (0) to red (1) ramp: (round(255 h), 0, round(255 (1 - h))).
std::array<std::uint8_t, 3> heat_color(float value);
Image colorize(const Heatmap& map);

// alpha * colormap(heatmap) + (1 - alpha) * image per channel, rounded. The
// heatmap is resized to the image when the sizes differ.
Image overlay(const Heatmap& map, const Image& image, double alpha);

}  // namespace aspf
