#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aspf/ops.hpp"

namespace aspf {

enum class Architecture { kLight, kHeavy };
enum class BlockKind { kPlainConv, kInvertedResidual };

std::string_view to_string(Architecture a);
std::string_view to_string(BlockKind k);

// One backbone stage element. out_channels is the width before contraction by
// ModelSpec::alpha.
struct BlockSpec {
  BlockKind kind = BlockKind::kInvertedResidual;
  int out_channels = 16;
  int stride = 1;
  int expansion = 1;
  int kernel = 3;
  Activation activation = Activation::kRelu6;

  bool operator==(const BlockSpec&) const = default;
};

struct HeadLayer {
  int units = 1;
  Activation activation = Activation::kLinear;

  bool operator==(const HeadLayer&) const = default;
};

struct ModelSpec {
  Architecture architecture = Architecture::kLight;
  int height = 96;
  int width = 96;
  int channels = 3;
  double alpha = 1.0;
  int divisor = 8;
  std::vector<BlockSpec> backbone;
  std::vector<HeadLayer> head;
  double dropconnect_rate = 0.0;
  NormConfig norm;

  bool operator==(const ModelSpec& other) const;
};

// Contracted channel count: nearest multiple of `divisor` to base * alpha, at
// least `divisor`, bumped one step if rounding lost more than 10%.
int round_filters(int base, double alpha, int divisor = 8);

// Throws kInvalidArgument describing the first violated constraint.
void validate(const ModelSpec& spec);

std::string model_spec_to_json(const ModelSpec& spec);
// Rejects unknown keys with kConfig.
ModelSpec model_spec_from_json(std::string_view json);

// Presets. light_full and heavy_b0 are the full-size reference layouts; the
// "tiny" presets are shrunk for desk-scale training and tests.
ModelSpec light_full_spec(double alpha = 0.35);
ModelSpec light_tiny_spec();
ModelSpec heavy_b0_spec();
ModelSpec heavy_tiny_spec();

struct NamedTensor {
  std::string name;
  TensorF tensor;
};

struct NormLayer {
  NormConfig config;
  TensorF gamma;
  TensorF beta;
  RunningStats<float> stats;

  TensorF forward(Tape<float>& tape, const TensorF& x, Mode mode) const;
};

// Convolution (regular or depthwise) followed by normalization and an activation.
struct ConvUnit {
  std::string name;
  TensorF kernels;  // [kh,kw,Cin,Cout], or [kh,kw,C] when depthwise
  bool depthwise = false;
  int stride = 1;
  NormLayer norm;
  Activation activation = Activation::kLinear;

  TensorF forward(Tape<float>& tape, const TensorF& x, Mode mode) const;
};

struct Block {
  std::string name;
  BlockKind kind = BlockKind::kInvertedResidual;
  std::vector<ConvUnit> units;
  bool residual = false;

  TensorF forward(Tape<float>& tape, const TensorF& x, Mode mode) const;
  std::size_t pointwise_count() const;
  const ConvUnit* depthwise_unit() const;
};

// expand (1x1, skipped when expansion == 1) -> depthwise k x k -> linear project
// (1x1); the skip connection exists iff stride == 1 and in == out.
Block build_inverted_residual(const std::string& name, int in_channels, int out_channels, int stride, int expansion,
                              const NormConfig& norm, Rng& rng, int kernel = 3,
                              Activation activation = Activation::kRelu6);

Block build_plain_conv(const std::string& name, int in_channels, int out_channels, int stride, int kernel,
                       const NormConfig& norm, Rng& rng, Activation activation);

struct DenseLayer {
  std::string name;
  TensorF weights;
  TensorF bias;
  std::optional<NormLayer> norm;
  Activation activation = Activation::kLinear;
};

struct ForwardResult {
  TensorF logits;  // pre-sigmoid [N,1] or pre-softmax [N,2]
  TensorF output;  // probabilities
  std::vector<std::pair<std::string, TensorF>> features;

  const TensorF& feature(const std::string& name) const;
};

class Model {
 public:
  const ModelSpec& spec() const { return spec_; }

  // Forward pass; `rng` drives dropconnect masks and may be null in infer mode
  // or when the rate is 0. `dropconnect_rate` overrides the spec's rate.
  ForwardResult forward(Tape<float>& tape, const TensorF& input, Mode mode, Rng* rng = nullptr,
                        std::optional<double> dropconnect_rate = std::nullopt) const;
  // Inference without gradient tracking; returns probabilities.
  TensorF predict(const TensorF& input) const;

  // Trainable tensors in construction order.
  const std::vector<NamedTensor>& parameters() const { return parameters_; }
  // Non-trainable state (batch-norm running statistics).
  const std::vector<NamedTensor>& state() const { return state_; }
  // Parameters followed by state: the full persisted tensor set.
  std::vector<NamedTensor> all_tensors() const;
  std::optional<TensorF> find(std::string_view name) const;

  const std::vector<Block>& blocks() const { return blocks_; }
  const std::vector<DenseLayer>& head() const { return head_; }

  // Names of convolutional feature maps reported by forward().
  std::vector<std::string> feature_names() const;
  // Output of the last block that contains a depthwise convolution.
  std::string default_cam_layer() const;
  // Kernel tensor of a conv unit ("<block>.<unit>"), e.g. "block0.conv".
  std::vector<std::string> conv_layer_names() const;
  TensorF conv_kernels(const std::string& layer) const;

  void zero_grad() const;
  // Deep copy with independent storage.
  Model clone() const;
  // Copies values from `other`, which must share the same spec.
  void copy_values_from(const Model& other) const;

 private:
  friend Model build_model(const ModelSpec& spec, std::uint64_t seed);

  void index_tensors();

  ModelSpec spec_;
  std::vector<Block> blocks_;
  std::vector<DenseLayer> head_;
  std::vector<NamedTensor> parameters_;
  std::vector<NamedTensor> state_;
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);
// Light: contracted MobileNetV2-style backbone, pooled features, head ending
// in one sigmoid unit (probability of "real").
Model build_light_model(const ModelSpec& spec, std::uint64_t seed);
// Heavy: MBConv backbone, pooled features, head ending in a 2-way softmax
// ordered [fake, real].
Model build_heavy_model(const ModelSpec& spec, std::uint64_t seed);

std::size_t parameter_count(const Model& model);

}  // namespace aspf
