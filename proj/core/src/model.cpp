#include "aspf/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace aspf {

std::string_view to_string(Architecture a) { return a == Architecture::kLight ? "light" : "heavy"; }

std::string_view to_string(BlockKind k) {
  return k == BlockKind::kPlainConv ? "plain_conv" : "inverted_residual";
}

bool ModelSpec::operator==(const ModelSpec& o) const {
  return architecture == o.architecture && height == o.height && width == o.width && channels == o.channels &&
         alpha == o.alpha && divisor == o.divisor && backbone == o.backbone && head == o.head &&
         dropconnect_rate == o.dropconnect_rate && norm.kind == o.norm.kind && norm.groups == o.norm.groups &&
         norm.eps == o.norm.eps && norm.momentum == o.norm.momentum;
}

int round_filters(int base, double alpha, int divisor) {
  if (base < 1 || !(alpha > 0) || divisor < 1) {
    throw Error(ErrorCode::kInvalidArgument, "round_filters needs base >= 1, alpha > 0, divisor >= 1");
  }
  const double scaled = base * alpha;
  int rounded = std::max(divisor, static_cast<int>(scaled + divisor / 2.0) / divisor * divisor);
  if (rounded < 0.9 * scaled) rounded += divisor;
  return rounded;
}

void validate(const ModelSpec& spec) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, "model spec: " + what); };
  if (spec.height < 1 || spec.width < 1 || spec.channels < 1) fail("input shape must be positive");
  if (!(spec.alpha > 0)) fail("alpha must be positive");
  if (spec.divisor < 1) fail("divisor must be >= 1");
  if (spec.backbone.empty()) fail("backbone is empty");
  for (const auto& b : spec.backbone) {
    if (b.stride != 1 && b.stride != 2) fail("block stride must be 1 or 2");
    if (b.expansion < 1) fail("block expansion must be >= 1");
    if (b.kernel < 1) fail("block kernel must be >= 1");
    if (b.out_channels < 1) fail("block out_channels must be >= 1");
  }
  if (spec.head.empty()) fail("head is empty");
  for (std::size_t i = 0; i < spec.head.size(); ++i) {
    if (spec.head[i].units < 1) fail("head sizes must be >= 1");
    if (i + 1 < spec.head.size() && spec.head[i].activation == Activation::kSoftmax) {
      fail("softmax is only allowed on the classifier layer");
    }
  }
  const auto& last = spec.head.back();
  if (spec.architecture == Architecture::kLight && (last.units != 1 || last.activation != Activation::kSigmoid)) {
    fail("light classifier must be 1 unit with sigmoid");
  }
  if (spec.architecture == Architecture::kHeavy && (last.units != 2 || last.activation != Activation::kSoftmax)) {
    fail("heavy classifier must be 2 units with softmax");
  }
  if (!(spec.dropconnect_rate >= 0 && spec.dropconnect_rate < 1)) fail("dropconnect_rate must be in [0,1)");
  if (!(spec.norm.eps > 0)) fail("norm eps must be positive");
  if (spec.norm.groups < 1) fail("norm groups must be >= 1");
  if (!(spec.norm.momentum >= 0 && spec.norm.momentum < 1)) fail("norm momentum must be in [0,1)");
}

// ---------------------------------------------------------------------------
// Presets

namespace {

struct Stage {
  int expansion, channels, repeats, stride, kernel;
};

std::vector<BlockSpec> expand_stages(const std::vector<Stage>& stages, Activation act) {
  std::vector<BlockSpec> blocks;
  for (const auto& s : stages) {
    for (int i = 0; i < s.repeats; ++i) {
      blocks.push_back(
          {BlockKind::kInvertedResidual, s.channels, i == 0 ? s.stride : 1, s.expansion, s.kernel, act});
    }
  }
  return blocks;
}

}  // namespace

ModelSpec light_full_spec(double alpha) {
  ModelSpec spec;
  spec.architecture = Architecture::kLight;
  spec.height = spec.width = 96;
  spec.alpha = alpha;
  spec.backbone.push_back({BlockKind::kPlainConv, 32, 2, 1, 3, Activation::kRelu6});
  // MobileNetV2 stages up to the 160-channel stage, closed by a 1x1 conv at the
  // contracted width of the final 320-channel stage.
  const auto body = expand_stages({{1, 16, 1, 1, 3},
                                   {6, 24, 2, 2, 3},
                                   {6, 32, 3, 2, 3},
                                   {6, 64, 4, 2, 3},
                                   {6, 96, 3, 1, 3},
                                   {6, 160, 3, 2, 3}},
                                  Activation::kRelu6);
  spec.backbone.insert(spec.backbone.end(), body.begin(), body.end());
  spec.backbone.push_back({BlockKind::kPlainConv, 320, 1, 1, 1, Activation::kRelu6});
  spec.head = {{336, Activation::kSwish}, {112, Activation::kSwish}, {1, Activation::kSigmoid}};
  spec.norm = {NormKind::kGroup, 8, 1e-5, 0.99};
  return spec;
}

ModelSpec light_tiny_spec() {
  ModelSpec spec;
  spec.architecture = Architecture::kLight;
  spec.height = spec.width = 16;
  spec.alpha = 0.35;
  spec.backbone = {{BlockKind::kPlainConv, 32, 2, 1, 3, Activation::kRelu6},
                   {BlockKind::kInvertedResidual, 16, 1, 1, 3, Activation::kRelu6},
                   {BlockKind::kInvertedResidual, 24, 2, 2, 3, Activation::kRelu6}};
  spec.head = {{16, Activation::kSwish}, {8, Activation::kSwish}, {1, Activation::kSigmoid}};
  spec.norm = {NormKind::kGroup, 4, 1e-5, 0.99};
  return spec;
}

ModelSpec heavy_b0_spec() {
  ModelSpec spec;
  spec.architecture = Architecture::kHeavy;
  spec.height = spec.width = 224;
  spec.alpha = 1.0;
  spec.backbone.push_back({BlockKind::kPlainConv, 32, 2, 1, 3, Activation::kSwish});
  const auto body = expand_stages({{1, 16, 1, 1, 3},
                                   {6, 24, 2, 2, 3},
                                   {6, 40, 2, 2, 5},
                                   {6, 80, 3, 2, 3},
                                   {6, 112, 3, 1, 5},
                                   {6, 192, 4, 2, 5},
                                   {6, 320, 1, 1, 3}},
                                  Activation::kSwish);
  spec.backbone.insert(spec.backbone.end(), body.begin(), body.end());
  spec.backbone.push_back({BlockKind::kPlainConv, 1280, 1, 1, 1, Activation::kSwish});
  spec.head = {{1024, Activation::kSwish}, {256, Activation::kSwish}, {32, Activation::kTanh}, {2, Activation::kSoftmax}};
  spec.dropconnect_rate = 0.2;
  spec.norm = {NormKind::kBatch, 8, 1e-5, 0.99};
  return spec;
}

ModelSpec heavy_tiny_spec() {
  ModelSpec spec = heavy_b0_spec();
  spec.height = spec.width = 16;
  spec.backbone = {{BlockKind::kPlainConv, 8, 2, 1, 3, Activation::kSwish},
                   {BlockKind::kInvertedResidual, 8, 1, 1, 3, Activation::kSwish},
                   {BlockKind::kInvertedResidual, 16, 2, 2, 5, Activation::kSwish}};
  spec.head = {{32, Activation::kSwish}, {16, Activation::kSwish}, {8, Activation::kTanh}, {2, Activation::kSoftmax}};
  spec.dropconnect_rate = 0.1;
  return spec;
}

// ---------------------------------------------------------------------------
// Layers

TensorF NormLayer::forward(Tape<float>& tape, const TensorF& x, Mode mode) const {
  auto stats = this->stats;
  return normalize(tape, config, x, gamma, beta, mode, &stats);
}

TensorF ConvUnit::forward(Tape<float>& tape, const TensorF& x, Mode mode) const {
  TensorF y = depthwise ? depthwise_conv2d(tape, x, kernels, stride, Padding::kSame)
                        : conv2d(tape, x, kernels, std::optional<TensorF>(), stride, Padding::kSame);
  y = norm.forward(tape, y, mode);
  return activate(tape, activation, y);
}

TensorF Block::forward(Tape<float>& tape, const TensorF& x, Mode mode) const {
  TensorF y = x;
  for (const auto& unit : units) y = unit.forward(tape, y, mode);
  return residual ? add(tape, x, y) : y;
}

std::size_t Block::pointwise_count() const {
  return static_cast<std::size_t>(std::count_if(units.begin(), units.end(), [](const ConvUnit& u) {
    return !u.depthwise && u.kernels.dim(0) == 1 && u.kernels.dim(1) == 1;
  }));
}

const ConvUnit* Block::depthwise_unit() const {
  for (const auto& u : units) {
    if (u.depthwise) return &u;
  }
  return nullptr;
}

namespace {

// He-uniform: U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)).
TensorF init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  TensorF t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-limit, limit));
  t.set_requires_grad();
  return t;
}

NormLayer make_norm(const NormConfig& cfg, std::size_t channels) {
  if (cfg.kind == NormKind::kGroup && channels % static_cast<std::size_t>(cfg.groups) != 0) {
    throw Error(ErrorCode::kInvalidArgument, std::to_string(channels) + " channels not divisible into " +
                                                 std::to_string(cfg.groups) + " groups");
  }
  NormLayer n;
  n.config = cfg;
  n.gamma = TensorF({channels}, 1.0f);
  n.gamma.set_requires_grad();
  n.beta = TensorF({channels}, 0.0f);
  n.beta.set_requires_grad();
  if (cfg.kind == NormKind::kBatch) {
    n.stats.mean = TensorF({channels}, 0.0f);
    n.stats.var = TensorF({channels}, 1.0f);
  }
  return n;
}

ConvUnit make_conv(std::string name, int in, int out, int kernel, int stride, bool depthwise, const NormConfig& norm,
                   Activation act, Rng& rng) {
  ConvUnit u;
  u.name = std::move(name);
  u.depthwise = depthwise;
  u.stride = stride;
  u.activation = act;
  const auto k = static_cast<std::size_t>(kernel);
  if (depthwise) {
    u.kernels = init_uniform({k, k, static_cast<std::size_t>(in)}, k * k, rng);
  } else {
    u.kernels = init_uniform({k, k, static_cast<std::size_t>(in), static_cast<std::size_t>(out)},
                             k * k * static_cast<std::size_t>(in), rng);
  }
  u.norm = make_norm(norm, static_cast<std::size_t>(out));
  return u;
}

}  // namespace

Block build_inverted_residual(const std::string& name, int in_channels, int out_channels, int stride, int expansion,
                              const NormConfig& norm, Rng& rng, int kernel, Activation activation) {
  if (stride != 1 && stride != 2) throw Error(ErrorCode::kInvalidArgument, "inverted residual stride must be 1 or 2");
  if (expansion < 1) throw Error(ErrorCode::kInvalidArgument, "expansion must be >= 1");
  Block b;
  b.name = name;
  b.kind = BlockKind::kInvertedResidual;
  const int hidden = in_channels * expansion;
  if (expansion != 1) {
    b.units.push_back(make_conv(name + ".expand", in_channels, hidden, 1, 1, false, norm, activation, rng));
  }
  b.units.push_back(make_conv(name + ".depthwise", hidden, hidden, kernel, stride, true, norm, activation, rng));
  b.units.push_back(
      make_conv(name + ".project", hidden, out_channels, 1, 1, false, norm, Activation::kLinear, rng));
  b.residual = stride == 1 && in_channels == out_channels;
  return b;
}

Block build_plain_conv(const std::string& name, int in_channels, int out_channels, int stride, int kernel,
                       const NormConfig& norm, Rng& rng, Activation activation) {
  Block b;
  b.name = name;
  b.kind = BlockKind::kPlainConv;
  b.units.push_back(make_conv(name + ".conv", in_channels, out_channels, kernel, stride, false, norm, activation, rng));
  return b;
}

// ---------------------------------------------------------------------------
// Model

const TensorF& ForwardResult::feature(const std::string& name) const {
  for (const auto& [n, t] : features) {
    if (n == name) return t;
  }
  throw Error(ErrorCode::kUnknownLayer, "no feature map named '" + name + "'");
}

ForwardResult Model::forward(Tape<float>& tape, const TensorF& input, Mode mode, Rng* rng,
                             std::optional<double> dropconnect_rate) const {
  if (input.rank() != 4 || input.dim(3) != static_cast<std::size_t>(spec_.channels)) {
    throw Error(ErrorCode::kShapeMismatch, "model input must be [N,H,W," + std::to_string(spec_.channels) + "], got " +
                                               shape_string(input.shape()));
  }
  ForwardResult result;
  TensorF x = input;
  for (const auto& block : blocks_) {
    x = block.forward(tape, x, mode);
    result.features.emplace_back(block.name, x);
  }
  x = global_avg_pool(tape, x);
  const double rate = dropconnect_rate.value_or(spec_.dropconnect_rate);
  const bool drop = mode == Mode::kTrain && rate > 0;
  if (drop && rng == nullptr) throw Error(ErrorCode::kInvalidArgument, "dropconnect in train mode needs an rng");
  for (std::size_t i = 0; i < head_.size(); ++i) {
    const auto& layer = head_[i];
    const TensorF w = drop ? dropconnect(tape, layer.weights, rate, *rng, mode) : layer.weights;
    x = dense(tape, x, w, layer.bias);
    if (layer.norm) x = layer.norm->forward(tape, x, mode);
    if (i + 1 == head_.size()) {
      result.logits = x;
      result.output = activate(tape, layer.activation, x);
    } else {
      x = activate(tape, layer.activation, x);
    }
  }
  return result;
}

TensorF Model::predict(const TensorF& input) const {
  auto tape = Tape<float>::no_grad();
  return forward(tape, input, Mode::kInfer).output;
}

std::vector<NamedTensor> Model::all_tensors() const {
  std::vector<NamedTensor> all = parameters_;
  all.insert(all.end(), state_.begin(), state_.end());
  return all;
}

std::optional<TensorF> Model::find(std::string_view name) const {
  for (const auto* list : {&parameters_, &state_}) {
    for (const auto& nt : *list) {
      if (nt.name == name) return nt.tensor;
    }
  }
  return std::nullopt;
}

std::vector<std::string> Model::feature_names() const {
  std::vector<std::string> names;
  for (const auto& b : blocks_) names.push_back(b.name);
  return names;
}

std::string Model::default_cam_layer() const {
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    if (it->depthwise_unit() != nullptr) return it->name;
  }
  return blocks_.back().name;
}

std::vector<std::string> Model::conv_layer_names() const {
  std::vector<std::string> names;
  for (const auto& b : blocks_) {
    for (const auto& u : b.units) names.push_back(u.name);
  }
  return names;
}

TensorF Model::conv_kernels(const std::string& layer) const {
  for (const auto& b : blocks_) {
    for (const auto& u : b.units) {
      if (u.name == layer) return u.kernels;
    }
  }
  for (const auto& d : head_) {
    if (d.name == layer) throw Error(ErrorCode::kNotConvLayer, "'" + layer + "' is a dense layer");
  }
  throw Error(ErrorCode::kUnknownLayer, "no layer named '" + layer + "'");
}

void Model::zero_grad() const {
  for (auto nt : parameters_) nt.tensor.zero_grad();
}

void Model::index_tensors() {
  parameters_.clear();
  state_.clear();
  auto add_norm = [&](const std::string& prefix, const NormLayer& n) {
    parameters_.push_back({prefix + ".norm.gamma", n.gamma});
    parameters_.push_back({prefix + ".norm.beta", n.beta});
    if (n.config.kind == NormKind::kBatch) {
      state_.push_back({prefix + ".norm.running_mean", n.stats.mean});
      state_.push_back({prefix + ".norm.running_var", n.stats.var});
    }
  };
  for (const auto& b : blocks_) {
    for (const auto& u : b.units) {
      parameters_.push_back({u.name + ".kernels", u.kernels});
      add_norm(u.name, u.norm);
    }
  }
  for (const auto& d : head_) {
    parameters_.push_back({d.name + ".weights", d.weights});
    parameters_.push_back({d.name + ".bias", d.bias});
    if (d.norm) add_norm(d.name, *d.norm);
  }
}

Model Model::clone() const {
  Model copy = build_model(spec_, 0);
  copy.copy_values_from(*this);
  return copy;
}

void Model::copy_values_from(const Model& other) const {
  if (!(other.spec_ == spec_)) throw Error(ErrorCode::kInvalidArgument, "copy_values_from: spec differs");
  const auto mine = all_tensors();
  const auto theirs = other.all_tensors();
  for (std::size_t i = 0; i < mine.size(); ++i) {
    auto dst = mine[i].tensor;
    const auto src = theirs[i].tensor.values();
    std::copy(src.begin(), src.end(), dst.values().begin());
  }
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng(seed);
  Model model;
  model.spec_ = spec;
  int channels = spec.channels;
  for (std::size_t i = 0; i < spec.backbone.size(); ++i) {
    const auto& bs = spec.backbone[i];
    const std::string name = "block" + std::to_string(i);
    const int out = round_filters(bs.out_channels, spec.alpha, spec.divisor);
    if (bs.kind == BlockKind::kPlainConv) {
      model.blocks_.push_back(build_plain_conv(name, channels, out, bs.stride, bs.kernel, spec.norm, rng, bs.activation));
    } else {
      model.blocks_.push_back(
          build_inverted_residual(name, channels, out, bs.stride, bs.expansion, spec.norm, rng, bs.kernel, bs.activation));
    }
    channels = out;
  }
  std::size_t features = static_cast<std::size_t>(channels);
  for (std::size_t i = 0; i < spec.head.size(); ++i) {
    const auto& hl = spec.head[i];
    const auto units = static_cast<std::size_t>(hl.units);
    DenseLayer d;
    d.name = "head" + std::to_string(i);
    d.weights = init_uniform({features, units}, features, rng);
    d.bias = TensorF({units}, 0.0f);
    d.bias.set_requires_grad();
    d.activation = hl.activation;
    if (i + 1 < spec.head.size()) d.norm = make_norm(spec.norm, units);
    model.head_.push_back(std::move(d));
    features = units;
  }
  model.index_tensors();
  return model;
}

Model build_light_model(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.architecture != Architecture::kLight) throw Error(ErrorCode::kInvalidArgument, "spec is not a light model");
  return build_model(spec, seed);
}

Model build_heavy_model(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.architecture != Architecture::kHeavy) throw Error(ErrorCode::kInvalidArgument, "spec is not a heavy model");
  return build_model(spec, seed);
}

std::size_t parameter_count(const Model& model) {
  std::size_t total = 0;
  for (const auto& p : model.parameters()) total += p.tensor.size();
  return total;
}

}  // namespace aspf
