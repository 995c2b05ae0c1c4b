#include <doctest.h>

#include <cmath>

#include "support.hpp"

using namespace aspf;
using namespace aspf::test;

namespace {

// Closed-form trainable parameter count computed straight from a spec.
std::size_t count_from_spec(const ModelSpec& spec) {
  std::size_t total = 0, in = static_cast<std::size_t>(spec.channels);
  for (const auto& b : spec.backbone) {
    const auto out = static_cast<std::size_t>(round_filters(b.out_channels, spec.alpha, spec.divisor));
    const auto k = static_cast<std::size_t>(b.kernel);
    if (b.kind == BlockKind::kPlainConv) {
      total += k * k * in * out + 2 * out;
    } else {
      const std::size_t hidden = in * static_cast<std::size_t>(b.expansion);
      if (b.expansion != 1) total += in * hidden + 2 * hidden;
      total += k * k * hidden + 2 * hidden;
      total += hidden * out + 2 * out;
    }
    in = out;
  }
  for (std::size_t i = 0; i < spec.head.size(); ++i) {
    const auto units = static_cast<std::size_t>(spec.head[i].units);
    total += in * units + units;
    if (i + 1 < spec.head.size()) total += 2 * units;
    in = units;
  }
  return total;
}

int python_round_filters(int v, double alpha, int d) {
  const double x = v * alpha;
  int out = std::max(d, static_cast<int>(x + d / 2.0) / d * d);
  if (out < 0.9 * x) out += d;
  return out;
}

}  // namespace

TEST_SUITE("model: width rule") {
  TEST_CASE("round_filters examples") {
    CHECK(round_filters(32, 0.35) == 16);
    CHECK(round_filters(32, 1.0) == 32);
    CHECK(round_filters(16, 0.35) == 8);
    CHECK(round_filters(24, 0.35) == 8);
    CHECK(round_filters(96, 0.35) == 32);
    CHECK(round_filters(160, 0.35) == 56);
    CHECK(round_filters(320, 0.35) == 112);
    CHECK(round_filters(1280, 1.0) == 1280);
  }

  TEST_CASE("round_filters matches the reference rule and its invariants everywhere") {
    for (int d : {4, 8}) {
      for (int v = 1; v <= 1280; v += 3) {
        for (double a : {0.25, 0.35, 0.5, 0.75, 1.0, 1.4}) {
          const int r = round_filters(v, a, d);
          CHECK(r == python_round_filters(v, a, d));
          CHECK(r % d == 0);
          CHECK(r >= d);
          CHECK(r >= 0.9 * v * a);
        }
      }
    }
  }

  TEST_CASE("round_filters is monotone in the base width and in alpha") {
    for (double a : {0.35, 0.5, 1.0}) {
      int prev = 0;
      for (int v = 1; v <= 2000; ++v) {
        const int r = round_filters(v, a);
        CHECK(r >= prev);
        prev = r;
      }
    }
    for (int v : {16, 24, 32, 96, 320}) {
      int prev = 0;
      for (double a = 0.1; a <= 2.0; a += 0.01) {
        const int r = round_filters(v, a);
        CHECK(r >= prev);
        prev = r;
      }
    }
  }
}

TEST_SUITE("model: presets") {
  TEST_CASE("full light preset stays within 5% of the reference parameter count") {
    const auto spec = light_full_spec(0.35);
    const Model m = build_light_model(spec, 0);
    const std::size_t count = parameter_count(m);
    CHECK(count == count_from_spec(spec));
    CHECK(std::abs(static_cast<double>(count) - 266801.0) <= 0.05 * 266801.0);
    CHECK(spec.height == 96);
    CHECK(spec.width == 96);
    CHECK(spec.channels == 3);
    REQUIRE(spec.head.size() == 3);
    CHECK(spec.head[0].units == 336);
    CHECK(spec.head[1].units == 112);
    CHECK(spec.head[2].units == 1);
    CHECK(spec.norm.kind == NormKind::kGroup);
  }

  TEST_CASE("contracting to alpha 0.35 halves the first convolution") {
    const Model narrow = build_model(light_full_spec(0.35), 0);
    const Model wide = build_model(light_full_spec(1.0), 0);
    const auto kn = narrow.conv_kernels("block0.conv");
    const auto kw = wide.conv_kernels("block0.conv");
    CHECK(kn.dim(3) * 2 == kw.dim(3));
    CHECK(kn.dim(3) == 16);
  }

  TEST_CASE("heavy head is 1024/256/32/2 with swish, swish, tanh, softmax") {
    const auto spec = heavy_b0_spec();
    const Model m = build_heavy_model(spec, 0);
    REQUIRE(m.head().size() == 4);
    const int units[] = {1024, 256, 32, 2};
    const Activation acts[] = {Activation::kSwish, Activation::kSwish, Activation::kTanh, Activation::kSoftmax};
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(m.head()[i].weights.dim(1) == static_cast<std::size_t>(units[i]));
      CHECK(m.head()[i].activation == acts[i]);
      CHECK(m.head()[i].norm.has_value() == (i < 3));
    }
    CHECK(m.head()[0].weights.dim(0) == 1280);
    CHECK(spec.norm.kind == NormKind::kBatch);
    CHECK(parameter_count(m) == count_from_spec(spec));
  }

  TEST_CASE("builders reject the wrong architecture") {
    CHECK_THROWS_AS(build_light_model(heavy_tiny_spec(), 0), Error);
    CHECK_THROWS_AS(build_heavy_model(light_tiny_spec(), 0), Error);
  }

  TEST_CASE("invalid specs are rejected") {
    auto spec = light_tiny_spec();
    spec.head.back().units = 2;
    CHECK_THROWS_AS(validate(spec), Error);
    spec = light_tiny_spec();
    spec.backbone.clear();
    CHECK_THROWS_AS(validate(spec), Error);
    spec = light_tiny_spec();
    spec.alpha = 0;
    CHECK_THROWS_AS(validate(spec), Error);
    spec = heavy_tiny_spec();
    spec.dropconnect_rate = 1.0;
    CHECK_THROWS_AS(validate(spec), Error);
  }
}

TEST_SUITE("model: structure and forward") {
  TEST_CASE("inverted residual skip exists iff stride 1 and widths match") {
    Rng rng(0);
    const NormConfig norm{NormKind::kGroup, 4, 1e-5, 0.99};
    CHECK(build_inverted_residual("a", 16, 16, 1, 6, norm, rng).residual);
    CHECK_FALSE(build_inverted_residual("b", 16, 16, 2, 6, norm, rng).residual);
    CHECK_FALSE(build_inverted_residual("c", 16, 24, 1, 6, norm, rng).residual);
    const auto t1 = build_inverted_residual("d", 16, 16, 1, 1, norm, rng);
    CHECK(t1.units.size() == 2);  // no expand when t = 1
    const auto t6 = build_inverted_residual("e", 16, 24, 2, 6, norm, rng);
    REQUIRE(t6.units.size() == 3);
    CHECK(t6.units[0].kernels.shape() == Shape{1, 1, 16, 96});
    CHECK(t6.units[1].kernels.shape() == Shape{3, 3, 96});
    CHECK(t6.units[1].stride == 2);
    CHECK(t6.units[2].activation == Activation::kLinear);
  }

  TEST_CASE("initialisation follows the He-uniform bound and unit norm parameters") {
    const Model m = build_model(light_tiny_spec(), 3);
    for (const auto& b : m.blocks()) {
      for (const auto& u : b.units) {
        const auto& s = u.kernels.shape();
        const std::size_t fan_in = u.depthwise ? s[0] * s[1] : s[0] * s[1] * s[2];
        const float limit = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
        for (const float v : u.kernels.values()) CHECK(std::abs(v) <= limit);
        for (const float g : u.norm.gamma.values()) CHECK(g == 1.0f);
        for (const float g : u.norm.beta.values()) CHECK(g == 0.0f);
      }
    }
    for (const auto& d : m.head()) {
      for (const float v : d.bias.values()) CHECK(v == 0.0f);
    }
  }

  TEST_CASE("build_model is deterministic in the seed") {
    const Model a = build_model(light_tiny_spec(), 11), b = build_model(light_tiny_spec(), 11),
                c = build_model(light_tiny_spec(), 12);
    const auto ta = a.all_tensors(), tb = b.all_tensors(), tc = c.all_tensors();
    REQUIRE(ta.size() == tb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
      CHECK(ta[i].name == tb[i].name);
      CHECK(ta[i].tensor.vector() == tb[i].tensor.vector());
      any_diff = any_diff || ta[i].tensor.vector() != tc[i].tensor.vector();
    }
    CHECK(any_diff);
  }

  TEST_CASE("light forward yields one probability per sample and named features") {
    const Model m = build_model(light_tiny_spec(), 0);
    std::mt19937_64 gen(1);
    const auto x = to_float(random_tensor({3, 16, 16, 3}, gen, 0, 1));
    Tape<float> tape;
    const auto fwd = m.forward(tape, x, Mode::kInfer);
    CHECK(fwd.output.shape() == Shape{3, 1});
    CHECK(fwd.logits.shape() == Shape{3, 1});
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(fwd.output[i] > 0.0f);
      CHECK(fwd.output[i] < 1.0f);
      CHECK(fwd.output[i] == doctest::Approx(1.0 / (1.0 + std::exp(-fwd.logits[i]))).epsilon(1e-6));
    }
    CHECK(fwd.feature("block0").shape() == Shape{3, 8, 8, 16});
    CHECK(fwd.feature("block2").shape() == Shape{3, 4, 4, 8});
    CHECK(m.default_cam_layer() == "block2");
    CHECK_THROWS_AS(fwd.feature("nope"), Error);
  }

  TEST_CASE("heavy forward yields a softmax pair") {
    const Model m = build_model(heavy_tiny_spec(), 0);
    std::mt19937_64 gen(2);
    const auto x = to_float(random_tensor({2, 16, 16, 3}, gen, 0, 1));
    const auto y = m.predict(x);
    CHECK(y.shape() == Shape{2, 2});
    CHECK(y[0] + y[1] == doctest::Approx(1.0f));
    CHECK_FALSE(m.state().empty());
  }

  TEST_CASE("inference is deterministic; train-mode dropconnect varies with the rng") {
    const Model m = build_model(heavy_tiny_spec(), 0);
    std::mt19937_64 gen(3);
    const auto x = to_float(random_tensor({2, 16, 16, 3}, gen, 0, 1));
    CHECK(m.predict(x).vector() == m.predict(x).vector());
    Rng r1(1), r2(2);
    Model a = m.clone(), b = m.clone();
    Tape<float> t1, t2;
    const auto y1 = a.forward(t1, x, Mode::kTrain, &r1).output;
    const auto y2 = b.forward(t2, x, Mode::kTrain, &r2).output;
    CHECK(y1.vector() != y2.vector());
  }

  TEST_CASE("clone is deep") {
    const Model m = build_model(light_tiny_spec(), 0);
    Model c = m.clone();
    TensorF first = c.parameters()[0].tensor;
    first.values()[0] += 1.0f;
    CHECK(m.parameters()[0].tensor[0] != c.parameters()[0].tensor[0]);
  }

  TEST_CASE("conv layer lookup distinguishes dense and unknown layers") {
    const Model m = build_model(light_tiny_spec(), 0);
    CHECK(m.conv_kernels("block0.conv").shape() == Shape{3, 3, 3, 16});
    CHECK(m.conv_kernels("block1.depthwise").rank() == 3);
    try {
      m.conv_kernels("head0");
      FAIL("expected kNotConvLayer");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kNotConvLayer);
    }
    try {
      m.conv_kernels("block9.conv");
      FAIL("expected kUnknownLayer");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kUnknownLayer);
    }
  }
}

TEST_SUITE("model: spec JSON") {
  TEST_CASE("every preset roundtrips through JSON") {
    for (const auto& spec : {light_full_spec(), light_tiny_spec(), heavy_b0_spec(), heavy_tiny_spec()}) {
      CHECK(model_spec_from_json(model_spec_to_json(spec)) == spec);
      CHECK(model_spec_to_json(model_spec_from_json(model_spec_to_json(spec))) == model_spec_to_json(spec));
    }
  }

  TEST_CASE("presets can be named and overridden") {
    const auto spec = model_spec_from_json(R"({"preset":"light_tiny","alpha":0.5})");
    auto expect = light_tiny_spec();
    expect.alpha = 0.5;
    CHECK(spec == expect);
  }

  TEST_CASE("unknown keys and bad values are rejected") {
    for (const char* bad : {R"({"preset":"light_tiny","colour":1})", R"({"preset":"nope"})",
                            R"({"preset":"light_tiny","norm":{"kind":"layer"}})",
                            R"({"preset":"light_tiny","head":[{"units":1,"activation":"gelu"}]})", "[1,2]", "{"}) {
      CAPTURE(bad);
      CHECK_THROWS_AS(model_spec_from_json(bad), Error);
    }
  }
}
