#include <doctest.h>

#include "aspf/explain.hpp"
#include "support.hpp"

using namespace aspf;
using namespace aspf::test;

namespace {

// score = mean(A * V) with A = x * C, a single feature channel. Then
// d score / dA = V / (H W), so the Grad-CAM weight is mean(V) / (H W) and the
// map is relu(weight * A) normalized by its maximum.
Scorer linear_scorer(const TensorF& c, const TensorF& v) {
  return [=](Tape<float>& tape, const TensorF& x) {
    const TensorF a = mul(tape, x, c);
    const TensorF score = global_avg_pool(tape, mul(tape, a, v));
    return ScoredForward{score, {{"A", a}}};
  };
}

std::vector<double> closed_form_cam(const TensorF& x, const TensorF& c, const TensorF& v, bool negate) {
  const std::size_t n = x.size();
  double vmean = 0;
  for (std::size_t i = 0; i < n; ++i) vmean += v[i];
  vmean /= static_cast<double>(n);
  const double weight = (negate ? -1.0 : 1.0) * vmean / static_cast<double>(n);
  std::vector<double> map(n);
  double peak = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = std::max(0.0, weight * static_cast<double>(x[i]) * static_cast<double>(c[i]));
    peak = std::max(peak, map[i]);
  }
  for (auto& m : map) m = peak > 0 ? m / peak : 0.0;
  return map;
}

void check_heatmap_invariant(const Heatmap& map) {
  REQUIRE(map.values.size() == map.width * map.height);
  float peak = 0;
  for (const float v : map.values) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
    peak = std::max(peak, v);
  }
  CHECK((peak == 1.0f || peak == 0.0f));
}

}  // namespace

TEST_SUITE("explain: attribution") {
  TEST_CASE("Grad-CAM matches the single-channel closed form") {
    for (int seed = 0; seed < 20; ++seed) {
      std::mt19937_64 gen(seed);
      const std::size_t h = 3 + seed % 4, w = 2 + seed % 5;
      const auto x = to_float(random_tensor({1, h, w, 1}, gen, -1, 1));
      const auto c = to_float(random_tensor({1, h, w, 1}, gen, 0.5, 2));
      const auto v = to_float(random_tensor({1, h, w, 1}, gen, -0.5, 1.5));
      const auto scorer = linear_scorer(c, v);
      for (const std::size_t cls : {0u, 1u}) {
        const auto map = grad_cam(scorer, x, "A", cls);
        const auto expect = closed_form_cam(x, c, v, cls == 0);
        CHECK(map.width == w);
        CHECK(map.height == h);
        for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(map.values[i] - expect[i]) < 1e-6);
        check_heatmap_invariant(map);
      }
    }
  }

  TEST_CASE("saliency matches |d score / dx| normalized by its maximum") {
    std::mt19937_64 gen(4);
    const auto x = to_float(random_tensor({1, 4, 5, 1}, gen));
    const auto c = to_float(random_tensor({1, 4, 5, 1}, gen, 0.5, 2));
    const auto v = to_float(random_tensor({1, 4, 5, 1}, gen, -1, 1));
    const auto map = saliency(linear_scorer(c, v), x, 1);
    double peak = 0;
    for (std::size_t i = 0; i < 20; ++i) peak = std::max(peak, std::abs(static_cast<double>(c[i]) * v[i]));
    for (std::size_t i = 0; i < 20; ++i) {
      CHECK(std::abs(map.values[i] - std::abs(static_cast<double>(c[i]) * v[i]) / peak) < 1e-6);
    }
  }

  TEST_CASE("a feature map with no positive evidence yields an all-zero map") {
    const TensorF x({1, 2, 2, 1}, 1.0f), c({1, 2, 2, 1}, 1.0f), v({1, 2, 2, 1}, -1.0f);
    const auto map = grad_cam(linear_scorer(c, v), x, "A", 1);
    for (const float m : map.values) CHECK(m == 0.0f);
    CHECK(map.max() == 0.0f);
  }

  TEST_CASE("model heatmaps respect the [0,1], max-1 invariant") {
    for (const auto& spec : {light_tiny_spec(), heavy_tiny_spec()}) {
      const Model m = build_model(spec, 3);
      for (int seed = 0; seed < 5; ++seed) {
        std::mt19937_64 gen(seed);
        const auto x = to_float(random_tensor({1, 16, 16, 3}, gen, 0, 1));
        for (const std::size_t cls : {0u, 1u}) {
          const auto cam = grad_cam(m, x, "", cls);
          CHECK(cam.source_layer == m.default_cam_layer());
          check_heatmap_invariant(cam);
          check_heatmap_invariant(grad_cam(m, x, "block0", cls));
          const auto sal = saliency(m, x, cls);
          CHECK(sal.width == 16);
          check_heatmap_invariant(sal);
          check_heatmap_invariant(resize(cam, 16, 16));
        }
      }
    }
  }

  TEST_CASE("attribution leaves the caller's model gradients alone") {
    const Model m = build_model(light_tiny_spec(), 0);
    std::mt19937_64 gen(1);
    const auto x = to_float(random_tensor({1, 16, 16, 3}, gen, 0, 1));
    grad_cam(m, x, "", 1);
    saliency(m, x, 1);
    for (const auto& p : m.parameters()) CHECK_FALSE(p.tensor.has_grad());
  }

  TEST_CASE("layer and input errors") {
    const Model m = build_model(light_tiny_spec(), 0);
    const TensorF x({1, 16, 16, 3}, 0.5f);
    auto code = [&](const std::function<void()>& fn) {
      try {
        fn();
      } catch (const Error& e) {
        return e.code();
      }
      return ErrorCode::kInvalidArgument;
    };
    CHECK(code([&] { grad_cam(m, x, "head0", 1); }) == ErrorCode::kNotConvLayer);
    CHECK(code([&] { grad_cam(m, x, "block7", 1); }) == ErrorCode::kUnknownLayer);
    CHECK(code([&] { grad_cam(m, TensorF({2, 16, 16, 3}, 0.5f), "", 1); }) == ErrorCode::kShapeMismatch);
    CHECK_THROWS_AS(grad_cam(m, x, "", 2), Error);
  }
}

TEST_SUITE("explain: rendering") {
  TEST_CASE("kernel grid of the contracted first convolution holds 16 tiles") {
    const Model m = build_model(light_full_spec(0.35), 0);
    const auto grid = dump_kernels(m, "block0.conv", 8);
    CHECK(grid.tiles == 16);
    CHECK(grid.cols == 4);
    CHECK(grid.rows == 4);
    CHECK(grid.image.width == 4 * 24 + 3);
    CHECK(grid.image.height == 4 * 24 + 3);
    // Separator column after the first tile is white.
    for (std::size_t y = 0; y < grid.image.height; ++y) CHECK(grid.image.at(24, y, 0) == 255);
  }

  TEST_CASE("each tile is min-max scaled on its own") {
    // Two 1x2 single-input filters: [-1, 3] and [10, 20].
    const TensorF k({1, 2, 1, 2}, std::vector<float>{-1, 10, 3, 20});
    const auto grid = render_kernel_grid(k, 1);
    CHECK(grid.cols == 2);
    CHECK(grid.rows == 1);
    CHECK(grid.image.width == 5);
    CHECK(grid.image.at(0, 0, 0) == 0);
    CHECK(grid.image.at(1, 0, 0) == 255);
    CHECK(grid.image.at(2, 0, 0) == 255);  // separator
    CHECK(grid.image.at(3, 0, 0) == 0);
    CHECK(grid.image.at(4, 0, 1) == 255);
  }

  TEST_CASE("constant tiles are mid-grey, unused cells black, colour kept for RGB filters") {
    const TensorF flat({2, 2, 1, 5}, 0.3f);
    const auto g = render_kernel_grid(flat, 2);
    CHECK(g.cols == 3);
    CHECK(g.rows == 2);
    CHECK(g.image.at(0, 0, 0) == 128);
    const std::size_t last_x = 2 * (4 + 1), last_y = 4 + 1;  // cell 6 is unused
    CHECK(g.image.at(last_x, last_y, 0) == 0);
    CHECK(g.image.at(last_x + 3, last_y + 3, 2) == 0);

    std::vector<float> rgb(3, 0.0f);
    rgb[0] = 1.0f;  // one tap, red channel high
    const auto c = render_kernel_grid(TensorF({1, 1, 3, 1}, rgb), 1);
    CHECK(c.image.at(0, 0, 0) == 255);
    CHECK(c.image.at(0, 0, 1) == 0);
    CHECK(c.image.at(0, 0, 2) == 0);
    CHECK_THROWS_AS(render_kernel_grid(TensorF({3, 3}, 1.0f)), Error);
    CHECK_THROWS_AS(render_kernel_grid(flat, 0), Error);
  }

  TEST_CASE("colormap and overlay arithmetic") {
    CHECK(heat_color(0.0f) == std::array<std::uint8_t, 3>{0, 0, 255});
    CHECK(heat_color(1.0f) == std::array<std::uint8_t, 3>{255, 0, 0});
    CHECK(heat_color(0.5f) == std::array<std::uint8_t, 3>{128, 0, 128});
    Heatmap map{1, 1, {1.0f}, "x", 1};
    Image img(1, 1, 3);
    img.pixels = {100, 50, 0};
    const auto o = overlay(map, img, 0.25);
    CHECK(o.pixels == std::vector<std::uint8_t>{139, 38, 0});  // 0.25*255 + 0.75*100 = 138.75
    CHECK(overlay(map, img, 0.0).pixels == img.pixels);
    CHECK_THROWS_AS(overlay(map, img, 1.5), Error);
    Image big(4, 3, 1, 10);
    const auto ob = overlay(map, big, 0.5);
    CHECK(ob.width == 4);
    CHECK(ob.channels == 3);
  }
}
