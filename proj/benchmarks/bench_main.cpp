#include <benchmark/benchmark.h>

#include <random>

#include "aspf/archive.hpp"
#include "aspf/model.hpp"
#include "aspf/ops.hpp"
#include "aspf/training.hpp"

using namespace aspf;

namespace {

TensorF random_tensor(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  TensorF t(shape, 0.0f);
  for (auto& v : t.values()) v = u(gen);
  return t;
}

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({1, 48, 48, c}, 1), k = random_tensor({3, 3, c, c}, 2);
  for (auto _ : state) {
    auto tape = Tape<float>::no_grad();
    benchmark::DoNotOptimize(conv2d(tape, x, k, std::optional<TensorF>{}, 1, Padding::kSame));
  }
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(16)->Arg(32);

void BM_Depthwise(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({1, 48, 48, c}, 1), k = random_tensor({3, 3, c}, 2);
  for (auto _ : state) {
    auto tape = Tape<float>::no_grad();
    benchmark::DoNotOptimize(depthwise_conv2d(tape, x, k, 1, Padding::kSame));
  }
}
BENCHMARK(BM_Depthwise)->Arg(16)->Arg(96);

void BM_Dense(benchmark::State& state) {
  const auto x = random_tensor({32, 1280}, 1), w = random_tensor({1280, 1024}, 2), b = random_tensor({1024}, 3);
  for (auto _ : state) {
    auto tape = Tape<float>::no_grad();
    benchmark::DoNotOptimize(dense(tape, x, w, b));
  }
}
BENCHMARK(BM_Dense);

void BM_LightForward(benchmark::State& state) {
  const Model m = build_model(light_full_spec(0.35), 0);
  const auto x = random_tensor({1, 96, 96, 3}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(m.predict(x));
}
BENCHMARK(BM_LightForward)->Unit(benchmark::kMillisecond);

void BM_LightTrainStep(benchmark::State& state) {
  const Model m = build_model(light_tiny_spec(), 0);
  const auto x = random_tensor({16, 16, 16, 3}, 5);
  const TensorF y({16, 1}, 1.0f);
  TrainConfig cfg;
  OptimState<float> opt;
  std::vector<TensorF> params;
  for (const auto& p : m.parameters()) params.push_back(p.tensor);
  for (auto _ : state) {
    Tape<float> tape;
    m.zero_grad();
    const auto out = m.forward(tape, x, Mode::kTrain);
    tape.backward(bce_loss(tape, out.output, y));
    radam_step<float>(params, opt, cfg, {});
  }
}
BENCHMARK(BM_LightTrainStep)->Unit(benchmark::kMillisecond);

void BM_Quantize(benchmark::State& state) {
  const Model m = build_model(light_full_spec(0.35), 0);
  for (auto _ : state) benchmark::DoNotOptimize(encode_archive(quantize_model(m)));
}
BENCHMARK(BM_Quantize)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
