#pragma once

// Shared test helpers: brute-force loop oracles, a finite-difference gradient
// checker, and small synthetic data builders. Nothing here calls into the op
// implementations it is used to verify.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aspf/data.hpp"
#include "aspf/model.hpp"
#include "aspf/ops.hpp"
#include "aspf/rng.hpp"
#include "aspf/tensor.hpp"

namespace aspf::test {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

inline TensorD random_tensor(const Shape& shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  return TensorD(shape, random_values(shape_size(shape), gen, lo, hi));
}

inline TensorF to_float(const TensorD& t) { return t.cast<float>(); }

// ---------------------------------------------------------------------------
// Oracles. Accumulation runs over (kh, kw, ci) from zero with the bias added
// last, matching the production summation order so results compare exactly.

inline std::size_t same_out(std::size_t in, std::size_t s) { return (in + s - 1) / s; }

struct Geometry {
  std::size_t oh, ow, pad_top, pad_left;
};

inline Geometry oracle_geometry(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, std::size_t s,
                                Padding padding) {
  if (padding == Padding::kValid) return {(h - kh) / s + 1, (w - kw) / s + 1, 0, 0};
  const std::size_t oh = same_out(h, s), ow = same_out(w, s);
  const long th = static_cast<long>((oh - 1) * s + kh) - static_cast<long>(h);
  const long tw = static_cast<long>((ow - 1) * s + kw) - static_cast<long>(w);
  // The odd padding pixel goes after the data (bottom/right).
  return {oh, ow, static_cast<std::size_t>(std::max(th, 0L) / 2), static_cast<std::size_t>(std::max(tw, 0L) / 2)};
}

template <class T>
std::vector<T> conv2d_oracle(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* bias, std::size_t s,
                             Padding padding) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), ci_n = x.dim(3);
  const std::size_t kh = k.dim(0), kw = k.dim(1), co_n = k.dim(3);
  const auto g = oracle_geometry(h, w, kh, kw, s, padding);
  std::vector<T> out(n * g.oh * g.ow * co_n);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox)
        for (std::size_t co = 0; co < co_n; ++co) {
          T acc = 0;
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j)
              for (std::size_t ci = 0; ci < ci_n; ++ci) {
                const long iy = static_cast<long>(oy * s + i) - static_cast<long>(g.pad_top);
                const long ix = static_cast<long>(ox * s + j) - static_cast<long>(g.pad_left);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += x[((b * h + iy) * w + ix) * ci_n + ci] * k[((i * kw + j) * ci_n + ci) * co_n + co];
              }
          if (bias) acc = acc + (*bias)[co];
          out[((b * g.oh + oy) * g.ow + ox) * co_n + co] = acc;
        }
  return out;
}

template <class T>
std::vector<T> depthwise_oracle(const Tensor<T>& x, const Tensor<T>& k, std::size_t s, Padding padding) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c_n = x.dim(3);
  const std::size_t kh = k.dim(0), kw = k.dim(1);
  const auto g = oracle_geometry(h, w, kh, kw, s, padding);
  std::vector<T> out(n * g.oh * g.ow * c_n);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox)
        for (std::size_t c = 0; c < c_n; ++c) {
          T acc = 0;
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const long iy = static_cast<long>(oy * s + i) - static_cast<long>(g.pad_top);
              const long ix = static_cast<long>(ox * s + j) - static_cast<long>(g.pad_left);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += x[((b * h + iy) * w + ix) * c_n + c] * k[(i * kw + j) * c_n + c];
            }
          out[((b * g.oh + oy) * g.ow + ox) * c_n + c] = acc;
        }
  return out;
}

template <class T>
std::vector<T> dense_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  std::vector<T> out(n * dout);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      T acc = 0;
      for (std::size_t i = 0; i < din; ++i) acc += x[r * din + i] * w[i * dout + o];
      out[r * dout + o] = acc + b[o];
    }
  return out;
}

template <class T>
T bce_oracle(const std::vector<T>& p, const std::vector<T>& y, const std::vector<T>& weight) {
  const T lo = static_cast<T>(1e-7), hi = static_cast<T>(1.0 - 1e-7);
  T total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T pc = p[i] < lo ? lo : (p[i] > hi ? hi : p[i]);
    total += -weight[i] * (y[i] * std::log(pc) + (T{1} - y[i]) * std::log(T{1} - pc));
  }
  return total / static_cast<T>(p.size());
}

struct MetricsOracle {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0, accuracy = 0;
};

inline MetricsOracle metrics_oracle(const std::vector<int>& pred, const std::vector<int>& truth) {
  MetricsOracle m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && truth[i] == 1) m.tp++;
    if (pred[i] == 1 && truth[i] == 0) m.fp++;
    if (pred[i] == 0 && truth[i] == 1) m.fn++;
    if (pred[i] == 0 && truth[i] == 0) m.tn++;
  }
  m.precision = m.tp + m.fp == 0 ? 0.0 : static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  m.recall = m.tp + m.fn == 0 ? 0.0 : static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  m.f1 = m.precision + m.recall == 0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(pred.size());
  return m;
}

// ---------------------------------------------------------------------------
// Finite differences

// Builds a scalar loss from the given inputs on the given tape.
using LossFn = std::function<TensorD(Tape<double>&, const std::vector<TensorD>&)>;

struct GradCheck {
  double rel_error = 0;  // ||a - n|| / max(||a|| + ||n||, 1e-12)
  double analytic_norm = 0;
};

inline GradCheck grad_check(const LossFn& f, std::vector<TensorD> inputs, double step = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape<double> tape;
  const TensorD loss = f(tape, inputs);
  tape.backward(loss);

  double diff2 = 0, a2 = 0, n2 = 0;
  for (auto& t : inputs) {
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.size(), 0.0);
    auto values = t.values();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + step;
      auto t1 = Tape<double>::no_grad();
      const double up = f(t1, inputs).item();
      values[i] = keep - step;
      auto t2 = Tape<double>::no_grad();
      const double down = f(t2, inputs).item();
      values[i] = keep;
      const double numeric = (up - down) / (2 * step);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
  }
  const double a = std::sqrt(a2), n = std::sqrt(n2);
  return {std::sqrt(diff2) / std::max(a + n, 1e-12), a};
}

// sum(out * r) for a fixed random r, so every output element matters.
inline TensorD weighted_sum(Tape<double>& tape, const TensorD& out, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  const TensorD r = random_tensor(out.shape(), gen);
  return sum(tape, mul(tape, out, r));
}

// ---------------------------------------------------------------------------
// Optimizer

// Hand-rolled RAdam on f(x) = a/2 (x - c)^2, straight from the update rule.
struct ScalarRadam {
  double x, m = 0, v = 0;
  std::vector<bool> rectified;

  void step(int t, double a, double c, double lr, double b1, double b2, double eps) {
    const double g = a * (x - c);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double m_hat = m / (1 - std::pow(b1, t));
    const double rho_inf = 2 / (1 - b2) - 1;
    const double bt = std::pow(b2, t);
    const double rho = rho_inf - 2 * t * bt / (1 - bt);
    if (rho > 4) {
      const double r = std::sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho));
      x -= lr * r * m_hat / (std::sqrt(v / (1 - bt)) + eps);
      rectified.push_back(true);
    } else {
      x -= lr * m_hat;
      rectified.push_back(false);
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic data

// Textured (real, uniform noise) versus flat (fake, one random grey level).
inline TensorSource textured_vs_flat(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> px(n * h * w * 3);
  std::vector<Label> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const bool real = i % 2 == 0;
    labels.push_back(real ? Label::kReal : Label::kFake);
    const float base = static_cast<float>(rng.uniform(0.2, 0.8));
    for (std::size_t p = 0; p < h * w * 3; ++p) {
      px[i * h * w * 3 + p] = real ? static_cast<float>(rng.uniform()) : base;
    }
  }
  return TensorSource(TensorF({n, h, w, 3}, px), labels);
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("aspf_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace aspf::test
