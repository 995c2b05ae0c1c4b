#include "aspf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace aspf {

std::string_view to_string(Padding p) { return p == Padding::kSame ? "same" : "valid"; }

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kLinear: return "linear";
    case Activation::kSwish: return "swish";
    case Activation::kRelu6: return "relu6";
    case Activation::kTanh: return "tanh";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kSoftmax: return "softmax";
  }
  return "?";
}

std::string_view to_string(NormKind k) { return k == NormKind::kBatch ? "batch" : "group"; }

Activation parse_activation(std::string_view name) {
  for (auto a : {Activation::kLinear, Activation::kSwish, Activation::kRelu6, Activation::kTanh,
                 Activation::kSigmoid, Activation::kSoftmax}) {
    if (to_string(a) == name) return a;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown activation '" + std::string(name) + "'");
}

Padding parse_padding(std::string_view name) {
  if (name == "same") return Padding::kSame;
  if (name == "valid") return Padding::kValid;
  throw Error(ErrorCode::kInvalidArgument, "unknown padding '" + std::string(name) + "'");
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (stride == 0) throw Error(ErrorCode::kInvalidArgument, "stride must be positive");
  if (kernel == 0) throw Error(ErrorCode::kInvalidArgument, "kernel extent must be positive");
  if (padding == Padding::kSame) return (in + stride - 1) / stride;
  if (in < kernel) {
    throw Error(ErrorCode::kShapeMismatch,
                "valid convolution with kernel " + std::to_string(kernel) + " on extent " + std::to_string(in));
  }
  return (in - kernel) / stride + 1;
}

std::size_t conv_pad_before(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (padding == Padding::kValid) return 0;
  const std::size_t out = conv_output_extent(in, kernel, stride, padding);
  const std::size_t needed = (out - 1) * stride + kernel;
  return needed > in ? (needed - in) / 2 : 0;
}

template <class T>
void check_finite(const Tensor<T>& t, std::string_view op) {
  if (!t.all_finite()) throw Error(ErrorCode::kNonFinite, std::string(op) + " produced NaN/Inf");
}

namespace {

struct ConvGeometry {
  std::size_t n, h, w, cin, kh, kw, oh, ow, stride, pad_top, pad_left;
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& input, std::size_t kh, std::size_t kw, int stride, Padding padding) {
  if (input.rank() != 4) throw Error(ErrorCode::kShapeMismatch, "conv input must be NHWC, got " + shape_string(input.shape()));
  if (stride < 1) throw Error(ErrorCode::kInvalidArgument, "stride must be positive, got " + std::to_string(stride));
  ConvGeometry g{};
  g.n = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.cin = input.dim(3);
  g.kh = kh;
  g.kw = kw;
  g.stride = static_cast<std::size_t>(stride);
  g.oh = conv_output_extent(g.h, kh, g.stride, padding);
  g.ow = conv_output_extent(g.w, kw, g.stride, padding);
  g.pad_top = conv_pad_before(g.h, kh, g.stride, padding);
  g.pad_left = conv_pad_before(g.w, kw, g.stride, padding);
  return g;
}

// Maps an output coordinate plus kernel offset to an input coordinate; returns
// false for taps that fall into zero padding.
inline bool input_coord(std::size_t out, std::size_t k, std::size_t stride, std::size_t pad, std::size_t extent,
                        std::size_t& in) {
  const std::size_t pos = out * stride + k;
  if (pos < pad) return false;
  in = pos - pad;
  return in < extent;
}

template <class T>
T sigmoid_of(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace

template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels,
                 const std::optional<Tensor<T>>& bias, int stride, Padding padding) {
  if (kernels.rank() != 4) throw Error(ErrorCode::kShapeMismatch, "conv2d kernels must be [kh,kw,Cin,Cout]");
  const auto g = conv_geometry(input, kernels.dim(0), kernels.dim(1), stride, padding);
  if (kernels.dim(2) != g.cin) {
    throw Error(ErrorCode::kShapeMismatch, "conv2d input has " + std::to_string(g.cin) + " channels, kernels expect " +
                                               std::to_string(kernels.dim(2)));
  }
  const std::size_t cout = kernels.dim(3);
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw Error(ErrorCode::kShapeMismatch, "conv2d bias must be [" + std::to_string(cout) + "]");
  }
  Tensor<T> out({g.n, g.oh, g.ow, cout});
  const auto x = input.values();
  const auto k = kernels.values();
  auto y = out.values();
  std::vector<T> acc(cout);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oh = 0; oh < g.oh; ++oh) {
      for (std::size_t ow = 0; ow < g.ow; ++ow) {
        std::fill(acc.begin(), acc.end(), T{0});
        for (std::size_t i = 0; i < g.kh; ++i) {
          std::size_t ih;
          if (!input_coord(oh, i, g.stride, g.pad_top, g.h, ih)) continue;
          for (std::size_t j = 0; j < g.kw; ++j) {
            std::size_t iw;
            if (!input_coord(ow, j, g.stride, g.pad_left, g.w, iw)) continue;
            const T* xp = &x[((n * g.h + ih) * g.w + iw) * g.cin];
            const T* kp = &k[(i * g.kw + j) * g.cin * cout];
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
              const T xv = xp[ci];
              const T* kr = kp + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) acc[co] += xv * kr[co];
            }
          }
        }
        T* yp = &y[((n * g.oh + oh) * g.ow + ow) * cout];
        for (std::size_t co = 0; co < cout; ++co) yp[co] = bias ? acc[co] + (*bias)[co] : acc[co];
      }
    }
  }
  check_finite(out, "conv2d");
  const bool with_bias = bias.has_value();
  if (with_bias ? tape.tracks(input, kernels, *bias) : tape.tracks(input, kernels)) {
    out.set_requires_grad();
    Tensor<T> b = with_bias ? *bias : Tensor<T>();
    tape.record("conv2d", out, [=]() mutable {
      auto xin = input;
      auto ker = kernels;
      const auto dy = out.grad();
      const auto xv = xin.values();
      const auto kv = ker.values();
      std::span<T> dx = xin.requires_grad() ? xin.grad_buffer() : std::span<T>();
      std::span<T> dk = ker.requires_grad() ? ker.grad_buffer() : std::span<T>();
      for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t oh = 0; oh < g.oh; ++oh) {
          for (std::size_t ow = 0; ow < g.ow; ++ow) {
            const T* gp = &dy[((n * g.oh + oh) * g.ow + ow) * cout];
            for (std::size_t i = 0; i < g.kh; ++i) {
              std::size_t ih;
              if (!input_coord(oh, i, g.stride, g.pad_top, g.h, ih)) continue;
              for (std::size_t j = 0; j < g.kw; ++j) {
                std::size_t iw;
                if (!input_coord(ow, j, g.stride, g.pad_left, g.w, iw)) continue;
                const std::size_t xbase = ((n * g.h + ih) * g.w + iw) * g.cin;
                const std::size_t kbase = (i * g.kw + j) * g.cin * cout;
                for (std::size_t ci = 0; ci < g.cin; ++ci) {
                  T sx = 0;
                  const T xval = xv[xbase + ci];
                  for (std::size_t co = 0; co < cout; ++co) {
                    sx += gp[co] * kv[kbase + ci * cout + co];
                    if (!dk.empty()) dk[kbase + ci * cout + co] += xval * gp[co];
                  }
                  if (!dx.empty()) dx[xbase + ci] += sx;
                }
              }
            }
          }
        }
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t p = 0; p < dy.size(); ++p) db[p % cout] += dy[p];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> depthwise_conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels, int stride,
                           Padding padding) {
  if (kernels.rank() != 3) throw Error(ErrorCode::kShapeMismatch, "depthwise kernels must be [kh,kw,C]");
  const auto g = conv_geometry(input, kernels.dim(0), kernels.dim(1), stride, padding);
  const std::size_t c = g.cin;
  if (kernels.dim(2) != c) {
    throw Error(ErrorCode::kShapeMismatch, "depthwise input has " + std::to_string(c) + " channels, kernels expect " +
                                               std::to_string(kernels.dim(2)));
  }
  Tensor<T> out({g.n, g.oh, g.ow, c});
  const auto x = input.values();
  const auto k = kernels.values();
  auto y = out.values();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oh = 0; oh < g.oh; ++oh) {
      for (std::size_t ow = 0; ow < g.ow; ++ow) {
        T* yp = &y[((n * g.oh + oh) * g.ow + ow) * c];
        for (std::size_t i = 0; i < g.kh; ++i) {
          std::size_t ih;
          if (!input_coord(oh, i, g.stride, g.pad_top, g.h, ih)) continue;
          for (std::size_t j = 0; j < g.kw; ++j) {
            std::size_t iw;
            if (!input_coord(ow, j, g.stride, g.pad_left, g.w, iw)) continue;
            const T* xp = &x[((n * g.h + ih) * g.w + iw) * c];
            const T* kp = &k[(i * g.kw + j) * c];
            for (std::size_t ch = 0; ch < c; ++ch) yp[ch] += xp[ch] * kp[ch];
          }
        }
      }
    }
  }
  check_finite(out, "depthwise_conv2d");
  if (tape.tracks(input, kernels)) {
    out.set_requires_grad();
    tape.record("depthwise_conv2d", out, [=]() mutable {
      auto xin = input;
      auto ker = kernels;
      const auto dy = out.grad();
      const auto xv = xin.values();
      const auto kv = ker.values();
      std::span<T> dx = xin.requires_grad() ? xin.grad_buffer() : std::span<T>();
      std::span<T> dk = ker.requires_grad() ? ker.grad_buffer() : std::span<T>();
      for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t oh = 0; oh < g.oh; ++oh) {
          for (std::size_t ow = 0; ow < g.ow; ++ow) {
            const T* gp = &dy[((n * g.oh + oh) * g.ow + ow) * c];
            for (std::size_t i = 0; i < g.kh; ++i) {
              std::size_t ih;
              if (!input_coord(oh, i, g.stride, g.pad_top, g.h, ih)) continue;
              for (std::size_t j = 0; j < g.kw; ++j) {
                std::size_t iw;
                if (!input_coord(ow, j, g.stride, g.pad_left, g.w, iw)) continue;
                const std::size_t xbase = ((n * g.h + ih) * g.w + iw) * c;
                const std::size_t kbase = (i * g.kw + j) * c;
                for (std::size_t ch = 0; ch < c; ++ch) {
                  if (!dx.empty()) dx[xbase + ch] += gp[ch] * kv[kbase + ch];
                  if (!dk.empty()) dk[kbase + ch] += gp[ch] * xv[xbase + ch];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> dense(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (input.rank() != 2 || weights.rank() != 2 || bias.rank() != 1) {
    throw Error(ErrorCode::kShapeMismatch, "dense expects x[N,Din], W[Din,Dout], b[Dout]");
  }
  const std::size_t n = input.dim(0), din = input.dim(1), dout = weights.dim(1);
  if (weights.dim(0) != din || bias.dim(0) != dout) {
    throw Error(ErrorCode::kShapeMismatch, "dense: x" + shape_string(input.shape()) + " W" +
                                               shape_string(weights.shape()) + " b" + shape_string(bias.shape()));
  }
  Tensor<T> out({n, dout});
  const auto x = input.values();
  const auto w = weights.values();
  const auto b = bias.values();
  auto y = out.values();
  std::vector<T> acc(dout);
  for (std::size_t r = 0; r < n; ++r) {
    std::fill(acc.begin(), acc.end(), T{0});
    for (std::size_t i = 0; i < din; ++i) {
      const T xv = x[r * din + i];
      const T* wr = &w[i * dout];
      for (std::size_t o = 0; o < dout; ++o) acc[o] += xv * wr[o];
    }
    for (std::size_t o = 0; o < dout; ++o) y[r * dout + o] = acc[o] + b[o];
  }
  check_finite(out, "dense");
  if (tape.tracks(input, weights, bias)) {
    out.set_requires_grad();
    tape.record("dense", out, [=]() mutable {
      auto xin = input;
      auto win = weights;
      auto bin = bias;
      const auto dy = out.grad();
      const auto xv = xin.values();
      const auto wv = win.values();
      if (xin.requires_grad()) {
        auto dx = xin.grad_buffer();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t i = 0; i < din; ++i) {
            T s = 0;
            for (std::size_t o = 0; o < dout; ++o) s += dy[r * dout + o] * wv[i * dout + o];
            dx[r * din + i] += s;
          }
        }
      }
      if (win.requires_grad()) {
        auto dw = win.grad_buffer();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t i = 0; i < din; ++i) {
            const T xval = xv[r * din + i];
            for (std::size_t o = 0; o < dout; ++o) dw[i * dout + o] += xval * dy[r * dout + o];
          }
        }
      }
      if (bin.requires_grad()) {
        auto db = bin.grad_buffer();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t o = 0; o < dout; ++o) db[o] += dy[r * dout + o];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> activate(Tape<T>& tape, Activation kind, const Tensor<T>& x) {
  if (kind == Activation::kLinear) return x;
  Tensor<T> out(x.shape());
  const auto xv = x.values();
  auto y = out.values();
  if (kind == Activation::kSoftmax) {
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = &xv[r * cols];
      const T peak = *std::max_element(row, row + cols);
      T total = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        y[r * cols + c] = std::exp(row[c] - peak);
        total += y[r * cols + c];
      }
      for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= total;
    }
  } else {
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      switch (kind) {
        case Activation::kSwish: y[i] = v * sigmoid_of(v); break;
        case Activation::kRelu6: y[i] = std::clamp(v, T{0}, T{6}); break;
        case Activation::kTanh: y[i] = std::tanh(v); break;
        case Activation::kSigmoid: y[i] = sigmoid_of(v); break;
        default: break;
      }
    }
  }
  check_finite(out, to_string(kind));
  if (tape.tracks(x)) {
    out.set_requires_grad();
    tape.record(std::string(to_string(kind)), out, [=]() mutable {
      auto xin = x;
      const auto dy = out.grad();
      const auto yv = out.values();
      const auto xs = xin.values();
      auto dx = xin.grad_buffer();
      if (kind == Activation::kSoftmax) {
        const std::size_t cols = xin.shape().back();
        const std::size_t rows = xin.size() / cols;
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t c = 0; c < cols; ++c) dot += dy[r * cols + c] * yv[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += yv[r * cols + c] * (dy[r * cols + c] - dot);
        }
        return;
      }
      for (std::size_t i = 0; i < xs.size(); ++i) {
        T d = 0;
        switch (kind) {
          case Activation::kSwish: {
            const T s = sigmoid_of(xs[i]);
            d = s + xs[i] * s * (T{1} - s);
            break;
          }
          case Activation::kRelu6: d = (xs[i] > T{0} && xs[i] < T{6}) ? T{1} : T{0}; break;
          case Activation::kTanh: d = T{1} - yv[i] * yv[i]; break;
          case Activation::kSigmoid: d = yv[i] * (T{1} - yv[i]); break;
          default: break;
        }
        dx[i] += dy[i] * d;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> normalize(Tape<T>& tape, const NormConfig& cfg, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, Mode mode, RunningStats<T>* stats) {
  if (!(cfg.eps > 0)) throw Error(ErrorCode::kInvalidArgument, "normalization eps must be positive");
  if (x.rank() != 2 && x.rank() != 4) {
    throw Error(ErrorCode::kShapeMismatch, "normalize expects [N,C] or [N,H,W,C], got " + shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0);
  const std::size_t c = x.shape().back();
  const std::size_t spatial = x.size() / (n * c);
  if (gamma.size() != c || beta.size() != c) throw Error(ErrorCode::kShapeMismatch, "gamma/beta must have C entries");
  const bool is_group = cfg.kind == NormKind::kGroup;
  std::size_t groups = 1;
  if (is_group) {
    if (cfg.groups < 1 || c % static_cast<std::size_t>(cfg.groups) != 0) {
      throw Error(ErrorCode::kInvalidArgument,
                  std::to_string(c) + " channels not divisible into " + std::to_string(cfg.groups) + " groups");
    }
    groups = static_cast<std::size_t>(cfg.groups);
  }
  const bool use_running = !is_group && mode == Mode::kInfer;
  if (!is_group && stats == nullptr) throw Error(ErrorCode::kInvalidArgument, "batch norm requires running stats");
  if (!is_group && (stats->mean.size() != c || stats->var.size() != c)) {
    throw Error(ErrorCode::kShapeMismatch, "running stats must have C entries");
  }

  // A normalization set is indexed by `set`; each element (sample, pixel,
  // channel) belongs to exactly one set.
  const std::size_t group_width = c / groups;
  const std::size_t sets = is_group ? n * groups : c;
  const T eps = static_cast<T>(cfg.eps);
  auto set_of = [is_group, groups, group_width](std::size_t sample, std::size_t ch) { return is_group ? sample * groups + ch / group_width : ch; };

  std::vector<T> set_mean(sets, T{0}), set_inv(sets, T{0});
  const auto xv = x.values();
  if (use_running) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      set_mean[ch] = stats->mean[ch];
      set_inv[ch] = T{1} / std::sqrt(stats->var[ch] + eps);
    }
  } else {
    std::vector<T> count(sets, T{0}), var(sets, T{0});
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < spatial; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t k = set_of(s, ch);
          set_mean[k] += xv[(s * spatial + p) * c + ch];
          count[k] += T{1};
        }
      }
    }
    for (std::size_t k = 0; k < sets; ++k) set_mean[k] /= count[k];
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < spatial; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t k = set_of(s, ch);
          const T d = xv[(s * spatial + p) * c + ch] - set_mean[k];
          var[k] += d * d;
        }
      }
    }
    for (std::size_t k = 0; k < sets; ++k) {
      var[k] /= count[k];
      set_inv[k] = T{1} / std::sqrt(var[k] + eps);
    }
    if (!is_group && mode == Mode::kTrain) {
      const T m = static_cast<T>(cfg.momentum);
      for (std::size_t ch = 0; ch < c; ++ch) {
        stats->mean[ch] = m * stats->mean[ch] + (T{1} - m) * set_mean[ch];
        stats->var[ch] = m * stats->var[ch] + (T{1} - m) * var[ch];
      }
    }
  }

  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  auto y = out.values();
  auto xh = xhat.values();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t p = 0; p < spatial; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t i = (s * spatial + p) * c + ch;
        const std::size_t k = set_of(s, ch);
        xh[i] = (xv[i] - set_mean[k]) * set_inv[k];
        y[i] = gamma[ch] * xh[i] + beta[ch];
      }
    }
  }
  check_finite(out, "normalize");
  if (tape.tracks(x, gamma, beta)) {
    out.set_requires_grad();
    tape.record("normalize", out, [=]() mutable {
      auto xin = x;
      auto gin = gamma;
      auto bin = beta;
      const auto dy = out.grad();
      const auto xhv = xhat.values();
      if (gin.requires_grad() || bin.requires_grad()) {
        auto dg = gin.grad_buffer();
        auto db = bin.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) {
          dg[i % c] += dy[i] * xhv[i];
          db[i % c] += dy[i];
        }
      }
      if (!xin.requires_grad()) return;
      auto dx = xin.grad_buffer();
      if (use_running) {
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * gin[i % c] * set_inv[i % c];
        return;
      }
      // dx = inv * (g - mean(g) - xhat * mean(g * xhat)) with g = dy * gamma,
      // means taken over each normalization set.
      std::vector<T> mean_g(sets, T{0}), mean_gx(sets, T{0}), count(sets, T{0});
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t p = 0; p < spatial; ++p) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t i = (s * spatial + p) * c + ch;
            const std::size_t k = set_of(s, ch);
            const T gi = dy[i] * gin[ch];
            mean_g[k] += gi;
            mean_gx[k] += gi * xhv[i];
            count[k] += T{1};
          }
        }
      }
      for (std::size_t k = 0; k < sets; ++k) {
        mean_g[k] /= count[k];
        mean_gx[k] /= count[k];
      }
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t p = 0; p < spatial; ++p) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t i = (s * spatial + p) * c + ch;
            const std::size_t k = set_of(s, ch);
            dx[i] += set_inv[k] * (dy[i] * gin[ch] - mean_g[k] - xhv[i] * mean_gx[k]);
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> dropconnect(Tape<T>& tape, const Tensor<T>& weights, double rate, Rng& rng, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "dropconnect rate must be in [0,1), got " + std::to_string(rate));
  }
  if (mode == Mode::kInfer || rate == 0.0) return weights;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(weights.size());
  for (auto& m : mask) m = rng.bernoulli(rate) ? T{0} : keep_scale;
  Tensor<T> out(weights.shape());
  auto y = out.values();
  const auto w = weights.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = w[i] * mask[i];
  if (tape.tracks(weights)) {
    out.set_requires_grad();
    tape.record("dropconnect", out, [=, mask = std::move(mask)]() mutable {
      auto win = weights;
      const auto dy = out.grad();
      auto dw = win.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) dw[i] += dy[i] * mask[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 4) throw Error(ErrorCode::kShapeMismatch, "global_avg_pool expects NHWC");
  const std::size_t n = x.dim(0), c = x.dim(3), spatial = x.dim(1) * x.dim(2);
  Tensor<T> out({n, c});
  const auto xv = x.values();
  auto y = out.values();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t p = 0; p < spatial; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) y[s * c + ch] += xv[(s * spatial + p) * c + ch];
    }
    for (std::size_t ch = 0; ch < c; ++ch) y[s * c + ch] /= static_cast<T>(spatial);
  }
  check_finite(out, "global_avg_pool");
  if (tape.tracks(x)) {
    out.set_requires_grad();
    tape.record("global_avg_pool", out, [=]() mutable {
      auto xin = x;
      const auto dy = out.grad();
      auto dx = xin.grad_buffer();
      const T inv = T{1} / static_cast<T>(spatial);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t p = 0; p < spatial; ++p) {
          for (std::size_t ch = 0; ch < c; ++ch) dx[(s * spatial + p) * c + ch] += dy[s * c + ch] * inv;
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::kShapeMismatch, "add " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  check_finite(out, "add");
  if (tape.tracks(a, b)) {
    out.set_requires_grad();
    tape.record("add", out, [=]() mutable {
      auto ain = a;
      auto bin = b;
      const auto dy = out.grad();
      if (ain.requires_grad()) {
        auto da = ain.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (bin.requires_grad()) {
        auto db = bin.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::kShapeMismatch, "mul " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  check_finite(out, "mul");
  if (tape.tracks(a, b)) {
    out.set_requires_grad();
    tape.record("mul", out, [=]() mutable {
      auto ain = a;
      auto bin = b;
      const auto dy = out.grad();
      if (ain.requires_grad()) {
        auto da = ain.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bin[i];
      }
      if (bin.requires_grad()) {
        auto db = bin.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * ain[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T total = 0;
  for (const T v : x.values()) total += v;
  Tensor<T> out({1}, std::vector<T>{total});
  check_finite(out, "sum");
  if (tape.tracks(x)) {
    out.set_requires_grad();
    tape.record("sum", out, [=]() mutable {
      auto xin = x;
      const T g = out.grad()[0];
      for (auto& d : xin.grad_buffer()) d += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  T total = 0;
  for (const T v : x.values()) total += v;
  const T count = static_cast<T>(x.size());
  Tensor<T> out({1}, std::vector<T>{total / count});
  check_finite(out, "mean");
  if (tape.tracks(x)) {
    out.set_requires_grad();
    tape.record("mean", out, [=]() mutable {
      auto xin = x;
      const T g = out.grad()[0] / count;
      for (auto& d : xin.grad_buffer()) d += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> select_column(Tape<T>& tape, const Tensor<T>& x, std::size_t index) {
  if (x.rank() != 2 || index >= x.dim(1)) {
    throw Error(ErrorCode::kShapeMismatch, "select_column " + std::to_string(index) + " of " + shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor<T> out({n, 1});
  for (std::size_t r = 0; r < n; ++r) out[r] = x[r * k + index];
  if (tape.tracks(x)) {
    out.set_requires_grad();
    tape.record("select_column", out, [=]() mutable {
      auto xin = x;
      const auto dy = out.grad();
      auto dx = xin.grad_buffer();
      for (std::size_t r = 0; r < n; ++r) dx[r * k + index] += dy[r];
    });
  }
  return out;
}

#define ASPF_INSTANTIATE_OPS(T)                                                                                  \
  template void check_finite<T>(const Tensor<T>&, std::string_view);                                            \
  template Tensor<T> conv2d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&, int, \
                               Padding);                                                                        \
  template Tensor<T> depthwise_conv2d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, int, Padding);            \
  template Tensor<T> dense<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> activate<T>(Tape<T>&, Activation, const Tensor<T>&);                                        \
  template Tensor<T> normalize<T>(Tape<T>&, const NormConfig&, const Tensor<T>&, const Tensor<T>&,               \
                                  const Tensor<T>&, Mode, RunningStats<T>*);                                     \
  template Tensor<T> dropconnect<T>(Tape<T>&, const Tensor<T>&, double, Rng&, Mode);                             \
  template Tensor<T> global_avg_pool<T>(Tape<T>&, const Tensor<T>&);                                             \
  template Tensor<T> add<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sum<T>(Tape<T>&, const Tensor<T>&);                                                         \
  template Tensor<T> mean<T>(Tape<T>&, const Tensor<T>&);                                                        \
  template Tensor<T> select_column<T>(Tape<T>&, const Tensor<T>&, std::size_t);

ASPF_INSTANTIATE_OPS(float)
ASPF_INSTANTIATE_OPS(double)

}  // namespace aspf
