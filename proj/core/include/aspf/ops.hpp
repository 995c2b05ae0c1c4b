#pragma once

#include <cstddef>
#include <optional>
#include <string_view>

#include "aspf/rng.hpp"
#include "aspf/tape.hpp"
#include "aspf/tensor.hpp"

// Forward operators with reverse-mode rules. Every op takes the tape first; it
// records a backward closure only when some input requires gradients and the
// tape is enabled. Layout is NHWC throughout; kernels are [kh, kw, Cin, Cout].
namespace aspf {

enum class Padding { kValid, kSame };
enum class Activation { kLinear, kSwish, kRelu6, kTanh, kSigmoid, kSoftmax };
enum class Mode { kTrain, kInfer };
enum class NormKind { kBatch, kGroup };

std::string_view to_string(Padding p);
std::string_view to_string(Activation a);
std::string_view to_string(NormKind k);
Activation parse_activation(std::string_view name);
Padding parse_padding(std::string_view name);

struct NormConfig {
  NormKind kind = NormKind::kBatch;
  int groups = 8;  // group norm only
  double eps = 1e-5;
  double momentum = 0.99;  // batch norm running statistics
};

template <class T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
};

// Output extent along one spatial axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);
// Zero rows/cols added before the first input pixel (`same` puts any odd pixel after).
std::size_t conv_pad_before(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);

template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels,
                 const std::optional<Tensor<T>>& bias, int stride, Padding padding);

// kernels: [kh, kw, C]
template <class T>
Tensor<T> depthwise_conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels, int stride,
                           Padding padding);

template <class T>
Tensor<T> dense(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);

// Softmax acts on the last axis; all other kinds are elementwise.
template <class T>
Tensor<T> activate(Tape<T>& tape, Activation kind, const Tensor<T>& x);

// x is [N, C] or [N, H, W, C]. Batch norm reads and (in train mode) updates
// `stats`; group norm ignores mode and stats.
template <class T>
Tensor<T> normalize(Tape<T>& tape, const NormConfig& cfg, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, Mode mode, RunningStats<T>* stats);

template <class T>
Tensor<T> dropconnect(Tape<T>& tape, const Tensor<T>& weights, double rate, Rng& rng, Mode mode);

template <class T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x);

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x);

// Column `index` of an [N, K] tensor as [N, 1].
template <class T>
Tensor<T> select_column(Tape<T>& tape, const Tensor<T>& x, std::size_t index);

// Throws kNonFinite naming `op` if any value is NaN or infinite.
template <class T>
void check_finite(const Tensor<T>& t, std::string_view op);

}  // namespace aspf
