#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aspf/tensor.hpp"

namespace aspf {

// Records the ops of one forward pass in execution order. backward() walks the
// record once in reverse, accumulating into the grad buffers of every tensor
// that requires gradients, then marks the tape consumed.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  // A disabled tape records nothing; ops still run forward.
  static Tape no_grad() {
    Tape tape;
    tape.enabled_ = false;
    return tape;
  }

  bool enabled() const { return enabled_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }

  // True when `output` should be tracked, i.e. any input requires grad.
  template <class... Ts>
  bool tracks(const Ts&... inputs) const {
    return enabled_ && (... || inputs.requires_grad());
  }

  void record(std::string op, Tensor<T> output, BackwardFn backward) {
    if (consumed_) throw Error(ErrorCode::kTapeConsumed, "cannot record '" + op + "' on a consumed tape");
    entries_.push_back(Entry{std::move(op), std::move(output), std::move(backward)});
  }

  void backward(Tensor<T> loss) {
    if (consumed_) throw Error(ErrorCode::kTapeConsumed, "backward called twice on the same tape");
    if (loss.size() != 1) throw Error(ErrorCode::kNotScalar, "loss has shape " + shape_string(loss.shape()));
    if (entries_.empty()) throw Error(ErrorCode::kEmptyInput, "backward on an empty tape");
    if (!loss.requires_grad()) throw Error(ErrorCode::kInvalidArgument, "loss does not depend on any tracked tensor");
    loss.grad_buffer()[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
    consumed_ = true;
    entries_.clear();
  }

  const std::string& op_name(std::size_t i) const { return entries_.at(i).op; }

 private:
  struct Entry {
    std::string op;
    Tensor<T> output;
    BackwardFn backward;
  };

  std::vector<Entry> entries_;
  bool enabled_ = true;
  bool consumed_ = false;
};

}  // namespace aspf
