#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aspf/error.hpp"

namespace aspf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

// Dense row-major tensor handle. Copies share storage; use clone() for a deep
// copy. Values are treated as immutable once an op has produced them; only
// gradient buffers (and parameter values, by the optimizer) are written later.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : storage_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape, T fill = T{0}) : storage_(std::make_shared<Storage>()) {
    check_extents(shape);
    storage_->values.assign(shape_size(shape), fill);
    storage_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : storage_(std::make_shared<Storage>()) {
    check_extents(shape);
    if (shape_size(shape) != values.size()) {
      throw Error(ErrorCode::kShapeMismatch, "shape " + shape_string(shape) + " holds " +
                                                 std::to_string(shape_size(shape)) + " values, got " +
                                                 std::to_string(values.size()));
    }
    storage_->shape = std::move(shape);
    storage_->values = std::move(values);
  }

  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return storage_->shape.at(axis); }
  std::size_t size() const { return storage_->values.size(); }
  bool empty() const { return storage_->shape.empty(); }

  std::span<T> values() { return storage_->values; }
  std::span<const T> values() const { return storage_->values; }
  const std::vector<T>& vector() const { return storage_->values; }
  T& operator[](std::size_t i) { return storage_->values[i]; }
  const T& operator[](std::size_t i) const { return storage_->values[i]; }
  T item() const {
    if (size() != 1) throw Error(ErrorCode::kNotScalar, "item() on " + shape_string(shape()));
    return storage_->values[0];
  }

  bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    storage_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const T> grad() const { return storage_->grad; }
  std::span<T> grad() { return storage_->grad; }
  // Allocates a zeroed gradient buffer on first use.
  std::span<T> grad_buffer() {
    if (storage_->grad.empty()) storage_->grad.assign(size(), T{0});
    return storage_->grad;
  }
  void zero_grad() { storage_->grad.clear(); }

  Tensor clone() const {
    Tensor copy(shape(), storage_->values);
    copy.storage_->requires_grad = storage_->requires_grad;
    return copy;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>(storage_->values[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  bool all_finite() const {
    for (const T v : storage_->values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  static void check_extents(const Shape& shape) {
    for (const std::size_t d : shape) {
      if (d == 0) throw Error(ErrorCode::kShapeMismatch, "zero extent in shape " + shape_string(shape));
    }
  }

  std::shared_ptr<Storage> storage_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

inline std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

}  // namespace aspf
