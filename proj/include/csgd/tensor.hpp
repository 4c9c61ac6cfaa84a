#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "csgd/errors.hpp"

namespace csgd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major float32 array with an optional gradient buffer.
///
/// A Tensor is a handle: copies share storage, `clone()` makes a deep copy and
/// `reshaped()` a view with a different shape over the same buffers. The
/// gradient buffer is allocated on first access and starts at zero.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), store_(std::make_shared<Storage>()) {
    store_->data.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> values)
      : shape_(std::move(shape)), store_(std::make_shared<Storage>()) {
    if (shape_numel(shape_) != values.size())
      throw ShapeError("tensor shape " + shape_str(shape_) + " holds " +
                       std::to_string(shape_numel(shape_)) + " values, got " +
                       std::to_string(values.size()));
    store_->data = std::move(values);
  }

  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }

  bool defined() const { return store_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return store_ ? store_->data.size() : 0; }

  std::span<float> data() { return store_->data; }
  std::span<const float> data() const { return store_->data; }
  float* ptr() { return store_->data.data(); }
  const float* ptr() const { return store_->data.data(); }
  float item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return store_->data[0];
  }

  bool has_grad() const { return store_ && !store_->grad.empty(); }
  std::span<float> grad() {
    if (store_->grad.size() != store_->data.size()) store_->grad.assign(store_->data.size(), 0.0f);
    return store_->grad;
  }
  std::span<const float> grad() const { return store_->grad; }
  float* grad_ptr() { return grad().data(); }
  void zero_grad() {
    if (store_) store_->grad.clear();
  }

  /// Leaf tensors (parameters, probed inputs) that want a gradient.
  bool requires_grad() const { return store_ && store_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    store_->requires_grad = on;
    return *this;
  }

  Tensor clone() const { return Tensor(shape_, std::vector<float>(store_->data)); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_storage(const Tensor& other) const { return store_ == other.store_; }
  const void* identity() const { return store_.get(); }

  bool all_finite() const {
    return std::all_of(store_->data.begin(), store_->data.end(),
                       [](float v) { return std::isfinite(v); });
  }

  /// Bitwise comparison of shape and values.
  bool bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_ || numel() != other.numel()) return false;
    return std::memcmp(ptr(), other.ptr(), numel() * sizeof(float)) == 0;
  }

 private:
  struct Storage {
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  Shape shape_;
  std::shared_ptr<Storage> store_;
};

inline Tensor uniform_tensor(Shape shape, float lo, float hi, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> dist(lo, hi);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor normal_tensor(Shape shape, float mean, float stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(mean, stddev);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace csgd
