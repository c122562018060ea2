#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "osar/errors.hpp"

namespace osar {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major n-dimensional array with an optional gradient buffer.
///
/// Four-dimensional tensors follow the batch x channels x height x width
/// convention used by every network in this library.
template <std::floating_point T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) { return data_[offset(b, c, y, x)]; }
  const T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(b, c, y, x)];
  }

  bool has_grad() const noexcept { return grad_.has_value(); }

  /// Allocates a zeroed gradient buffer if none exists.
  void enable_grad() {
    if (!grad_) grad_.emplace(data_.size(), T{0});
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T{0});
  }
  std::span<T> grad() {
    if (!grad_) throw ContractError("tensor has no gradient buffer");
    return *grad_;
  }
  std::span<const T> grad() const {
    if (!grad_) throw ContractError("tensor has no gradient buffer");
    return *grad_;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
  void check_shape() const {
    for (std::size_t d : shape_)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
  }

  std::size_t offset(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return ((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<T> data_;
  std::optional<std::vector<T>> grad_;
};

/// 2x2 average pooling of a B x C x H x W tensor (H, W even). Forward only.
template <std::floating_point T>
Tensor<T> average_pool_2x(const Tensor<T>& in) {
  if (in.rank() != 4 || in.dim(2) % 2 || in.dim(3) % 2)
    throw DimensionError("average_pool_2x needs a 4-D tensor with even spatial dims, got " +
                         shape_string(in.shape()));
  const std::size_t batch = in.dim(0), channels = in.dim(1), h = in.dim(2) / 2, w = in.dim(3) / 2;
  Tensor<T> out({batch, channels, h, w});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          out.at(b, c, y, x) = (in.at(b, c, 2 * y, 2 * x) + in.at(b, c, 2 * y, 2 * x + 1) +
                                in.at(b, c, 2 * y + 1, 2 * x) + in.at(b, c, 2 * y + 1, 2 * x + 1)) /
                               T{4};
  return out;
}

}  // namespace osar
