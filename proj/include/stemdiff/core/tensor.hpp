#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "stemdiff/core/error.hpp"

namespace stemdiff {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major n-d array that owns its storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {
    check_shape();
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor data has " + std::to_string(data_.size()) + " values, shape " +
                       shape_string(shape_) + " needs " + std::to_string(numel(shape_)));
    }
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(axis < 0 ? axis + rank() : axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Same values under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  void reshape(Shape shape) {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Contiguous slab along axis 0.
  Tensor slice0(int index) const {
    Shape inner(shape_.begin() + 1, shape_.end());
    const std::size_t n = numel(inner);
    return Tensor(inner, std::vector<T>(data_.begin() + index * n, data_.begin() + (index + 1) * n));
  }
  void set_slice0(int index, const Tensor& slab) {
    const std::size_t n = data_.size() / shape_.at(0);
    if (slab.size() != n) throw ShapeError("slab size mismatch in set_slice0");
    std::copy(slab.data_.begin(), slab.data_.end(), data_.begin() + index * n);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_shape() const {
    for (int d : shape_) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Stacks equal-shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ShapeError("cannot stack zero tensors");
  Shape shape = items.front().shape();
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items.front().shape()) {
      throw ShapeError("stack: shape " + shape_string(items[i].shape()) + " differs from " +
                       shape_string(items.front().shape()));
    }
    out.set_slice0(static_cast<int>(i), items[i]);
  }
  return out;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* where) {
  if (a != b) {
    throw ShapeError(std::string(where) + ": shape " + shape_string(a) + " vs " + shape_string(b));
  }
}

}  // namespace stemdiff
