#pragma once

#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "deepcaps/error.hpp"

namespace deepcaps {

// Ordered list of positive extents.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}
  explicit Shape(std::vector<std::size_t> dims);

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  std::size_t numel() const { return numel_; }
  const std::vector<std::size_t>& dims() const { return dims_; }

  // Product of extents strictly after `axis`.
  std::size_t stride(std::size_t axis) const;

  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b) { return a.dims_ == b.dims_; }
  friend bool operator!=(const Shape& a, const Shape& b) { return !(a == b); }

 private:
  std::vector<std::size_t> dims_;
  std::size_t numel_ = 1;
};

// Dense row-major buffer. Plain value type: copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t rank() const { return shape_.rank(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() & { return data_; }
  std::span<const T> data() const& { return data_; }
  // A temporary hands over its storage so range-for over it stays valid.
  std::vector<T> data() && { return std::move(data_); }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() & { return data_; }
  const std::vector<T>& storage() const& { return data_; }
  std::vector<T> storage() && { return std::move(data_); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

  // Same buffer, new shape with identical element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t);

// Max |a-b| over elements; shapes must match.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace deepcaps
