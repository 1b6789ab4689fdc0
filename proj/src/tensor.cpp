#include "deepcaps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace deepcaps {

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  numel_ = 1;
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (dims_[i] == 0) {
      throw ShapeError("shape " + str() + ": extent of axis " + std::to_string(i) +
                       " must be >= 1");
    }
    if (numel_ > std::numeric_limits<std::size_t>::max() / dims_[i]) {
      throw ShapeError("shape " + str() + ": element count overflows");
    }
    numel_ *= dims_[i];
  }
}

std::size_t Shape::stride(std::size_t axis) const {
  std::size_t s = 1;
  for (std::size_t i = axis + 1; i < dims_.size(); ++i) s *= dims_[i];
  return s;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) os << ',';
    os << dims_[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("tensor " + shape_.str() + " given " + std::to_string(data_.size()) +
                     " values");
  }
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  if (shape.numel() != data_.size()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.rank()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " for tensor " +
                     shape_.str());
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) {
      throw ShapeError("index " + std::to_string(i) + " out of range on axis " +
                       std::to_string(axis) + " of " + shape_.str());
    }
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  }
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<int>;
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace deepcaps
