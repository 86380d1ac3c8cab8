#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dprune {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

// Dense row-major tensor. The payload is immutable and shared between
// copies; a tensor may additionally be linked to one node of a Tape.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<T>>(std::move(data))) {
    if (shape_numel(shape_) != data_->size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match " +
                                  std::to_string(data_->size()) + " values");
    }
  }

  static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static BasicTensor full(Shape shape, T value) {
    const auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value));
  }
  static BasicTensor scalar(T value) { return BasicTensor({}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i < 0 ? i + rank() : i); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool empty() const { return numel() == 0; }
  bool defined() const { return static_cast<bool>(data_); }

  std::span<const T> data() const {
    return data_ ? std::span<const T>(*data_) : std::span<const T>();
  }
  const std::vector<T>& vec() const { return *data_; }
  T operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const {
    if (numel() != 1) throw std::logic_error("tensor: item() on non-scalar " + shape_str(shape_));
    return (*data_)[0];
  }

  Tape<T>* tape() const { return tape_; }
  int node() const { return node_; }
  bool tracked() const { return tape_ != nullptr; }

  BasicTensor detached() const {
    BasicTensor out = *this;
    out.tape_ = nullptr;
    out.node_ = -1;
    return out;
  }

  // Debug check for NaN/Inf.
  bool all_finite() const {
    for (T v : data())
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*data_)[i]);
    return BasicTensor<U>(shape_, std::move(out));
  }

 private:
  friend class Tape<T>;

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

}  // namespace dprune
