// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ucad/error.hpp"
#include "ucad/random.hpp"

namespace ucad {

using Shape = std::vector<std::size_t>;

enum class Precision { kSingle, kDouble };

template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Scalar T>
constexpr Precision precision_of() {
  return std::is_same_v<T, float> ? Precision::kSingle : Precision::kDouble;
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor with value semantics.
///
/// Invariant: shape_size(shape()) == data().size(). There are no strided
/// views; every tensor owns its contiguous storage.
template <Scalar T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_size(shape_), T{0}) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_size(shape_) == data_.size(), ErrorKind::kShape,
            "shape " + shape_string(shape_) + " does not match " +
                std::to_string(data_.size()) + " elements");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor filled(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  static Tensor randn(Shape shape, Xoshiro256& rng, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  // Last-axis slice at leading index i (for 2D: row i).
  std::span<T> row(std::size_t i) {
    const std::size_t w = shape_.back();
    return std::span<T>(data_).subspan(i * w, w);
  }
  std::span<const T> row(std::size_t i) const {
    const std::size_t w = shape_.back();
    return std::span<const T>(data_).subspan(i * w, w);
  }

  // Rows [begin, end) of a 2D tensor as a new tensor.
  Tensor rows(std::size_t begin, std::size_t end) const {
    require(ndim() == 2 && begin <= end && end <= shape_[0], ErrorKind::kShape,
            "row range out of bounds");
    const std::size_t w = shape_[1];
    return Tensor({end - begin, w},
                  std::vector<T>(data_.begin() + begin * w,
                                 data_.begin() + end * w));
  }

  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }

  template <Scalar U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  // Element-wise equality; bit-exact for finite values.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

inline void require_shape(bool cond, const std::string& what) {
  require(cond, ErrorKind::kShape, what);
}

}  // namespace ucad
