// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <iterator>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dmf {

using index_t = std::int64_t;

/// Raised when operand extents do not line up. The message names the
/// offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

template <typename... Args>
[[noreturn]] void shape_fail(Args&&... args) {
  throw ShapeError(concat(std::forward<Args>(args)...));
}

}  // namespace detail

/// Extents of a dense tensor, rank 1 to 4, every extent positive.
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<index_t> dims) { assign(dims.begin(), dims.end()); }

  explicit Shape(std::span<const index_t> dims) { assign(dims.begin(), dims.end()); }

  int rank() const { return rank_; }

  index_t operator[](int axis) const {
    if (axis < 0 || axis >= rank_) {
      detail::shape_fail("axis ", axis, " out of range for rank ", rank_);
    }
    return dims_[static_cast<std::size_t>(axis)];
  }

  index_t numel() const {
    index_t n = rank_ == 0 ? 0 : 1;
    for (int i = 0; i < rank_; ++i) n *= dims_[static_cast<std::size_t>(i)];
    return n;
  }

  std::span<const index_t> dims() const {
    return {dims_.data(), static_cast<std::size_t>(rank_)};
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (int i = 0; i < a.rank_; ++i) {
      if (a.dims_[static_cast<std::size_t>(i)] != b.dims_[static_cast<std::size_t>(i)]) return false;
    }
    return true;
  }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < rank_; ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[static_cast<std::size_t>(i)]);
    }
    return s + "]";
  }

 private:
  template <typename It>
  void assign(It first, It last) {
    const auto n = std::distance(first, last);
    if (n < 1 || n > kMaxRank) detail::shape_fail("rank ", n, " outside 1..", kMaxRank);
    rank_ = static_cast<int>(n);
    int i = 0;
    for (; first != last; ++first, ++i) {
      if (*first <= 0) detail::shape_fail("extent ", i, " must be positive, got ", *first);
      dims_[static_cast<std::size_t>(i)] = *first;
    }
  }

  std::array<index_t, kMaxRank> dims_{};
  int rank_ = 0;
};

/// Immutable dense tensor of doubles, row-major, layout (sample, channel,
/// height, width) for rank 4. Copies share storage; the storage address is
/// the identity the differentiation record keys gradients on.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values)
      : storage_(std::make_shared<Storage>(Storage{shape, std::move(values)})) {
    if (static_cast<index_t>(storage_->values.size()) != shape.numel()) {
      detail::shape_fail("data length ", storage_->values.size(), " does not match shape ",
                         shape.str(), " (", shape.numel(), " elements)");
    }
  }

  static Tensor zeros(Shape shape) { return full(shape, 0.0); }

  static Tensor full(Shape shape, double value) {
    return Tensor(shape, std::vector<double>(static_cast<std::size_t>(shape.numel()), value));
  }

  static Tensor scalar(double value) { return Tensor(Shape{1}, {value}); }

  bool defined() const { return storage_ != nullptr; }

  const Shape& shape() const { return checked().shape; }
  int rank() const { return shape().rank(); }
  index_t dim(int axis) const { return shape()[axis]; }
  index_t numel() const { return shape().numel(); }

  std::span<const double> data() const { return checked().values; }
  const std::vector<double>& values() const { return checked().values; }

  double operator[](index_t flat) const { return checked().values[static_cast<std::size_t>(flat)]; }

  double at(index_t n, index_t c, index_t h, index_t w) const {
    const Shape& s = shape();
    return (*this)[((n * s[1] + c) * s[2] + h) * s[3] + w];
  }

  double item() const {
    if (numel() != 1) detail::shape_fail("item() on tensor of shape ", shape().str());
    return (*this)[0];
  }

  bool all_finite() const {
    for (double v : data()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  const void* id() const { return storage_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
  };

  const Storage& checked() const {
    if (!storage_) throw std::logic_error("use of undefined tensor");
    return *storage_;
  }

  std::shared_ptr<const Storage> storage_;
};

inline void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    detail::shape_fail(what, ": expected rank ", rank, ", got shape ", t.shape().str());
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!(a.shape() == b.shape())) {
    for (int i = 0; i < std::min(a.rank(), b.rank()); ++i) {
      if (a.dim(i) != b.dim(i)) {
        detail::shape_fail(what, ": dimension ", i, " differs (", a.dim(i), " vs ", b.dim(i),
                           "), shapes ", a.shape().str(), " and ", b.shape().str());
      }
    }
    detail::shape_fail(what, ": rank differs, shapes ", a.shape().str(), " and ",
                       b.shape().str());
  }
}

}  // namespace dmf
