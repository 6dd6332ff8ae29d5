#pragma once

#include <algorithm>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <vector>

#include "nfcs/common.hpp"
#include "nfcs/rng.hpp"

namespace nfcs {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    NFCS_REQUIRE(d >= 0, "negative dimension in shape");
    n *= static_cast<size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); i++) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

// Dense row-major N-D array. Storage is shared on copy; every op in the tape
// produces a fresh buffer, so buffers are treated as immutable once exposed.
// Mutating accessors exist for construction and optimizer state only.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    t.shape_ = std::move(shape);
    t.store_ = std::make_shared<std::vector<T>>(shape_numel(t.shape_), T(0));
    return t;
  }

  static TensorT full(Shape shape, T v) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.store_->begin(), t.store_->end(), v);
    return t;
  }

  static TensorT from(Shape shape, std::vector<T> values) {
    NFCS_REQUIRE(shape_numel(shape) == values.size(), "tensor data size ",
                 values.size(), " does not match shape ", shape_str(shape));
    TensorT t;
    t.shape_ = std::move(shape);
    t.store_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static TensorT randn(Shape shape, Rng& rng, double stddev = 1.0) {
    TensorT t = zeros(std::move(shape));
    for (T& v : *t.store_) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  bool defined() const { return static_cast<bool>(store_); }
  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  size_t numel() const { return store_ ? store_->size() : 0; }

  T* data() { return store_->data(); }
  const T* data() const { return store_->data(); }
  std::vector<T>& vec() { return *store_; }
  const std::vector<T>& vec() const { return *store_; }

  T& operator[](size_t i) { return (*store_)[i]; }
  T operator[](size_t i) const { return (*store_)[i]; }

  // 4-D accessor (NCHW); bounds unchecked in release paths.
  T& at4(int n, int c, int y, int x) {
    return (*store_)[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  T at4(int n, int c, int y, int x) const {
    return (*store_)[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  TensorT clone() const {
    TensorT t;
    t.shape_ = shape_;
    if (store_) t.store_ = std::make_shared<std::vector<T>>(*store_);
    return t;
  }

  TensorT reshaped(Shape s) const {
    NFCS_REQUIRE(shape_numel(s) == numel(), "reshape ", shape_str(shape_),
                 " -> ", shape_str(s), " changes element count");
    TensorT t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> t = TensorT<U>::zeros(shape_);
    const T* src = data();
    for (size_t i = 0; i < numel(); i++) t[i] = static_cast<U>(src[i]);
    return t;
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> store_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace nfcs
