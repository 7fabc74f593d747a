#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dtz/common/error.hpp"

namespace dtz {

/// Spatial layout of an activation: height x width x channels, stored channel-last.
struct Dims {
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t c = 1;

  constexpr std::size_t count() const { return h * w * c; }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;

  std::string str() const { return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c); }
};

/// Dense row-major array of rank <= 4.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<std::size_t> extents, T fill = T{}) : extents_(std::move(extents)) {
    check_extents();
    data_.assign(product(extents_), fill);
  }

  BasicTensor(std::vector<std::size_t> extents, std::vector<T> data)
      : extents_(std::move(extents)), data_(std::move(data)) {
    check_extents();
    require(data_.size() == product(extents_), ErrorKind::contract,
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_string());
  }

  static BasicTensor of(Dims d, T fill = T{}) { return BasicTensor({d.h, d.w, d.c}, fill); }
  static BasicTensor vector(std::vector<T> values) {
    const auto n = values.size();
    return BasicTensor({n}, std::move(values));
  }

  const std::vector<std::size_t>& extents() const { return extents_; }
  std::size_t rank() const { return extents_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Interprets the extents as an activation layout; leading extents are padded with 1.
  Dims dims() const {
    Dims d;
    switch (extents_.size()) {
      case 0: return Dims{0, 0, 0};
      case 1: d = {1, 1, extents_[0]}; break;
      case 2: d = {1, extents_[0], extents_[1]}; break;
      case 3: d = {extents_[0], extents_[1], extents_[2]}; break;
      default:
        require(extents_[0] == 1, ErrorKind::contract, "rank-4 tensor with batch extent != 1 used as activation");
        d = {extents_[1], extents_[2], extents_[3]};
    }
    return d;
  }

  BasicTensor reshaped(std::vector<std::size_t> extents) const& {
    return BasicTensor(std::move(extents), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < extents_.size(); ++i) s += (i ? "," : "") + std::to_string(extents_[i]);
    return s + "]";
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  static std::size_t product(const std::vector<std::size_t>& e) {
    return std::accumulate(e.begin(), e.end(), std::size_t{1}, std::multiplies<>());
  }

  void check_extents() const {
    require(extents_.size() <= 4, ErrorKind::contract, "tensor rank above 4");
    for (auto e : extents_) require(e > 0, ErrorKind::contract, "tensor extents must be positive");
  }

  std::vector<std::size_t> extents_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Multiply-accumulate with eight independent partial sums; the fixed association
/// order keeps results bit-reproducible while letting the compiler vectorize.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  T tail = T{};
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace dtz
