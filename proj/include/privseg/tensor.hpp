// tensor.hpp - dense row-major N-d array used throughout the library.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace privseg {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw std::invalid_argument("negative tensor extent");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
  Tensor(Shape shape, T fill)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw std::invalid_argument("tensor data/shape mismatch");
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t ndim() const { return shape_.size(); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-d to 4-d accessors (row-major, last index fastest).
  T& at(int64_t a, int64_t b) { return data_[static_cast<size_t>(a * shape_[1] + b)]; }
  const T& at(int64_t a, int64_t b) const {
    return data_[static_cast<size_t>(a * shape_[1] + b)];
  }
  T& at(int64_t a, int64_t b, int64_t c) {
    return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
  }
  const T& at(int64_t a, int64_t b, int64_t c) const {
    return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
  }
  T& at(int64_t a, int64_t b, int64_t c, int64_t d) {
    return data_[static_cast<size_t>(
        ((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }
  const T& at(int64_t a, int64_t b, int64_t c, int64_t d) const {
    return data_[static_cast<size_t>(
        ((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // this += alpha * other
  void axpy(T alpha, const Tensor& other) {
    if (!same_shape(other)) throw std::invalid_argument("axpy shape mismatch");
    const T* src = other.data();
    T* dst = data();
    for (int64_t i = 0, n = size(); i < n; ++i) dst[i] += alpha * src[i];
  }

  void scale(T alpha) {
    for (auto& v : data_) v *= alpha;
  }

  T sum() const {
    T acc = T(0);
    for (const auto& v : data_) acc += v;
    return acc;
  }

  double norm2() const {
    double acc = 0.0;
    for (const auto& v : data_) acc += double(v) * double(v);
    return std::sqrt(acc);
  }

  bool all_finite() const {
    for (const auto& v : data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff shape mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace privseg
