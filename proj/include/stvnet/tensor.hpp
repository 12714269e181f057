#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stvnet/errors.hpp"

namespace stvnet {

using Shape = std::vector<int>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, int e) { return acc * static_cast<std::size_t>(e); });
}

// Spatial extents of one volume. Memory order is x fastest, then y, then z.
struct Extent3 {
  int x = 1;
  int y = 1;
  int z = 1;

  std::size_t voxels() const { return std::size_t(x) * std::size_t(y) * std::size_t(z); }
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

inline std::string to_string(const Extent3& e) {
  return std::to_string(e.x) + "x" + std::to_string(e.y) + "x" + std::to_string(e.z);
}

// Dense row-major N-d array with value semantics.
//
// Feature maps use the 5-d layout (batch, channel, z, y, x) so that the
// innermost axis is x, matching the on-disk volume order.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != numel(shape_)) {
      throw ShapeError("Tensor", "data", "shape " + to_string(shape_) + " needs " +
                                             std::to_string(numel(shape_)) + " values, got " +
                                             std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, T(0)); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Element of a (batch, channel, z, y, x) tensor.
  T& at(int n, int c, int z, int y, int x) { return data_[offset5(n, c, z, y, x)]; }
  const T& at(int n, int c, int z, int y, int x) const { return data_[offset5(n, c, z, y, x)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("reshape", "numel", to_string(shape_) + " -> " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape("operator+=", o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const char* op, const Tensor& o) const {
    if (shape_ != o.shape_) {
      throw ShapeError(op, "all", to_string(shape_) + " vs " + to_string(o.shape_));
    }
  }

  // Extents of a 5-d feature map.
  int batch() const { return dim(0); }
  int channels() const { return dim(1); }
  Extent3 extent() const {
    require_rank(5, "extent");
    return {shape_[4], shape_[3], shape_[2]};
  }
  std::size_t voxels() const { return extent().voxels(); }

  void require_rank(int r, const char* op) const {
    if (rank() != r) {
      throw ShapeError(op, "rank", "expected rank " + std::to_string(r) + ", got " + to_string(shape_));
    }
  }

 private:
  void check_extents() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] < 1) {
        throw ShapeError("Tensor", "axis " + std::to_string(i),
                         "extents must be >= 1, got " + to_string(shape_));
      }
    }
  }

  std::size_t offset5(int n, int c, int z, int y, int x) const {
    return (((std::size_t(n) * shape_[1] + c) * shape_[2] + z) * shape_[3] + y) * shape_[4] + x;
  }

  Shape shape_;
  std::vector<T> data_;
};

inline Shape volume_shape(int batch, int channels, Extent3 e) { return {batch, channels, e.z, e.y, e.x}; }

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape("dot", b);
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape("max_abs_diff", b);
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace stvnet
