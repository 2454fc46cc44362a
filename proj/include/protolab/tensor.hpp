#pragma once

// Dense n-dimensional array of doubles, row-major. The product of the shape
// extents always equals the data length.

#include <cmath>
#include <cstddef>
#include <vector>

#include "protolab/common.hpp"

namespace protolab {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(count(shape_), 0.0);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    PROTOLAB_REQUIRE(data_.size() == count(shape_), "tensor shape ",
                     shape_str(shape_), " does not match data length ",
                     data_.size());
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { data_.assign(data_.size(), v); }

  double item() const {
    PROTOLAB_REQUIRE(size() == 1, "item() on tensor of shape ",
                     shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // flat offsets for the common layouts
  std::size_t offset3(std::size_t c, std::size_t i, std::size_t j) const {
    return (c * shape_[1] + i) * shape_[2] + j;
  }
  double& at3(std::size_t c, std::size_t i, std::size_t j) {
    return data_[offset3(c, i, j)];
  }
  double at3(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[offset3(c, i, j)];
  }
  std::size_t offset2(std::size_t i, std::size_t j) const {
    return i * shape_[1] + j;
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
      PROTOLAB_REQUIRE(e > 0, "zero extent in shape ", shape_str(shape));
      n *= e;
    }
    return n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_str(const Tensor& t) { return shape_str(t.shape()); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  PROTOLAB_REQUIRE(a.same_shape(b), "max_abs_diff: shapes ", shape_str(a),
                   " vs ", shape_str(b));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace protolab
