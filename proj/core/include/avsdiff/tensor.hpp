#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "avsdiff/common.hpp"

namespace avsdiff {

/// Dense row-major f64 tensor. Plain value type: copy and move behave like
/// std::vector, equality is bitwise over shape and data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);  // zero-filled
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Multi-index access for tests and small kernels.
  double& at(int i);
  double& at(int i, int j);
  double& at(int i, int j, int k);
  double& at(int i, int j, int k, int l);
  double at(int i) const { return const_cast<Tensor*>(this)->at(i); }
  double at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }
  double at(int i, int j, int k) const { return const_cast<Tensor*>(this)->at(i, j, k); }
  double at(int i, int j, int k, int l) const {
    return const_cast<Tensor*>(this)->at(i, j, k, l);
  }

  /// Value of a 1-element tensor.
  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<int>& shape);

/// Throws DimensionError naming both shapes unless they match.
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace avsdiff
