#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "refusion/errors.hpp"

namespace refusion {

// Dense row-major double tensor with shared storage. Tensors wrapped into the
// autodiff graph are treated as immutable; mutate only during construction.
// The shape constructor leaves memory UNINITIALIZED; use zeros() when the
// fill matters.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double v);
  static Tensor scalar(double v);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> values);

  bool defined() const { return data_ != nullptr; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t shape(int i) const;  // negative indices count from the back
  int64_t numel() const { return numel_; }

  double* data() { return data_.get(); }
  const double* data() const { return data_.get(); }
  double& at(int64_t i) { return data_.get()[i]; }
  double at(int64_t i) const { return data_.get()[i]; }

  double item() const;
  Tensor clone() const;
  // Same storage, new shape (row-major view); numel must match.
  Tensor reshaped(std::vector<int64_t> shape) const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  double max_abs() const;

 private:
  std::vector<int64_t> shape_;
  std::shared_ptr<double[]> data_;
  int64_t numel_ = 0;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

// NumPy-style broadcast of two shapes; throws ShapeError when incompatible.
std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a,
                                     const std::vector<int64_t>& b);

}  // namespace refusion
