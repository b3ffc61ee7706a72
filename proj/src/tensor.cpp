#include "refusion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace refusion {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  numel_ = shape_numel(shape_);
  data_ = std::shared_ptr<double[]>(new double[static_cast<size_t>(numel_)]);
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  Tensor t(std::move(shape));
  std::memset(t.data_.get(), 0, static_cast<size_t>(t.numel_) * sizeof(double));
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.get(), t.data_.get() + t.numel_, v);
  return t;
}

Tensor Tensor::scalar(double v) { return full({}, v); }

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("value count does not match shape " + shape_str(shape));
  Tensor t(std::move(shape));
  std::memcpy(t.data_.get(), values.data(), values.size() * sizeof(double));
  return t;
}

int64_t Tensor::shape(int i) const {
  int n = ndim();
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw ShapeError("axis out of range for " + shape_str(shape_));
  return shape_[i];
}

double Tensor::item() const {
  if (numel_ != 1) throw ShapeError("item() on tensor with shape " + shape_str(shape_));
  return data_.get()[0];
}

Tensor Tensor::clone() const {
  Tensor t(shape_);
  std::memcpy(t.data_.get(), data_.get(), static_cast<size_t>(numel_) * sizeof(double));
  return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
  if (shape_numel(shape) != numel_)
    throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = numel_;
  t.data_ = data_;
  return t;
}

bool Tensor::all_finite() const {
  const double* p = data_.get();
  for (int64_t i = 0; i < numel_; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  const double* p = data_.get();
  for (int64_t i = 0; i < numel_; ++i) m = std::max(m, std::abs(p[i]));
  return m;
}

std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a,
                                     const std::vector<int64_t>& b) {
  size_t n = std::max(a.size(), b.size());
  std::vector<int64_t> out(n, 1);
  for (size_t i = 0; i < n; ++i) {
    int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

}  // namespace refusion
