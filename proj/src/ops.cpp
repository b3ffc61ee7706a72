#include "refusion/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace refusion::ad::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

const Value& in(const Value& self, size_t i) { return self.node()->inputs[i]; }

Value undef() { return Value(); }

// Strides of `shape` aligned to the tail of `out_shape`; 0 where broadcast.
std::vector<int64_t> bcast_strides(const std::vector<int64_t>& shape,
                                   const std::vector<int64_t>& out_shape) {
  std::vector<int64_t> strides(out_shape.size(), 0);
  int64_t s = 1;
  int off = static_cast<int>(out_shape.size() - shape.size());
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    if (shape[i] != 1) strides[off + i] = s;
    s *= shape[i];
  }
  return strides;
}

// Fast path when one side has the full output shape and the other broadcasts:
// iterate whole inner blocks with the small operand constant per block.
// Covers the hot patterns (channel bias [C,1,1], row reductions [...,N,1]).
template <class F>
bool block_broadcast(const Tensor& big, const Tensor& small, Tensor& out, F f,
                     bool small_is_rhs) {
  const auto& os = big.shape();
  const auto ss = bcast_strides(small.shape(), os);
  const int nd = static_cast<int>(os.size());
  int split = nd;
  while (split > 0 && ss[split - 1] == 0) --split;
  int64_t inner = 1;
  for (int d = split; d < nd; ++d) inner *= os[d];
  if (inner < 8) return false;
  const double* pb = big.data();
  const double* ps = small.data();
  double* po = out.data();
  std::vector<int64_t> coord(split, 0);
  int64_t soff = 0;
  const int64_t blocks = big.numel() / inner;
  for (int64_t blk = 0; blk < blocks; ++blk) {
    const double sv = ps[soff];
    const double* src = pb + blk * inner;
    double* dst = po + blk * inner;
    if (small_is_rhs)
      for (int64_t i = 0; i < inner; ++i) dst[i] = f(src[i], sv);
    else
      for (int64_t i = 0; i < inner; ++i) dst[i] = f(sv, src[i]);
    for (int d = split - 1; d >= 0; --d) {
      coord[d]++;
      soff += ss[d];
      if (coord[d] < os[d]) break;
      coord[d] = 0;
      soff -= ss[d] * os[d];
    }
  }
  return true;
}

template <class F>
Tensor binary_apply(const Tensor& a, const Tensor& b, F f) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  auto out_shape = broadcast_shape(a.shape(), b.shape());
  if (out_shape == a.shape()) {
    Tensor out(out_shape);
    if (block_broadcast(a, b, out, f, /*small_is_rhs=*/true)) return out;
  } else if (out_shape == b.shape()) {
    Tensor out(out_shape);
    if (block_broadcast(b, a, out, f, /*small_is_rhs=*/false)) return out;
  }
  Tensor out(out_shape);
  const auto sa = bcast_strides(a.shape(), out_shape);
  const auto sb = bcast_strides(b.shape(), out_shape);
  const int nd = static_cast<int>(out_shape.size());
  std::vector<int64_t> coord(nd, 0);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const int64_t n = out.numel();
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[i] = f(pa[oa], pb[ob]);
    for (int d = nd - 1; d >= 0; --d) {
      coord[d]++;
      oa += sa[d];
      ob += sb[d];
      if (coord[d] < out_shape[d]) break;
      coord[d] = 0;
      oa -= sa[d] * out_shape[d];
      ob -= sb[d] * out_shape[d];
    }
  }
  return out;
}

template <class F>
Tensor unary_apply(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  return out;
}

Tensor sum_to_tensor(const Tensor& a, const std::vector<int64_t>& target) {
  if (a.shape() == target) return a;
  if (broadcast_shape(a.shape(), target) != a.shape())
    throw ShapeError("sum_to " + shape_str(a.shape()) + " -> " + shape_str(target));
  Tensor out = Tensor::zeros(target);
  const auto st = bcast_strides(target, a.shape());
  const int nd = a.ndim();
  std::vector<int64_t> coord(nd, 0);
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = a.numel();
  int64_t ot = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[ot] += pa[i];
    for (int d = nd - 1; d >= 0; --d) {
      coord[d]++;
      ot += st[d];
      if (coord[d] < a.shape()[d]) break;
      coord[d] = 0;
      ot -= st[d] * a.shape()[d];
    }
  }
  return out;
}

Tensor broadcast_to_tensor(const Tensor& a, const std::vector<int64_t>& target) {
  if (a.shape() == target) return a;
  if (broadcast_shape(a.shape(), target) != target)
    throw ShapeError("broadcast_to " + shape_str(a.shape()) + " -> " + shape_str(target));
  Tensor out(target);
  const auto sa = bcast_strides(a.shape(), target);
  const int nd = static_cast<int>(target.size());
  std::vector<int64_t> coord(nd, 0);
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = out.numel();
  int64_t oa = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[i] = pa[oa];
    for (int d = nd - 1; d >= 0; --d) {
      coord[d]++;
      oa += sa[d];
      if (coord[d] < target[d]) break;
      coord[d] = 0;
      oa -= sa[d] * target[d];
    }
  }
  return out;
}

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw ShapeError("axis out of range");
  return axis;
}

void check4d(const Value& x, const char* who) {
  if (x.shape().size() != 4)
    throw ShapeError(std::string(who) + ": expected 4-D NCHW tensor, got " +
                     shape_str(x.shape()));
}

}  // namespace

// ---------------- arithmetic ----------------

Value add(const Value& a, const Value& b) {
  Tensor out = binary_apply(a.val(), b.val(), [](double x, double y) { return x + y; });
  return make_op("add", std::move(out), {a, b}, [](const Value& self, const Value& g) {
    std::vector<Value> cts(2);
    if (in(self, 0).requires_grad()) cts[0] = sum_to(g, in(self, 0).shape());
    if (in(self, 1).requires_grad()) cts[1] = sum_to(g, in(self, 1).shape());
    return cts;
  });
}

Value sub(const Value& a, const Value& b) {
  Tensor out = binary_apply(a.val(), b.val(), [](double x, double y) { return x - y; });
  return make_op("sub", std::move(out), {a, b}, [](const Value& self, const Value& g) {
    std::vector<Value> cts(2);
    if (in(self, 0).requires_grad()) cts[0] = sum_to(g, in(self, 0).shape());
    if (in(self, 1).requires_grad()) cts[1] = sum_to(neg(g), in(self, 1).shape());
    return cts;
  });
}

Value mul(const Value& a, const Value& b) {
  Tensor out = binary_apply(a.val(), b.val(), [](double x, double y) { return x * y; });
  return make_op("mul", std::move(out), {a, b}, [](const Value& self, const Value& g) {
    std::vector<Value> cts(2);
    if (in(self, 0).requires_grad()) cts[0] = sum_to(mul(g, in(self, 1)), in(self, 0).shape());
    if (in(self, 1).requires_grad()) cts[1] = sum_to(mul(g, in(self, 0)), in(self, 1).shape());
    return cts;
  });
}

Value div(const Value& a, const Value& b) {
  Tensor out = binary_apply(a.val(), b.val(), [](double x, double y) { return x / y; });
  return make_op("div", std::move(out), {a, b}, [](const Value& self, const Value& g) {
    const Value& a_ = in(self, 0);
    const Value& b_ = in(self, 1);
    std::vector<Value> cts(2);
    if (a_.requires_grad()) cts[0] = sum_to(div(g, b_), a_.shape());
    if (b_.requires_grad())
      cts[1] = sum_to(neg(div(mul(g, a_), mul(b_, b_))), b_.shape());
    return cts;
  });
}

Value maximum(const Value& a, const Value& b) {
  Tensor out = binary_apply(a.val(), b.val(), [](double x, double y) { return x >= y ? x : y; });
  Tensor mask = ge_mask(a.val(), b.val());
  Value mask_v = Value::constant(std::move(mask), "max-mask");
  return make_op("maximum", std::move(out), {a, b},
                 [mask_v](const Value& self, const Value& g) {
                   std::vector<Value> cts(2);
                   if (in(self, 0).requires_grad())
                     cts[0] = sum_to(mul(g, mask_v), in(self, 0).shape());
                   if (in(self, 1).requires_grad())
                     cts[1] = sum_to(mul(g, add_scalar(neg(mask_v), 1.0)), in(self, 1).shape());
                   return cts;
                 });
}

Value neg(const Value& a) {
  Tensor out = unary_apply(a.val(), [](double x) { return -x; });
  return make_op("neg", std::move(out), {a}, [](const Value&, const Value& g) {
    return std::vector<Value>{neg(g)};
  });
}

Value add_scalar(const Value& a, double c) {
  Tensor out = unary_apply(a.val(), [c](double x) { return x + c; });
  return make_op("add_scalar", std::move(out), {a}, [](const Value&, const Value& g) {
    return std::vector<Value>{g};
  });
}

Value mul_scalar(const Value& a, double c) {
  Tensor out = unary_apply(a.val(), [c](double x) { return x * c; });
  return make_op("mul_scalar", std::move(out), {a}, [c](const Value&, const Value& g) {
    return std::vector<Value>{mul_scalar(g, c)};
  });
}

// ---------------- nonlinearities ----------------

Value exp_(const Value& a) {
  Tensor out = unary_apply(a.val(), [](double x) { return std::exp(x); });
  return make_op("exp", std::move(out), {a}, [](const Value& self, const Value& g) {
    return std::vector<Value>{mul(g, self)};
  });
}

Value log_(const Value& a) {
  Tensor out = unary_apply(a.val(), [](double x) { return std::log(x); });
  return make_op("log", std::move(out), {a}, [](const Value& self, const Value& g) {
    return std::vector<Value>{div(g, in(self, 0))};
  });
}

Value sqrt_(const Value& a) {
  Tensor out = unary_apply(a.val(), [](double x) { return std::sqrt(x); });
  return make_op("sqrt", std::move(out), {a}, [](const Value& self, const Value& g) {
    return std::vector<Value>{div(g, mul_scalar(self, 2.0))};
  });
}

Value sigmoid(const Value& a) {
  Tensor out = unary_apply(a.val(), [](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  return make_op("sigmoid", std::move(out), {a}, [](const Value& self, const Value& g) {
    // y' = y(1-y), with y the recorded output so the rule stays differentiable
    return std::vector<Value>{mul(g, mul(self, add_scalar(neg(self), 1.0)))};
  });
}

Value abs_(const Value& a) {
  Tensor out = unary_apply(a.val(), [](double x) { return std::abs(x); });
  Tensor sign = unary_apply(a.val(), [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
  Value sign_v = Value::constant(std::move(sign), "sign");
  return make_op("abs", std::move(out), {a}, [sign_v](const Value&, const Value& g) {
    return std::vector<Value>{mul(g, sign_v)};
  });
}

Value silu(const Value& a) { return mul(a, sigmoid(a)); }
Value square(const Value& a) { return mul(a, a); }

// ---------------- reductions / shape ----------------

Value sum_all(const Value& a) {
  double s = 0.0;
  const double* p = a.val().data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += p[i];
  return make_op("sum_all", Tensor::scalar(s), {a}, [](const Value& self, const Value& g) {
    return std::vector<Value>{broadcast_to(g, in(self, 0).shape())};
  });
}

Value mean_all(const Value& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Value sum_axis(const Value& a, int axis) {
  const auto& sh = a.shape();
  axis = normalize_axis(axis, static_cast<int>(sh.size()));
  std::vector<int64_t> out_shape = sh;
  out_shape[axis] = 1;
  int64_t pre = 1, post = 1;
  for (int i = 0; i < axis; ++i) pre *= sh[i];
  for (size_t i = axis + 1; i < sh.size(); ++i) post *= sh[i];
  const int64_t mid = sh[axis];
  Tensor out = Tensor::zeros(out_shape);
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t p = 0; p < pre; ++p)
    for (int64_t m = 0; m < mid; ++m) {
      const double* src = pa + (p * mid + m) * post;
      double* dst = po + p * post;
      for (int64_t q = 0; q < post; ++q) dst[q] += src[q];
    }
  return make_op("sum_axis", std::move(out), {a}, [](const Value& self, const Value& g) {
    return std::vector<Value>{broadcast_to(g, in(self, 0).shape())};
  });
}

Value mean_axis(const Value& a, int axis) {
  int ax = normalize_axis(axis, static_cast<int>(a.shape().size()));
  return mul_scalar(sum_axis(a, ax), 1.0 / static_cast<double>(a.shape()[ax]));
}

Value sum_to(const Value& a, std::vector<int64_t> shape) {
  if (a.shape() == shape) return a;
  Tensor out = sum_to_tensor(a.val(), shape);
  return make_op("sum_to", std::move(out), {a}, [](const Value& self, const Value& g) {
    return std::vector<Value>{broadcast_to(g, in(self, 0).shape())};
  });
}

Value broadcast_to(const Value& a, std::vector<int64_t> shape) {
  if (a.shape() == shape) return a;
  Tensor out = broadcast_to_tensor(a.val(), shape);
  return make_op("broadcast_to", std::move(out), {a}, [](const Value& self, const Value& g) {
    return std::vector<Value>{sum_to(g, in(self, 0).shape())};
  });
}

Value reshape(const Value& a, std::vector<int64_t> shape) {
  Tensor out = a.val().reshaped(std::move(shape));  // shares storage
  return make_op("reshape", std::move(out), {a}, [](const Value& self, const Value& g) {
    return std::vector<Value>{reshape(g, in(self, 0).shape())};
  });
}

Value permute(const Value& a, std::vector<int> axes) {
  const auto& sh = a.shape();
  const int nd = static_cast<int>(sh.size());
  if (static_cast<int>(axes.size()) != nd) throw ShapeError("permute: axes size mismatch");
  std::vector<int64_t> out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = sh[axes[i]];
  Tensor out(out_shape);
  std::vector<int64_t> in_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * sh[i + 1];
  std::vector<int64_t> src_stride(nd);
  for (int i = 0; i < nd; ++i) src_stride[i] = in_strides[axes[i]];
  std::vector<int64_t> coord(nd, 0);
  const double* pa = a.val().data();
  double* po = out.data();
  const int64_t n = out.numel();
  int64_t oa = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[i] = pa[oa];
    for (int d = nd - 1; d >= 0; --d) {
      coord[d]++;
      oa += src_stride[d];
      if (coord[d] < out_shape[d]) break;
      coord[d] = 0;
      oa -= src_stride[d] * out_shape[d];
    }
  }
  std::vector<int> inv(nd);
  for (int i = 0; i < nd; ++i) inv[axes[i]] = i;
  return make_op("permute", std::move(out), {a}, [inv](const Value&, const Value& g) {
    return std::vector<Value>{permute(g, inv)};
  });
}

Value transpose_last2(const Value& a) {
  const int nd = static_cast<int>(a.shape().size());
  if (nd < 2) throw ShapeError("transpose_last2 needs >= 2 dims");
  std::vector<int> axes(nd);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[nd - 1], axes[nd - 2]);
  return permute(a, axes);
}

Value slice_axis(const Value& a, int axis, int64_t start, int64_t len) {
  const auto& sh = a.shape();
  axis = normalize_axis(axis, static_cast<int>(sh.size()));
  if (start < 0 || len < 0 || start + len > sh[axis])
    throw ShapeError("slice_axis out of range");
  std::vector<int64_t> out_shape = sh;
  out_shape[axis] = len;
  int64_t pre = 1, post = 1;
  for (int i = 0; i < axis; ++i) pre *= sh[i];
  for (size_t i = axis + 1; i < sh.size(); ++i) post *= sh[i];
  Tensor out(out_shape);
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t p = 0; p < pre; ++p)
    std::memcpy(po + p * len * post, pa + (p * sh[axis] + start) * post,
                static_cast<size_t>(len * post) * sizeof(double));
  const int64_t full = sh[axis];
  return make_op("slice_axis", std::move(out), {a},
                 [axis, start, full](const Value&, const Value& g) {
                   return std::vector<Value>{embed_axis(g, axis, start, full)};
                 });
}

Value embed_axis(const Value& a, int axis, int64_t start, int64_t full) {
  const auto& sh = a.shape();
  axis = normalize_axis(axis, static_cast<int>(sh.size()));
  const int64_t len = sh[axis];
  if (start < 0 || start + len > full) throw ShapeError("embed_axis out of range");
  std::vector<int64_t> out_shape = sh;
  out_shape[axis] = full;
  int64_t pre = 1, post = 1;
  for (int i = 0; i < axis; ++i) pre *= sh[i];
  for (size_t i = axis + 1; i < sh.size(); ++i) post *= sh[i];
  Tensor out = Tensor::zeros(out_shape);
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t p = 0; p < pre; ++p)
    std::memcpy(po + (p * full + start) * post, pa + p * len * post,
                static_cast<size_t>(len * post) * sizeof(double));
  return make_op("embed_axis", std::move(out), {a},
                 [axis, start, len](const Value&, const Value& g) {
                   return std::vector<Value>{slice_axis(g, axis, start, len)};
                 });
}

Value concat(const std::vector<Value>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& sh0 = parts[0].shape();
  axis = normalize_axis(axis, static_cast<int>(sh0.size()));
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != sh0.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < sh0.size(); ++i)
      if (static_cast<int>(i) != axis && p.shape()[i] != sh0[i])
        throw ShapeError("concat: shape mismatch off-axis");
    total += p.shape()[axis];
  }
  std::vector<int64_t> out_shape = sh0;
  out_shape[axis] = total;
  int64_t pre = 1, post = 1;
  for (int i = 0; i < axis; ++i) pre *= sh0[i];
  for (size_t i = axis + 1; i < sh0.size(); ++i) post *= sh0[i];
  Tensor out(out_shape);
  double* po = out.data();
  int64_t off = 0;
  for (const auto& part : parts) {
    const int64_t len = part.shape()[axis];
    const double* pa = part.val().data();
    for (int64_t p = 0; p < pre; ++p)
      std::memcpy(po + (p * total + off) * post, pa + p * len * post,
                  static_cast<size_t>(len * post) * sizeof(double));
    off += len;
  }
  std::vector<int64_t> lens;
  for (const auto& p : parts) lens.push_back(p.shape()[axis]);
  return make_op("concat", std::move(out), parts,
                 [axis, lens](const Value& self, const Value& g) {
                   std::vector<Value> cts(lens.size());
                   int64_t off = 0;
                   for (size_t i = 0; i < lens.size(); ++i) {
                     if (in(self, i).requires_grad())
                       cts[i] = slice_axis(g, axis, off, lens[i]);
                     off += lens[i];
                   }
                   return cts;
                 });
}

// ---------------- padding / conv / pooling ----------------

Value pad_zero(const Value& x, int t, int b, int l, int r) {
  check4d(x, "pad_zero");
  const auto& s = x.shape();
  Tensor out = Tensor::zeros({s[0], s[1], s[2] + t + b, s[3] + l + r});
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t Ho = H + t + b, Wo = W + l + r;
  const double* px = x.val().data();
  double* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t i = 0; i < H; ++i)
      std::memcpy(po + (bc * Ho + i + t) * Wo + l, px + (bc * H + i) * W,
                  static_cast<size_t>(W) * sizeof(double));
  return make_op("pad_zero", std::move(out), {x}, [t, b, l, r](const Value&, const Value& g) {
    return std::vector<Value>{crop(g, t, b, l, r)};
  });
}

Value crop(const Value& x, int t, int b, int l, int r) {
  check4d(x, "crop");
  const auto& s = x.shape();
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t Ho = H - t - b, Wo = W - l - r;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("crop: nothing left");
  Tensor out({B, C, Ho, Wo});
  const double* px = x.val().data();
  double* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t i = 0; i < Ho; ++i)
      std::memcpy(po + (bc * Ho + i) * Wo, px + (bc * H + i + t) * W + l,
                  static_cast<size_t>(Wo) * sizeof(double));
  return make_op("crop", std::move(out), {x}, [t, b, l, r](const Value&, const Value& g) {
    return std::vector<Value>{pad_zero(g, t, b, l, r)};
  });
}

Value pad_replicate(const Value& x, int t, int b, int l, int r) {
  check4d(x, "pad_replicate");
  const auto& s = x.shape();
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t Ho = H + t + b, Wo = W + l + r;
  Tensor out({B, C, Ho, Wo});
  const double* px = x.val().data();
  double* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t i = 0; i < Ho; ++i) {
      const int64_t si = std::clamp<int64_t>(i - t, 0, H - 1);
      for (int64_t j = 0; j < Wo; ++j) {
        const int64_t sj = std::clamp<int64_t>(j - l, 0, W - 1);
        po[(bc * Ho + i) * Wo + j] = px[(bc * H + si) * W + sj];
      }
    }
  return make_op("pad_replicate", std::move(out), {x},
                 [t, b, l, r](const Value&, const Value& g) {
                   return std::vector<Value>{pad_replicate_adjoint(g, t, b, l, r)};
                 });
}

Value pad_replicate_adjoint(const Value& x, int t, int b, int l, int r) {
  check4d(x, "pad_replicate_adjoint");
  const auto& s = x.shape();
  const int64_t B = s[0], C = s[1], Ho = s[2], Wo = s[3];
  const int64_t H = Ho - t - b, W = Wo - l - r;
  if (H <= 0 || W <= 0) throw ShapeError("pad_replicate_adjoint: bad geometry");
  Tensor out = Tensor::zeros({B, C, H, W});
  const double* px = x.val().data();
  double* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t i = 0; i < Ho; ++i) {
      const int64_t si = std::clamp<int64_t>(i - t, 0, H - 1);
      for (int64_t j = 0; j < Wo; ++j) {
        const int64_t sj = std::clamp<int64_t>(j - l, 0, W - 1);
        po[(bc * H + si) * W + sj] += px[(bc * Ho + i) * Wo + j];
      }
    }
  return make_op("pad_replicate_adjoint", std::move(out), {x},
                 [t, b, l, r](const Value&, const Value& g) {
                   return std::vector<Value>{pad_replicate(g, t, b, l, r)};
                 });
}

namespace {

// im2col patch matrix for one (batch, group): [(Cig*kh*kw) x (Ho*Wo)]
void fill_patches(const double* x, int64_t C, int64_t H, int64_t W, int64_t c0,
                  int64_t Cig, int kh, int kw, double* out) {
  const int64_t Ho = H - kh + 1, Wo = W - kw + 1;
  int64_t row = 0;
  for (int64_t c = 0; c < Cig; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v, ++row) {
        double* dst = out + row * Ho * Wo;
        const double* src = x + (c0 + c) * H * W;
        for (int64_t i = 0; i < Ho; ++i)
          std::memcpy(dst + i * Wo, src + (i + u) * W + v,
                      static_cast<size_t>(Wo) * sizeof(double));
      }
  (void)C;
}

Tensor conv2d_valid_fwd(const Tensor& x, const Tensor& w, int groups) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const int64_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const int64_t Co = ws[0], Cig = ws[1];
  const int kh = static_cast<int>(ws[2]), kw = static_cast<int>(ws[3]);
  if (Ci != Cig * groups || Co % groups != 0)
    throw ShapeError("conv2d_valid: channel/group mismatch");
  if (H < kh || W < kw) throw ShapeError("conv2d_valid: kernel larger than input");
  const int64_t Cog = Co / groups;
  const int64_t Ho = H - kh + 1, Wo = W - kw + 1;
  Tensor out({B, Co, Ho, Wo});

  if (Cig == 1 && Cog == 1) {  // depthwise
    const double* px = x.data();
    const double* pw = w.data();
    double* po = out.data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < Co; ++c) {
        const double* xb = px + (b * Ci + c) * H * W;
        const double* wc = pw + c * kh * kw;
        double* ob = po + (b * Co + c) * Ho * Wo;
        for (int64_t i = 0; i < Ho; ++i)
          for (int64_t j = 0; j < Wo; ++j) {
            double s = 0.0;
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) s += xb[(i + u) * W + j + v] * wc[u * kw + v];
            ob[i * Wo + j] = s;
          }
      }
    return out;
  }

  const int64_t K = Cig * kh * kw;
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < B; ++b) {
    std::vector<double> patches(static_cast<size_t>(K * Ho * Wo));
    for (int g = 0; g < groups; ++g) {
      if (kh == 1 && kw == 1) {
        CMapMat Wm(w.data() + g * Cog * K, Cog, K);
        CMapMat Xm(x.data() + (b * Ci + g * Cig) * H * W, K, Ho * Wo);
        MapMat Om(out.data() + (b * Co + g * Cog) * Ho * Wo, Cog, Ho * Wo);
        Om.noalias() = Wm * Xm;
      } else {
        fill_patches(x.data() + b * Ci * H * W, Ci, H, W, g * Cig, Cig, kh, kw,
                     patches.data());
        CMapMat Wm(w.data() + g * Cog * K, Cog, K);
        CMapMat Pm(patches.data(), K, Ho * Wo);
        MapMat Om(out.data() + (b * Co + g * Cog) * Ho * Wo, Cog, Ho * Wo);
        Om.noalias() = Wm * Pm;
      }
    }
  }
  return out;
}

Tensor conv2d_weight_grad_fwd(const Tensor& x, const Tensor& gy, int kh, int kw,
                              int groups) {
  const auto& xs = x.shape();
  const auto& gs = gy.shape();
  const int64_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const int64_t Co = gs[1], Ho = gs[2], Wo = gs[3];
  if (gs[0] != B || Ho != H - kh + 1 || Wo != W - kw + 1)
    throw ShapeError("conv2d_weight_grad: geometry mismatch");
  if (Ci % groups != 0 || Co % groups != 0)
    throw ShapeError("conv2d_weight_grad: group mismatch");
  const int64_t Cig = Ci / groups, Cog = Co / groups;
  const int64_t K = Cig * kh * kw;
  Tensor out = Tensor::zeros({Co, Cig, kh, kw});

  if (Cig == 1 && Cog == 1) {
    const double* px = x.data();
    const double* pg = gy.data();
    double* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < Co; ++c) {
      double* oc = po + c * kh * kw;
      for (int64_t b = 0; b < B; ++b) {
        const double* xb = px + (b * Ci + c) * H * W;
        const double* gb = pg + (b * Co + c) * Ho * Wo;
        for (int u = 0; u < kh; ++u)
          for (int v = 0; v < kw; ++v) {
            double s = 0.0;
            for (int64_t i = 0; i < Ho; ++i)
              for (int64_t j = 0; j < Wo; ++j) s += xb[(i + u) * W + j + v] * gb[i * Wo + j];
            oc[u * kw + v] += s;
          }
      }
    }
    return out;
  }

  std::vector<double> patches(static_cast<size_t>(K * Ho * Wo));
  for (int64_t b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      fill_patches(x.data() + b * Ci * H * W, Ci, H, W, g * Cig, Cig, kh, kw,
                   patches.data());
      CMapMat Gm(gy.data() + (b * Co + g * Cog) * Ho * Wo, Cog, Ho * Wo);
      CMapMat Pm(patches.data(), K, Ho * Wo);
      MapMat Om(out.data() + g * Cog * K, Cog, K);
      Om.noalias() += Gm * Pm.transpose();
    }
  return out;
}

Tensor conv_weight_transpose_fwd(const Tensor& w, int groups) {
  const auto& ws = w.shape();
  const int64_t Co = ws[0], Cig = ws[1];
  const int kh = static_cast<int>(ws[2]), kw = static_cast<int>(ws[3]);
  if (Co % groups != 0) throw ShapeError("conv_weight_transpose: group mismatch");
  const int64_t Cog = Co / groups;
  const int64_t Ci = Cig * groups;
  Tensor out({Ci, Cog, kh, kw});
  const double* pw = w.data();
  double* po = out.data();
  for (int g = 0; g < groups; ++g)
    for (int64_t o = 0; o < Cog; ++o)
      for (int64_t c = 0; c < Cig; ++c)
        for (int u = 0; u < kh; ++u)
          for (int v = 0; v < kw; ++v)
            po[(((g * Cig + c) * Cog + o) * kh + (kh - 1 - u)) * kw + (kw - 1 - v)] =
                pw[((g * Cog + o) * Cig + c) * kh * kw + u * kw + v];
  return out;
}

}  // namespace

Value conv2d_valid(const Value& x, const Value& w, int groups) {
  check4d(x, "conv2d_valid");
  check4d(w, "conv2d_valid(weight)");
  Tensor out = conv2d_valid_fwd(x.val(), w.val(), groups);
  const int kh = static_cast<int>(w.shape()[2]);
  const int kw = static_cast<int>(w.shape()[3]);
  return make_op("conv2d", std::move(out), {x, w},
                 [kh, kw, groups](const Value& self, const Value& g) {
                   const Value& x_ = in(self, 0);
                   const Value& w_ = in(self, 1);
                   std::vector<Value> cts(2);
                   if (x_.requires_grad())
                     cts[0] = conv2d_valid(pad_zero(g, kh - 1, kh - 1, kw - 1, kw - 1),
                                           conv_weight_transpose(w_, groups), groups);
                   if (w_.requires_grad())
                     cts[1] = conv2d_weight_grad(x_, g, kh, kw, groups);
                   return cts;
                 });
}

Value conv2d_weight_grad(const Value& x, const Value& gy, int kh, int kw, int groups) {
  check4d(x, "conv2d_weight_grad");
  check4d(gy, "conv2d_weight_grad(gy)");
  Tensor out = conv2d_weight_grad_fwd(x.val(), gy.val(), kh, kw, groups);
  return make_op("conv2d_wgrad", std::move(out), {x, gy},
                 [kh, kw, groups](const Value& self, const Value& g) {
                   const Value& x_ = in(self, 0);
                   const Value& gy_ = in(self, 1);
                   std::vector<Value> cts(2);
                   if (x_.requires_grad())
                     cts[0] = conv2d_valid(pad_zero(gy_, kh - 1, kh - 1, kw - 1, kw - 1),
                                           conv_weight_transpose(g, groups), groups);
                   if (gy_.requires_grad()) cts[1] = conv2d_valid(x_, g, groups);
                   return cts;
                 });
}

Value conv_weight_transpose(const Value& w, int groups) {
  check4d(w, "conv_weight_transpose");
  Tensor out = conv_weight_transpose_fwd(w.val(), groups);
  const int tgroups = groups;
  return make_op("conv_wT", std::move(out), {w},
                 [tgroups](const Value&, const Value& g) {
                   return std::vector<Value>{conv_weight_transpose(g, tgroups)};
                 });
}

Value avgpool2(const Value& x) {
  check4d(x, "avgpool2");
  const auto& s = x.shape();
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (H % 2 || W % 2) throw ShapeError("avgpool2: H,W must be even");
  Tensor out({B, C, H / 2, W / 2});
  const double* px = x.val().data();
  double* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t i = 0; i < H / 2; ++i)
      for (int64_t j = 0; j < W / 2; ++j) {
        const double* base = px + (bc * H + 2 * i) * W + 2 * j;
        po[(bc * (H / 2) + i) * (W / 2) + j] =
            0.25 * (base[0] + base[1] + base[W] + base[W + 1]);
      }
  return make_op("avgpool2", std::move(out), {x}, [](const Value&, const Value& g) {
    return std::vector<Value>{mul_scalar(upsample2(g), 0.25)};
  });
}

Value upsample2(const Value& x) {
  check4d(x, "upsample2");
  const auto& s = x.shape();
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out({B, C, H * 2, W * 2});
  const double* px = x.val().data();
  double* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t i = 0; i < 2 * H; ++i)
      for (int64_t j = 0; j < 2 * W; ++j)
        po[(bc * 2 * H + i) * 2 * W + j] = px[(bc * H + i / 2) * W + j / 2];
  return make_op("upsample2", std::move(out), {x}, [](const Value&, const Value& g) {
    return std::vector<Value>{mul_scalar(avgpool2(g), 4.0)};
  });
}

// ---------------- linear algebra ----------------

Value matmul(const Value& a, const Value& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size())
    throw ShapeError("matmul: rank mismatch " + shape_str(sa) + " x " + shape_str(sb));
  for (size_t i = 0; i + 2 < sa.size(); ++i)
    if (sa[i] != sb[i]) throw ShapeError("matmul: batch dims differ");
  const int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
  const int64_t K2 = sb[sb.size() - 2], N = sb[sb.size() - 1];
  if (K != K2) throw ShapeError("matmul: inner dims differ");
  int64_t batch = 1;
  for (size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  std::vector<int64_t> out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor out(out_shape);
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < batch; ++i) {
    CMapMat A(a.val().data() + i * M * K, M, K);
    CMapMat B(b.val().data() + i * K * N, K, N);
    MapMat O(out.data() + i * M * N, M, N);
    O.noalias() = A * B;
  }
  return make_op("matmul", std::move(out), {a, b}, [](const Value& self, const Value& g) {
    std::vector<Value> cts(2);
    if (in(self, 0).requires_grad()) cts[0] = matmul(g, transpose_last2(in(self, 1)));
    if (in(self, 1).requires_grad()) cts[1] = matmul(transpose_last2(in(self, 0)), g);
    return cts;
  });
}

// ---------------- composites ----------------

Value softmax_lastdim(const Value& a) {
  const auto& sh = a.shape();
  if (sh.empty()) throw ShapeError("softmax_lastdim on scalar");
  // Row max is a detached shift; softmax is shift-invariant so gradients are
  // unaffected.
  std::vector<int64_t> mshape = sh;
  mshape.back() = 1;
  Tensor m(mshape);
  const int64_t rows = a.numel() / sh.back();
  const int64_t cols = sh.back();
  const double* pa = a.val().data();
  for (int64_t r = 0; r < rows; ++r) {
    double mx = pa[r * cols];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, pa[r * cols + c]);
    m.data()[r] = mx;
  }
  Value z = sub(a, Value::constant(std::move(m), "rowmax"));
  Value e = exp_(z);
  return div(e, sum_axis(e, -1));
}

Value l2_normalize_lastdim(const Value& a, double eps) {
  return div(a, sqrt_(add_scalar(sum_axis(mul(a, a), -1), eps)));
}

Tensor ge_mask(const Tensor& a, const Tensor& b) {
  return binary_apply(a, b, [](double x, double y) { return x >= y ? 1.0 : 0.0; });
}

}  // namespace refusion::ad::ops
