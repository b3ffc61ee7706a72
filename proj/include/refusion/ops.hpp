#pragma once

#include <vector>

#include "refusion/autodiff.hpp"

// Differentiable op library. Every vjp is written in terms of these same ops,
// so backward passes are recordable and gradients of gradients are exact.
namespace refusion::ad::ops {

// ---- arithmetic (NumPy-style broadcasting) ----
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value div(const Value& a, const Value& b);
Value maximum(const Value& a, const Value& b);  // ties take a's subgradient
Value neg(const Value& a);
Value add_scalar(const Value& a, double c);
Value mul_scalar(const Value& a, double c);

// ---- elementwise nonlinearities ----
Value exp_(const Value& a);
Value log_(const Value& a);
Value sqrt_(const Value& a);
Value sigmoid(const Value& a);
Value abs_(const Value& a);
Value silu(const Value& a);    // x * sigmoid(x)
Value square(const Value& a);

// ---- reductions / shape ----
Value sum_all(const Value& a);                    // -> scalar
Value mean_all(const Value& a);
Value sum_axis(const Value& a, int axis);         // keeps the reduced dim as 1
Value mean_axis(const Value& a, int axis);
Value sum_to(const Value& a, std::vector<int64_t> shape);
Value broadcast_to(const Value& a, std::vector<int64_t> shape);
Value reshape(const Value& a, std::vector<int64_t> shape);
Value permute(const Value& a, std::vector<int> axes);
Value transpose_last2(const Value& a);
Value slice_axis(const Value& a, int axis, int64_t start, int64_t len);
Value embed_axis(const Value& a, int axis, int64_t start, int64_t full);
Value concat(const std::vector<Value>& parts, int axis);

// ---- padding / conv / pooling (NCHW) ----
Value pad_zero(const Value& x, int t, int b, int l, int r);
Value crop(const Value& x, int t, int b, int l, int r);
Value pad_replicate(const Value& x, int t, int b, int l, int r);
Value pad_replicate_adjoint(const Value& x, int t, int b, int l, int r);
// x [B,Ci,H,W], w [Co,Ci/groups,kh,kw] -> [B,Co,H-kh+1,W-kw+1]
Value conv2d_valid(const Value& x, const Value& w, int groups = 1);
// d(conv)/dw contraction: x [B,Ci,H,W], gy [B,Co,Ho,Wo] -> [Co,Ci/groups,kh,kw]
Value conv2d_weight_grad(const Value& x, const Value& gy, int kh, int kw, int groups = 1);
// [Co,Cig,kh,kw] -> [Ci,Cog,kh,kw] with spatial flip; self-adjoint involution
Value conv_weight_transpose(const Value& w, int groups = 1);
Value avgpool2(const Value& x);   // H,W must be even
Value upsample2(const Value& x);  // nearest-neighbor x2

// ---- linear algebra ----
// a [...,M,K] x b [...,K,N] with identical leading dims -> [...,M,N]
Value matmul(const Value& a, const Value& b);

// ---- composites used by the networks ----
Value softmax_lastdim(const Value& a);
Value l2_normalize_lastdim(const Value& a, double eps = 1e-12);

// 0/1 tensor of (a >= b), broadcast; plain data, not differentiated
Tensor ge_mask(const Tensor& a, const Tensor& b);

}  // namespace refusion::ad::ops

namespace refusion::ad {
inline Value operator+(const Value& a, const Value& b) { return ops::add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return ops::sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return ops::mul(a, b); }
inline Value operator/(const Value& a, const Value& b) { return ops::div(a, b); }
inline Value operator-(const Value& a) { return ops::neg(a); }
inline Value operator*(const Value& a, double c) { return ops::mul_scalar(a, c); }
inline Value operator*(double c, const Value& a) { return ops::mul_scalar(a, c); }
inline Value operator+(const Value& a, double c) { return ops::add_scalar(a, c); }
inline Value operator-(const Value& a, double c) { return ops::add_scalar(a, -c); }
}  // namespace refusion::ad
