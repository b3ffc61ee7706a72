#include "refusion/losses.hpp"

#include <cmath>

namespace refusion::losses {

using ad::Value;
namespace O = ad::ops;

namespace {

void check_image(const Value& v, const char* who) {
  if (v.shape().size() != 4)
    throw ShapeError(std::string(who) + ": expected [B,C,H,W], got " + shape_str(v.shape()));
}

void check_same_shape(const Value& a, const Value& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

Value sobel_conv(const Value& img, bool horizontal) {
  const int64_t C = img.shape()[1];
  // correlation kernels; gx responds to left-to-right increase
  static const double kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static const double ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  const double* k = horizontal ? kx : ky;
  Tensor w({C, 1, 3, 3});
  for (int64_t c = 0; c < C; ++c)
    for (int i = 0; i < 9; ++i) w.at(c * 9 + i) = k[i];
  return O::conv2d_valid(O::pad_replicate(img, 1, 1, 1, 1),
                         ad::Value::constant(std::move(w), "sobel-k"),
                         static_cast<int>(C));
}

}  // namespace

GradField sobel_raw(const Value& img) {
  check_image(img, "sobel");
  return {sobel_conv(img, true), sobel_conv(img, false)};
}

GradField sobel_gradient(const Value& img) {
  check_image(img, "sobel_gradient");
  if (img.shape()[2] < 3 || img.shape()[3] < 3)
    throw ShapeError("sobel_gradient: image smaller than 3x3: " + shape_str(img.shape()));
  return sobel_raw(img);
}

void check_weight_constraint(const WeightMaps& maps, double tol) {
  auto check_pair = [&](const Value& x, const Value& y, const char* which) {
    check_same_shape(x, y, "weight maps");
    const double* px = x.val().data();
    const double* py = y.val().data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i)
      if (std::abs(px[i] + py[i] - 1.0) > tol)
        throw ConstraintError(std::string(which) +
                              " maps violate the sum-to-one constraint (|sum-1| = " +
                              std::to_string(std::abs(px[i] + py[i] - 1.0)) + ")");
  };
  check_pair(maps.wa, maps.wb, "W");
  check_pair(maps.va, maps.vb, "V");
}

Value fusion_loss(const Value& ia, const Value& ib, const Value& ifused,
                  const WeightMaps& maps, const LossConfig& cfg) {
  check_image(ia, "fusion_loss");
  check_same_shape(ia, ib, "fusion_loss");
  check_same_shape(ia, ifused, "fusion_loss");
  check_weight_constraint(maps);

  Value l_int = O::mean_all(O::add(O::mul(maps.wa, O::square(O::sub(ia, ifused))),
                                   O::mul(maps.wb, O::square(O::sub(ib, ifused)))));
  if (cfg.alpha1 == 0.0) return l_int;

  GradField ga = sobel_raw(ia);
  GradField gb = sobel_raw(ib);
  GradField gf = sobel_raw(ifused);
  auto grad_term = [&](const Value& da, const Value& db, const Value& df) {
    return O::mean_all(O::add(O::mul(maps.va, O::square(O::sub(da, df))),
                              O::mul(maps.vb, O::square(O::sub(db, df)))));
  };
  Value l_grad = O::add(grad_term(ga.gx, gb.gx, gf.gx), grad_term(ga.gy, gb.gy, gf.gy));
  return O::add(l_int, O::mul_scalar(l_grad, cfg.alpha1));
}

Value reconstruction_loss(const Value& ia, const Value& ib, const Value& ra,
                          const Value& rb, const LossConfig& cfg) {
  check_image(ia, "reconstruction_loss");
  check_same_shape(ia, ib, "reconstruction_loss");
  check_same_shape(ia, ra, "reconstruction_loss");
  check_same_shape(ia, rb, "reconstruction_loss");

  Value l_int =
      O::mean_all(O::maximum(O::square(O::sub(ia, ra)), O::square(O::sub(ib, rb))));
  if (cfg.alpha2 == 0.0) return l_int;

  GradField ga = sobel_raw(ia);
  GradField gb = sobel_raw(ib);
  GradField gra = sobel_raw(ra);
  GradField grb = sobel_raw(rb);
  auto grad_term = [&](const Value& da, const Value& db, const Value& dra,
                       const Value& drb) {
    return O::mean_all(O::maximum(O::square(O::sub(da, dra)), O::square(O::sub(db, drb))));
  };
  Value l_grad = O::add(grad_term(ga.gx, gb.gx, gra.gx, grb.gx),
                        grad_term(ga.gy, gb.gy, gra.gy, grb.gy));
  return O::add(l_int, O::mul_scalar(l_grad, cfg.alpha2));
}

}  // namespace refusion::losses
