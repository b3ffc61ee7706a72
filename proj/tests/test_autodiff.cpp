#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "refusion/ops.hpp"
#include "refusion/rng.hpp"

using namespace refusion;
using namespace refusion::ad;
namespace O = refusion::ad::ops;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

// Scalar head with fixed random weights; catches transposition mistakes that a
// plain sum would miss.
Value weighted_sum(const Value& v, const Tensor& w) {
  return O::sum_all(O::mul(v, Value::constant(w)));
}

using OpFn = std::function<Value(const std::vector<Value>&)>;

double eval_scalar(const OpFn& f, const std::vector<Tensor>& xs, const Tensor& w) {
  NoGradGuard ng;
  std::vector<Value> vals;
  for (const auto& x : xs) vals.push_back(Value::constant(x));
  return weighted_sum(f(vals), w).item();
}

// max |analytic - numeric| over all inputs, first order.
double max_grad_err(const OpFn& f, std::vector<Tensor> xs, const Tensor& w, double h = 1e-6) {
  std::vector<Value> leaves;
  for (const auto& x : xs) leaves.push_back(Value::leaf(x.clone()));
  Value loss = weighted_sum(f(leaves), w);
  auto gs = grad(loss, leaves);
  double err = 0.0;
  for (size_t k = 0; k < xs.size(); ++k) {
    for (int64_t i = 0; i < xs[k].numel(); ++i) {
      const double orig = xs[k].at(i);
      xs[k].at(i) = orig + h;
      const double fp = eval_scalar(f, xs, w);
      xs[k].at(i) = orig - h;
      const double fm = eval_scalar(f, xs, w);
      xs[k].at(i) = orig;
      const double num = (fp - fm) / (2 * h);
      err = std::max(err, std::abs(num - gs[k].val().at(i)));
    }
  }
  return err;
}

// Second order: psi(x) = <u, dL/dx>; checks grad(psi) against finite
// differences of psi, which exercises the recorded backward graph.
double max_grad2_err(const OpFn& f, std::vector<Tensor> xs, const Tensor& w,
                     const std::vector<Tensor>& us, double h = 1e-5) {
  auto psi = [&](const std::vector<Tensor>& pts) {
    std::vector<Value> leaves;
    for (const auto& x : pts) leaves.push_back(Value::leaf(x.clone()));
    Value loss = weighted_sum(f(leaves), w);
    auto gs = grad(loss, leaves, {.create_graph = true});
    Value acc;
    for (size_t k = 0; k < pts.size(); ++k) {
      Value term = O::sum_all(O::mul(gs[k], Value::constant(us[k])));
      acc = acc.defined() ? O::add(acc, term) : term;
    }
    return acc;
  };

  std::vector<Value> dummy;
  Value p = psi(xs);
  // gradient of psi w.r.t. the leaves used inside psi: rebuild to keep handles
  std::vector<Value> leaves;
  for (const auto& x : xs) leaves.push_back(Value::leaf(x.clone()));
  Value loss = weighted_sum(f(leaves), w);
  auto gs = grad(loss, leaves, {.create_graph = true});
  Value acc;
  for (size_t k = 0; k < xs.size(); ++k) {
    Value term = O::sum_all(O::mul(gs[k], Value::constant(us[k])));
    acc = acc.defined() ? O::add(acc, term) : term;
  }
  auto ggs = grad(acc, leaves);

  double err = 0.0;
  for (size_t k = 0; k < xs.size(); ++k) {
    for (int64_t i = 0; i < xs[k].numel(); ++i) {
      const double orig = xs[k].at(i);
      xs[k].at(i) = orig + h;
      const double fp = psi(xs).item();
      xs[k].at(i) = orig - h;
      const double fm = psi(xs).item();
      xs[k].at(i) = orig;
      const double num = (fp - fm) / (2 * h);
      err = std::max(err, std::abs(num - ggs[k].val().at(i)));
    }
  }
  (void)p;
  (void)dummy;
  return err;
}

void check_op(const char* name, const OpFn& f, std::vector<Tensor> xs, Rng& rng,
              double tol1 = 2e-8, double tol2 = 5e-7) {
  NoGradGuard* ng = nullptr;
  (void)ng;
  Tensor out_probe = [&] {
    NoGradGuard g;
    std::vector<Value> vals;
    for (const auto& x : xs) vals.push_back(Value::constant(x));
    return f(vals).val();
  }();
  Tensor w = random_tensor(out_probe.shape(), rng);
  INFO(name);
  CHECK(max_grad_err(f, xs, w) < tol1);
  std::vector<Tensor> us;
  for (const auto& x : xs) us.push_back(random_tensor(x.shape(), rng));
  CHECK(max_grad2_err(f, xs, w, us) < tol2);
}

}  // namespace

TEST_CASE("arithmetic ops with broadcasting") {
  Rng rng(42);
  check_op("add", [](const std::vector<Value>& v) { return O::add(v[0], v[1]); },
           {random_tensor({2, 3}, rng), random_tensor({3}, rng)}, rng);
  check_op("sub", [](const std::vector<Value>& v) { return O::sub(v[0], v[1]); },
           {random_tensor({2, 1, 4}, rng), random_tensor({1, 3, 1}, rng)}, rng);
  check_op("mul", [](const std::vector<Value>& v) { return O::mul(v[0], v[1]); },
           {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}, rng);
  check_op("mul-bcast", [](const std::vector<Value>& v) { return O::mul(v[0], v[1]); },
           {random_tensor({2, 3, 4}, rng), random_tensor({3, 1}, rng)}, rng);
  check_op("div", [](const std::vector<Value>& v) { return O::div(v[0], v[1]); },
           {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng, 0.5, 2.0)}, rng);
  check_op("neg", [](const std::vector<Value>& v) { return O::neg(v[0]); },
           {random_tensor({5}, rng)}, rng);
  check_op("scalar-ops",
           [](const std::vector<Value>& v) { return O::add_scalar(O::mul_scalar(v[0], 2.5), -0.3); },
           {random_tensor({4}, rng)}, rng);
}

TEST_CASE("maximum uses the first-branch subgradient and is exact off ties") {
  Rng rng(1);
  Tensor a = random_tensor({3, 3}, rng);
  Tensor b = random_tensor({3, 3}, rng);
  // push the entries apart so finite differences never cross the tie
  for (int64_t i = 0; i < a.numel(); ++i)
    if (std::abs(a.at(i) - b.at(i)) < 1e-2) a.at(i) += 5e-2;
  check_op("maximum", [](const std::vector<Value>& v) { return O::maximum(v[0], v[1]); },
           {a, b}, rng);

  // tie: gradient goes to the first argument
  Value ta = Value::leaf(Tensor::scalar(0.7));
  Value tb = Value::leaf(Tensor::scalar(0.7));
  auto gs = grad(O::maximum(ta, tb), {ta, tb});
  CHECK(gs[0].item() == doctest::Approx(1.0));
  CHECK(gs[1].item() == doctest::Approx(0.0));
}

TEST_CASE("elementwise nonlinearities") {
  Rng rng(7);
  check_op("exp", [](const std::vector<Value>& v) { return O::exp_(v[0]); },
           {random_tensor({3, 2}, rng)}, rng);
  check_op("log", [](const std::vector<Value>& v) { return O::log_(v[0]); },
           {random_tensor({4}, rng, 0.3, 2.0)}, rng);
  check_op("sqrt", [](const std::vector<Value>& v) { return O::sqrt_(v[0]); },
           {random_tensor({4}, rng, 0.3, 2.0)}, rng);
  check_op("sigmoid", [](const std::vector<Value>& v) { return O::sigmoid(v[0]); },
           {random_tensor({6}, rng, -3.0, 3.0)}, rng);
  check_op("silu", [](const std::vector<Value>& v) { return O::silu(v[0]); },
           {random_tensor({6}, rng, -3.0, 3.0)}, rng);
  check_op("abs", [](const std::vector<Value>& v) { return O::abs_(v[0]); },
           {random_tensor({6}, rng, 0.2, 1.0)}, rng);
}

TEST_CASE("reductions and shape ops") {
  Rng rng(11);
  check_op("sum_all", [](const std::vector<Value>& v) { return O::sum_all(v[0]); },
           {random_tensor({3, 4}, rng)}, rng);
  check_op("mean_all", [](const std::vector<Value>& v) { return O::mean_all(v[0]); },
           {random_tensor({3, 4}, rng)}, rng);
  check_op("sum_axis0", [](const std::vector<Value>& v) { return O::sum_axis(v[0], 0); },
           {random_tensor({3, 4}, rng)}, rng);
  check_op("sum_axis-mid", [](const std::vector<Value>& v) { return O::sum_axis(v[0], 1); },
           {random_tensor({2, 3, 4}, rng)}, rng);
  check_op("broadcast_to",
           [](const std::vector<Value>& v) { return O::broadcast_to(v[0], {2, 3, 4}); },
           {random_tensor({3, 1}, rng)}, rng);
  check_op("sum_to", [](const std::vector<Value>& v) { return O::sum_to(v[0], {3, 1}); },
           {random_tensor({2, 3, 4}, rng)}, rng);
  check_op("reshape", [](const std::vector<Value>& v) { return O::reshape(v[0], {4, 3}); },
           {random_tensor({2, 6}, rng)}, rng);
  check_op("permute", [](const std::vector<Value>& v) { return O::permute(v[0], {2, 0, 1}); },
           {random_tensor({2, 3, 4}, rng)}, rng);
  check_op("slice", [](const std::vector<Value>& v) { return O::slice_axis(v[0], 1, 1, 2); },
           {random_tensor({2, 4, 3}, rng)}, rng);
  check_op("embed", [](const std::vector<Value>& v) { return O::embed_axis(v[0], 1, 2, 6); },
           {random_tensor({2, 2, 3}, rng)}, rng);
  check_op("concat",
           [](const std::vector<Value>& v) { return O::concat({v[0], v[1]}, 1); },
           {random_tensor({2, 2, 3}, rng), random_tensor({2, 4, 3}, rng)}, rng);
}

TEST_CASE("matmul") {
  Rng rng(13);
  check_op("matmul2d", [](const std::vector<Value>& v) { return O::matmul(v[0], v[1]); },
           {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}, rng);
  check_op("matmul-batched", [](const std::vector<Value>& v) { return O::matmul(v[0], v[1]); },
           {random_tensor({2, 2, 3, 4}, rng), random_tensor({2, 2, 4, 2}, rng)}, rng);
}

TEST_CASE("padding and pooling") {
  Rng rng(17);
  check_op("pad_zero", [](const std::vector<Value>& v) { return O::pad_zero(v[0], 1, 2, 0, 1); },
           {random_tensor({1, 2, 3, 4}, rng)}, rng);
  check_op("crop", [](const std::vector<Value>& v) { return O::crop(v[0], 1, 0, 1, 1); },
           {random_tensor({1, 2, 4, 5}, rng)}, rng);
  check_op("pad_replicate",
           [](const std::vector<Value>& v) { return O::pad_replicate(v[0], 1, 1, 2, 0); },
           {random_tensor({1, 2, 3, 4}, rng)}, rng);
  check_op("pad_replicate_adjoint",
           [](const std::vector<Value>& v) { return O::pad_replicate_adjoint(v[0], 1, 1, 1, 1); },
           {random_tensor({1, 1, 5, 5}, rng)}, rng);
  check_op("avgpool2", [](const std::vector<Value>& v) { return O::avgpool2(v[0]); },
           {random_tensor({2, 2, 4, 6}, rng)}, rng);
  check_op("upsample2", [](const std::vector<Value>& v) { return O::upsample2(v[0]); },
           {random_tensor({2, 2, 3, 2}, rng)}, rng);

  // adjointness: <pad(x), y> == <x, adjoint(y)>
  Tensor x = random_tensor({1, 1, 3, 4}, rng);
  Tensor y = random_tensor({1, 1, 6, 6}, rng);
  NoGradGuard ng;
  Value px = O::pad_replicate(Value::constant(x), 2, 1, 1, 1);
  Value ay = O::pad_replicate_adjoint(Value::constant(y), 2, 1, 1, 1);
  double lhs = O::sum_all(O::mul(px, Value::constant(y))).item();
  double rhs = O::sum_all(O::mul(Value::constant(x), ay)).item();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("convolutions") {
  Rng rng(19);
  check_op("conv3x3",
           [](const std::vector<Value>& v) { return O::conv2d_valid(v[0], v[1], 1); },
           {random_tensor({2, 2, 5, 6}, rng), random_tensor({3, 2, 3, 3}, rng)}, rng);
  check_op("conv1x1",
           [](const std::vector<Value>& v) { return O::conv2d_valid(v[0], v[1], 1); },
           {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 1, 1}, rng)}, rng);
  check_op("conv-groups2",
           [](const std::vector<Value>& v) { return O::conv2d_valid(v[0], v[1], 2); },
           {random_tensor({1, 4, 5, 5}, rng), random_tensor({6, 2, 3, 3}, rng)}, rng);
  check_op("conv-depthwise",
           [](const std::vector<Value>& v) { return O::conv2d_valid(v[0], v[1], 3); },
           {random_tensor({2, 3, 5, 5}, rng), random_tensor({3, 1, 3, 3}, rng)}, rng);
  check_op("conv_weight_grad-op",
           [](const std::vector<Value>& v) { return O::conv2d_weight_grad(v[0], v[1], 3, 3, 1); },
           {random_tensor({1, 2, 5, 5}, rng), random_tensor({1, 2, 3, 3}, rng)}, rng);
  check_op("conv_weight_transpose",
           [](const std::vector<Value>& v) { return O::conv_weight_transpose(v[0], 2); },
           {random_tensor({4, 3, 3, 3}, rng)}, rng);
}

TEST_CASE("softmax and l2 normalize") {
  Rng rng(23);
  check_op("softmax", [](const std::vector<Value>& v) { return O::softmax_lastdim(v[0]); },
           {random_tensor({2, 3, 4}, rng, -2.0, 2.0)}, rng);
  check_op("l2norm",
           [](const std::vector<Value>& v) { return O::l2_normalize_lastdim(v[0], 1e-8); },
           {random_tensor({2, 3, 4}, rng, 0.2, 1.5)}, rng);

  NoGradGuard ng;
  Tensor x = random_tensor({3, 5}, rng);
  Value s = O::softmax_lastdim(Value::constant(x));
  for (int64_t r = 0; r < 3; ++r) {
    double sum = 0.0;
    for (int64_t c = 0; c < 5; ++c) sum += s.val().at(r * 5 + c);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("gradient accumulates across multiple uses") {
  Value x = Value::leaf(Tensor::scalar(0.5));
  Value y = O::add(O::mul(x, x), O::mul_scalar(x, 3.0));  // x^2 + 3x
  auto g = grad(y, {x});
  CHECK(g[0].item() == doctest::Approx(2 * 0.5 + 3.0));
}

TEST_CASE("grad through detach is blocked") {
  Value x = Value::leaf(Tensor::scalar(2.0));
  Value y = O::mul(x.detach(), x);  // d/dx = detach(x) only
  auto g = grad(y, {x});
  CHECK(g[0].item() == doctest::Approx(2.0));
}

TEST_CASE("toy scalar meta-gradient equals the hand chain rule") {
  // scalar fusion parameter at 0, sources a=0, b=1, weight w = sigmoid(p),
  // inner step eta=0.1, outer loss (theta'-1)^2 -> dL/dp = 0.09
  const double eta = 0.1;
  Value thF = Value::leaf(Tensor::scalar(0.0));
  Value thP = Value::leaf(Tensor::scalar(0.0));
  Value w = O::sigmoid(thP);
  Value lf = O::add(O::mul(w, O::square(thF)),
                    O::mul(O::add_scalar(O::neg(w), 1.0), O::square(O::add_scalar(thF, -1.0))));
  auto gF = grad(lf, {thF}, {.create_graph = true});
  Value thFp = O::sub(thF, O::mul_scalar(gF[0], eta));
  CHECK(thFp.item() == doctest::Approx(0.1));
  Value lr = O::square(O::add_scalar(thFp, -1.0));
  auto gP = grad(lr, {thP});
  CHECK(gP[0].item() == doctest::Approx(0.09).epsilon(1e-9));

  // eta = 0 leaves no path from p to the outer loss
  auto gF0 = grad(lf, {thF}, {.create_graph = true});
  Value thFp0 = O::sub(thF, O::mul_scalar(gF0[0], 0.0));
  Value lr0 = O::square(O::add_scalar(thFp0, -1.0));
  auto gP0 = grad(lr0, {thP});
  CHECK(std::abs(gP0[0].item()) < 1e-12);
}

TEST_CASE("third-order chain stays consistent") {
  // f(x) = x^4; f' = 4x^3, f'' = 12x^2, f''' = 24x
  Value x = Value::leaf(Tensor::scalar(1.3));
  Value y = O::mul(O::mul(x, x), O::mul(x, x));
  auto g1 = grad(y, {x}, {.create_graph = true});
  auto g2 = grad(g1[0], {x}, {.create_graph = true});
  auto g3 = grad(g2[0], {x});
  CHECK(g1[0].item() == doctest::Approx(4 * std::pow(1.3, 3)));
  CHECK(g2[0].item() == doctest::Approx(12 * std::pow(1.3, 2)));
  CHECK(g3[0].item() == doctest::Approx(24 * 1.3));
}
