#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "refusion/tensor.hpp"

namespace refusion::ad {

class Value;

// A node's vjp maps the upstream cotangent to one cotangent per input. The
// cotangents are built from graph ops, so when grad() runs with create_graph
// the backward pass itself is differentiable (reverse-over-reverse); that is
// what carries the second-order meta-gradient through the inner SGD step.
using Vjp = std::function<std::vector<Value>(const Value& self, const Value& upstream)>;

struct Node : std::enable_shared_from_this<Node> {
  Tensor value;
  std::vector<Value> inputs;
  Vjp vjp;
  bool requires_grad = false;
  const char* op = "leaf";
  uint64_t id = 0;
};

class Value {
 public:
  Value() = default;

  static Value constant(Tensor t, const char* op = "const");
  static Value leaf(Tensor t);  // requires_grad regardless of grad mode

  bool defined() const { return node_ != nullptr; }
  const Tensor& val() const { return node_->value; }
  const std::vector<int64_t>& shape() const { return node_->value.shape(); }
  int64_t numel() const { return node_->value.numel(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node* node() const { return node_.get(); }
  std::shared_ptr<Node> node_ptr() const { return node_; }

  Value detach() const { return constant(node_->value, "detach"); }

  explicit Value(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// RAII guard that disables graph recording (grad() uses it when
// create_graph == false).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Records an op node. Inputs that do not require grad (or recording disabled)
// collapse to a constant result node.
Value make_op(const char* op, Tensor out, std::vector<Value> inputs, Vjp vjp);

struct GradOptions {
  bool create_graph = false;
  // Seed cotangent for non-scalar outputs; defaults to ones.
  Value seed;
};

// Reverse-mode gradient of a scalar (or seeded) output w.r.t. `wrt`. Values
// not reached by the backward sweep yield zero tensors of matching shape.
std::vector<Value> grad(const Value& output, const std::vector<Value>& wrt,
                        const GradOptions& opts = {});

}  // namespace refusion::ad
