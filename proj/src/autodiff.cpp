#include "refusion/autodiff.hpp"

#include <atomic>
#include <unordered_map>

#include "refusion/ops.hpp"

namespace refusion::ad {

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_next_id{1};
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Value Value::constant(Tensor t, const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = false;
  n->op = op;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return Value(std::move(n));
}

Value Value::leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  n->op = "leaf";
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return Value(std::move(n));
}

Value make_op(const char* op, Tensor out, std::vector<Value> inputs, Vjp vjp) {
  bool any = false;
  if (g_grad_enabled)
    for (const auto& in : inputs)
      if (in.requires_grad()) { any = true; break; }
  if (!any) return Value::constant(std::move(out), op);

  auto n = std::make_shared<Node>();
  n->value = std::move(out);
  n->inputs = std::move(inputs);
  n->vjp = std::move(vjp);
  n->requires_grad = true;
  n->op = op;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return Value(std::move(n));
}

namespace {

// Iterative post-order over the requires_grad subgraph; recursion would
// overflow on the chains produced by backward-of-backward.
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;  // 0 new, 1 open, 2 done
  std::vector<Node*> stack{root};
  while (!stack.empty()) {
    Node* n = stack.back();
    int& st = state[n];
    if (st == 0) {
      st = 1;
      for (const auto& in : n->inputs)
        if (in.defined() && in.requires_grad() && state[in.node()] == 0)
          stack.push_back(in.node());
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        order.push_back(n);
      }
    }
  }
  return order;  // inputs before users
}

}  // namespace

std::vector<Value> grad(const Value& output, const std::vector<Value>& wrt,
                        const GradOptions& opts) {
  if (!output.defined()) throw ContractError("grad(): undefined output");

  Value seed = opts.seed;
  if (!seed.defined()) {
    if (output.numel() != 1)
      throw ContractError("grad(): non-scalar output requires an explicit seed");
    seed = Value::constant(Tensor::full(output.shape(), 1.0), "seed");
  }

  std::unordered_map<Node*, Value> cotangent;
  cotangent[output.node()] = seed;

  if (output.requires_grad()) {
    auto order = topo_order(output.node());
    std::unique_ptr<NoGradGuard> guard;
    if (!opts.create_graph) guard = std::make_unique<NoGradGuard>();

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      auto found = cotangent.find(n);
      if (found == cotangent.end() || n->inputs.empty() || !n->vjp) continue;
      Value self(n->shared_from_this());
      std::vector<Value> in_cts = n->vjp(self, found->second);
      if (in_cts.size() != n->inputs.size())
        throw ContractError(std::string("vjp arity mismatch in op ") + n->op);
      for (size_t i = 0; i < in_cts.size(); ++i) {
        const Value& in = n->inputs[i];
        if (!in.defined() || !in.requires_grad() || !in_cts[i].defined()) continue;
        auto slot = cotangent.find(in.node());
        if (slot == cotangent.end())
          cotangent.emplace(in.node(), in_cts[i]);
        else
          slot->second = ops::add(slot->second, in_cts[i]);
      }
    }
  }

  std::vector<Value> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto found = cotangent.find(w.node());
    if (found != cotangent.end())
      out.push_back(found->second);
    else
      out.push_back(Value::constant(Tensor::zeros(w.shape()), "zero-grad"));
  }
  return out;
}

}  // namespace refusion::ad
