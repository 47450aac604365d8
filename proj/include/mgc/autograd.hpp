#pragma once

// Minimal reverse-mode differentiation over f64 tensors. Every op returns a
// new node holding its value and a closure that pushes the node's gradient
// into its inputs; `backward` replays the closures in reverse topological
// order.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mgc/tensor.hpp"

namespace mgc::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::string name;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
  bool has_grad() const { return !grad.empty(); }
};

// Leaf that accumulates a gradient (a parameter or a checked input).
Var parameter(Tensor value, std::string name = {});
// Leaf excluded from differentiation.
Var constant(Tensor value, std::string name = {});

// Builds an op result. When gradients are disabled or no input requires one,
// the inputs and closure are dropped so no graph is retained.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

// Seeds d(root)/d(root) = 1 for a single-element root and accumulates into
// every reachable node that requires a gradient.
void backward(const Var& root);

void zero_grad(const std::vector<Var>& vars);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace mgc::ag
