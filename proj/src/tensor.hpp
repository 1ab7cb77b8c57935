#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace polydet::nn {

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // persistent accumulation target
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's contribution into the parents' flowing-gradient
  // buffers. parent_grads[i] is null when parents[i] does not require grad.
  std::function<void(const Node& self, const std::vector<double>& g,
                     const std::vector<std::vector<double>*>& parent_grads)>
      backprop;

  size_t numel() const { return values.size(); }
};

}  // namespace detail

// Dense 64-bit float tensor with reverse-mode differentiation. Tensors are
// cheap handles onto shared nodes; a node's values are written only at
// creation time, by the optimizer, or by checkpoint loading. Gradients of
// leaf tensors accumulate additively across backward passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(std::vector<int> shape, std::vector<double> values);
  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar_of(double value);
  // Leaf with requires_grad set; gradient accumulates here.
  static Tensor variable(std::vector<int> shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  size_t numel() const { return node_->values.size(); }
  int rows() const;
  int cols() const;

  const std::vector<double>& values() const { return node_->values; }
  // In-place value mutation; reserved for the optimizer, checkpoint loading
  // and finite-difference probing. Invalidates nothing: graphs are rebuilt
  // per step.
  std::vector<double>& values_mut() { return node_->values; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  void zero_grad();

  double at(size_t i) const { return node_->values[i]; }
  double at(int r, int c) const;
  // Value of a single-element tensor.
  double scalar() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

std::string shape_string(const std::vector<int>& shape);

// --- primitive operations -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Binary elementwise; add/sub also accept a trailing bias vector for the
// second operand ([r,c] op [c]). All other shape coercion is an error.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double exponent);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor clamp(const Tensor& a, double lo, double hi);

// Numerically stable softmax along `axis`. `mask`, when defined, has the
// same shape with entries in {0,1}; masked-out positions get weight exactly
// 0 and receive no gradient. A fully masked slice yields all zeros.
Tensor softmax(const Tensor& a, int axis, const Tensor& mask = Tensor());

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& tensors, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor gather_rows(const Tensor& a, const std::vector<int>& indices);
Tensor sum(const Tensor& a);

// Reverse-mode pass from a scalar loss. Gradients accumulate into every
// requires_grad node reachable from the loss.
void backward(const Tensor& loss);

// Fault-injection hook used by the gradient-check negative control: when
// enabled, layer_norm propagates a negated input gradient.
void set_layer_norm_grad_negation(bool enabled);

}  // namespace polydet::nn
