// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with reverse-mode gradient accumulation.
//
// A Tensor is a shared handle to a graph node. Operations executed while
// gradients are enabled record backward closures; backward() on a scalar
// loss traverses the recorded graph in reverse topological order and
// accumulates into the grad buffers of every node that requires gradients.
// Gradients keep accumulating across backward() calls until zero_grad().
//
// Broadcasting is deliberately limited to scalar-with-tensor; everything
// else (row bias, row scaling, gathers) is its own explicitly-shaped op.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace avflow {

// Usage/contract violations (bad shapes, bad arguments).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Math domain violations (log of a non-positive value).
struct DomainError : ContractError {
  using ContractError::ContractError;
};

// Numerical failure at run time (NaN loss, divergence).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily; same length as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// While alive, no operation records backward closures and outputs do not
// require gradients. Nestable.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t ndim() const { return node_->shape.size(); }

  std::span<const double> values() const { return node_->values; }
  std::span<double> mutable_values() { return node_->values; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  std::span<const double> grad() const;
  void zero_grad();

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

  // Detached value copy (no graph history, no grad requirement).
  Tensor detach() const;

 private:
  std::shared_ptr<TensorNode> node_;
};

// Low-level node builder for ops defined outside this file (e.g. rotary).
// `backward` receives the output node; it must accumulate into the grads of
// the recorded inputs. Only called when gradients are enabled and at least
// one input requires them.
Tensor make_op(Shape out_shape, std::vector<double> out_values,
               std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backward);

// --- arithmetic -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact Gaussian-CDF form
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor softplus(const Tensor& a);  // overflow-safe log(1 + e^x)

Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// Row-broadcast ops over [m x n] with a length-n vector.
Tensor add_bias(const Tensor& x, const Tensor& b);
Tensor mul_rows(const Tensor& x, const Tensor& v);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, std::vector<int64_t> indices);
Tensor col_slice(const Tensor& x, int64_t start, int64_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// --- autograd ---------------------------------------------------------------

// Accumulates d(loss)/d(node) into every grad-requiring node reachable from
// `loss`. The loss must be scalar and carry graph history.
void backward(const Tensor& loss);

// Max relative error between analytic gradients and central finite
// differences of `f` over `params`, at step size `h`. `f` must be a
// deterministic function of the parameter values.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h);

}  // namespace avflow
