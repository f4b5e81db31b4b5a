// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace avflow {

namespace {

thread_local int g_nograd_depth = 0;

void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

bool track(const std::vector<Tensor>& inputs) {
  if (!grad_enabled()) return false;
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_nograd_depth; }
NoGradGuard::~NoGradGuard() { --g_nograd_depth; }

bool grad_enabled() { return g_nograd_depth == 0; }

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    check(d >= 0, "negative extent in shape");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto node = std::make_shared<TensorNode>();
  const int64_t n = shape_numel(shape);
  node->shape = std::move(shape);
  node->values.assign(static_cast<size_t>(n), value);
  return Tensor(std::move(node));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  check(shape_numel(shape) == static_cast<int64_t>(values.size()),
        "value count does not match shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

double Tensor::item() const {
  check(numel() == 1, "item() requires a single-element tensor");
  return node_->values[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

std::span<const double> Tensor::grad() const {
  check(node_->requires_grad, "grad() on a tensor that does not require gradients");
  const_cast<TensorNode*>(node_.get())->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<TensorNode>();
  node->shape = node_->shape;
  node->values = node_->values;
  return Tensor(std::move(node));
}

Tensor make_op(Shape out_shape, std::vector<double> out_values, std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backward) {
  check(shape_numel(out_shape) == static_cast<int64_t>(out_values.size()),
        "make_op: value count does not match shape");
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(out_shape);
  node->values = std::move(out_values);
  if (track(inputs)) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

// --- matmul and friends -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul requires rank-2 tensors");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ContractError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (int64_t i = 0; i < m; ++i) {
    double* out_row = out.data() + i * n;
    const double* a_row = av.data() + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = a_row[p];
      if (aip == 0.0) continue;
      const double* b_row = bv.data() + p * n;
      for (int64_t j = 0; j < n; ++j) out_row[j] += aip * b_row[j];
    }
  }
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& node) {
    auto& an = *node.inputs[0];
    auto& bn = *node.inputs[1];
    const double* g = node.grad.data();
    if (an.requires_grad) {
      an.ensure_grad();
      // dA = dC * B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* g_row = g + i * n;
          const double* b_row = bn.values.data() + p * n;
          for (int64_t j = 0; j < n; ++j) acc += g_row[j] * b_row[j];
          an.grad[static_cast<size_t>(i * k + p)] += acc;
        }
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      // dB = A^T * dC
      for (int64_t p = 0; p < k; ++p)
        for (int64_t i = 0; i < m; ++i) {
          const double aip = an.values[static_cast<size_t>(i * k + p)];
          if (aip == 0.0) continue;
          const double* g_row = g + i * n;
          double* bg_row = bn.grad.data() + p * n;
          for (int64_t j = 0; j < n; ++j) bg_row[j] += aip * g_row[j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  check(a.ndim() == 2, "transpose requires a rank-2 tensor");
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  const auto av = a.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = av[static_cast<size_t>(i * n + j)];
  return make_op({n, m}, std::move(out), {a}, [m, n](TensorNode& node) {
    auto& an = *node.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        an.grad[static_cast<size_t>(i * n + j)] += node.grad[static_cast<size_t>(j * m + i)];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check(shape_numel(shape) == a.numel(),
        "reshape to " + shape_str(shape) + " changes element count");
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op(std::move(shape), std::move(out), {a}, [](TensorNode& node) {
    auto& an = *node.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < node.grad.size(); ++i) an.grad[i] += node.grad[i];
  });
}

// --- elementwise ------------------------------------------------------------

namespace {

// Binary elementwise with scalar-with-tensor broadcasting. dfa/dfb map
// (a, b, upstream) to the contribution for each side.
template <typename F, typename Dfa, typename Dfb>
Tensor binary_ew(const Tensor& a, const Tensor& b, F f, Dfa dfa, Dfb dfb, const char* name) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    throw ContractError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()) + " are not scalar-broadcastable");
  const Tensor& big = b_scalar ? a : b;
  const int64_t n = big.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const auto av = a.values();
  const auto bv = b.values();
  for (int64_t i = 0; i < n; ++i) {
    const double x = av[a_scalar ? 0 : static_cast<size_t>(i)];
    const double y = bv[b_scalar ? 0 : static_cast<size_t>(i)];
    out[static_cast<size_t>(i)] = f(x, y);
  }
  return make_op(big.shape(), std::move(out), {a, b},
                 [n, a_scalar, b_scalar, dfa, dfb](TensorNode& node) {
                   auto& an = *node.inputs[0];
                   auto& bn = *node.inputs[1];
                   if (an.requires_grad) an.ensure_grad();
                   if (bn.requires_grad) bn.ensure_grad();
                   for (int64_t i = 0; i < n; ++i) {
                     const double x = an.values[a_scalar ? 0 : static_cast<size_t>(i)];
                     const double y = bn.values[b_scalar ? 0 : static_cast<size_t>(i)];
                     const double g = node.grad[static_cast<size_t>(i)];
                     if (an.requires_grad) an.grad[a_scalar ? 0 : static_cast<size_t>(i)] += dfa(x, y, g);
                     if (bn.requires_grad) bn.grad[b_scalar ? 0 : static_cast<size_t>(i)] += dfb(x, y, g);
                   }
                 });
}

template <typename F, typename Df>
Tensor unary_ew(const Tensor& a, F f, Df df) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const auto av = a.values();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(av[static_cast<size_t>(i)]);
  return make_op(a.shape(), std::move(out), {a}, [n, df](TensorNode& node) {
    auto& an = *node.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const size_t idx = static_cast<size_t>(i);
      an.grad[idx] += df(an.values[idx], node.values[idx]) * node.grad[idx];
    }
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return y * g; },
      [](double x, double, double g) { return x * g; }, "mul");
}

Tensor add_scalar(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
Tensor mul_scalar(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }

Tensor sigmoid(const Tensor& a) {
  return unary_ew(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = std::numbers::sqrt2 / 2.0;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_ew(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (!(v > 0.0)) throw DomainError("log of non-positive value");
  return unary_ew(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary_ew(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor softplus(const Tensor& a) {
  return unary_ew(
      a,
      [](double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); },
      [](double x, double) { return sigmoid_scalar(x); });
}

// --- structured ops ---------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  check(a.ndim() == 2, "softmax_rows requires a rank-2 tensor");
  const int64_t m = a.dim(0), n = a.dim(1);
  check(n >= 1, "softmax_rows requires at least one column");
  std::vector<double> out(static_cast<size_t>(m * n));
  const auto av = a.values();
  for (int64_t i = 0; i < m; ++i) {
    const double* row = av.data() + i * n;
    double* orow = out.data() + i * n;
    double mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (int64_t j = 0; j < n; ++j) orow[j] /= denom;
  }
  return make_op({m, n}, std::move(out), {a}, [m, n](TensorNode& node) {
    auto& an = *node.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      const double* y = node.values.data() + i * n;
      const double* g = node.grad.data() + i * n;
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += y[j] * g[j];
      double* ag = an.grad.data() + i * n;
      for (int64_t j = 0; j < n; ++j) ag[j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check(x.ndim() >= 1, "layer_norm requires rank >= 1");
  const int64_t d = x.dim(x.ndim() - 1);
  check(gain.ndim() == 1 && gain.dim(0) == d && bias.ndim() == 1 && bias.dim(0) == d,
        "layer_norm gain/bias must match the last extent");
  const int64_t rows = x.numel() / d;
  std::vector<double> out(static_cast<size_t>(rows * d));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  std::vector<double> xhat(static_cast<size_t>(rows * d));
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[static_cast<size_t>(r * d + j)] = h;
      out[static_cast<size_t>(r * d + j)] = h * gv[static_cast<size_t>(j)] + bv[static_cast<size_t>(j)];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [rows, d, inv_std = std::move(inv_std), xhat = std::move(xhat)](TensorNode& node) {
                   auto& xn = *node.inputs[0];
                   auto& gn = *node.inputs[1];
                   auto& bn = *node.inputs[2];
                   if (gn.requires_grad) gn.ensure_grad();
                   if (bn.requires_grad) bn.ensure_grad();
                   if (xn.requires_grad) xn.ensure_grad();
                   for (int64_t r = 0; r < rows; ++r) {
                     const double* g = node.grad.data() + r * d;
                     const double* h = xhat.data() + r * d;
                     if (gn.requires_grad || bn.requires_grad) {
                       for (int64_t j = 0; j < d; ++j) {
                         if (gn.requires_grad) gn.grad[static_cast<size_t>(j)] += g[j] * h[j];
                         if (bn.requires_grad) bn.grad[static_cast<size_t>(j)] += g[j];
                       }
                     }
                     if (!xn.requires_grad) continue;
                     // dL/dx = (dy - mean(dy) - xhat * mean(dy*xhat)) * inv_std,
                     // with dy = g * gain.
                     double mean_dy = 0.0, mean_dyh = 0.0;
                     for (int64_t j = 0; j < d; ++j) {
                       const double dy = g[j] * gn.values[static_cast<size_t>(j)];
                       mean_dy += dy;
                       mean_dyh += dy * h[j];
                     }
                     mean_dy /= static_cast<double>(d);
                     mean_dyh /= static_cast<double>(d);
                     const double is = inv_std[static_cast<size_t>(r)];
                     double* xg = xn.grad.data() + r * d;
                     for (int64_t j = 0; j < d; ++j) {
                       const double dy = g[j] * gn.values[static_cast<size_t>(j)];
                       xg[j] += (dy - mean_dy - h[j] * mean_dyh) * is;
                     }
                   }
                 });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  check(x.ndim() == 2 && b.ndim() == 1 && b.dim(0) == x.dim(1),
        "add_bias requires [m x n] and [n]");
  const int64_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  const auto xv = x.values();
  const auto bv = b.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out[static_cast<size_t>(i * n + j)] = xv[static_cast<size_t>(i * n + j)] + bv[static_cast<size_t>(j)];
  return make_op({m, n}, std::move(out), {x, b}, [m, n](TensorNode& node) {
    auto& xn = *node.inputs[0];
    auto& bn = *node.inputs[1];
    if (xn.requires_grad) {
      xn.ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) xn.grad[i] += node.grad[i];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          bn.grad[static_cast<size_t>(j)] += node.grad[static_cast<size_t>(i * n + j)];
    }
  });
}

Tensor mul_rows(const Tensor& x, const Tensor& v) {
  check(x.ndim() == 2 && v.ndim() == 1 && v.dim(0) == x.dim(1),
        "mul_rows requires [m x n] and [n]");
  const int64_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  const auto xv = x.values();
  const auto vv = v.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out[static_cast<size_t>(i * n + j)] = xv[static_cast<size_t>(i * n + j)] * vv[static_cast<size_t>(j)];
  return make_op({m, n}, std::move(out), {x, v}, [m, n](TensorNode& node) {
    auto& xn = *node.inputs[0];
    auto& vn = *node.inputs[1];
    if (xn.requires_grad) xn.ensure_grad();
    if (vn.requires_grad) vn.ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        const size_t idx = static_cast<size_t>(i * n + j);
        const double g = node.grad[idx];
        if (xn.requires_grad) xn.grad[idx] += g * vn.values[static_cast<size_t>(j)];
        if (vn.requires_grad) vn.grad[static_cast<size_t>(j)] += g * xn.values[idx];
      }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows of zero tensors");
  const int64_t n = parts[0].dim(1);
  int64_t rows = 0;
  for (const auto& p : parts) {
    check(p.ndim() == 2 && p.dim(1) == n, "concat_rows: column extents differ");
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(rows * n));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<int64_t> row_counts;
  for (const auto& p : parts) row_counts.push_back(p.dim(0));
  return make_op({rows, n}, std::move(out), parts, [row_counts, n](TensorNode& node) {
    int64_t offset = 0;
    for (size_t k = 0; k < node.inputs.size(); ++k) {
      auto& in = *node.inputs[k];
      const int64_t r = row_counts[k];
      if (in.requires_grad) {
        in.ensure_grad();
        for (int64_t i = 0; i < r * n; ++i)
          in.grad[static_cast<size_t>(i)] += node.grad[static_cast<size_t>(offset * n + i)];
      }
      offset += r;
    }
  });
}

Tensor gather_rows(const Tensor& x, std::vector<int64_t> indices) {
  check(x.ndim() == 2, "gather_rows requires a rank-2 tensor");
  const int64_t m = x.dim(0), n = x.dim(1);
  for (int64_t idx : indices)
    check(idx >= 0 && idx < m, "gather_rows index out of range");
  const int64_t r = static_cast<int64_t>(indices.size());
  std::vector<double> out(static_cast<size_t>(r * n));
  const auto xv = x.values();
  for (int64_t i = 0; i < r; ++i)
    std::copy_n(xv.data() + indices[static_cast<size_t>(i)] * n, n, out.data() + i * n);
  return make_op({r, n}, std::move(out), {x}, [indices = std::move(indices), n](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < indices.size(); ++i)
      for (int64_t j = 0; j < n; ++j)
        xn.grad[static_cast<size_t>(indices[i] * n + j)] +=
            node.grad[static_cast<size_t>(static_cast<int64_t>(i) * n + j)];
  });
}

Tensor col_slice(const Tensor& x, int64_t start, int64_t count) {
  check(x.ndim() == 2, "col_slice requires a rank-2 tensor");
  const int64_t m = x.dim(0), n = x.dim(1);
  check(start >= 0 && count >= 0 && start + count <= n, "col_slice out of range");
  std::vector<double> out(static_cast<size_t>(m * count));
  const auto xv = x.values();
  for (int64_t i = 0; i < m; ++i)
    std::copy_n(xv.data() + i * n + start, count, out.data() + i * count);
  return make_op({m, count}, std::move(out), {x}, [m, n, start, count](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < count; ++j)
        xn.grad[static_cast<size_t>(i * n + start + j)] +=
            node.grad[static_cast<size_t>(i * count + j)];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols of zero tensors");
  const int64_t m = parts[0].dim(0);
  int64_t cols = 0;
  for (const auto& p : parts) {
    check(p.ndim() == 2 && p.dim(0) == m, "concat_cols: row extents differ");
    cols += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(m * cols));
  std::vector<int64_t> col_counts;
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t c = p.dim(1);
    col_counts.push_back(c);
    const auto pv = p.values();
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(pv.data() + i * c, c, out.data() + i * cols + offset);
    offset += c;
  }
  return make_op({m, cols}, std::move(out), parts, [m, cols, col_counts](TensorNode& node) {
    int64_t off = 0;
    for (size_t k = 0; k < node.inputs.size(); ++k) {
      auto& in = *node.inputs[k];
      const int64_t c = col_counts[k];
      if (in.requires_grad) {
        in.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j)
            in.grad[static_cast<size_t>(i * c + j)] +=
                node.grad[static_cast<size_t>(i * cols + off + j)];
      }
      off += c;
    }
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_op({}, {acc}, {a}, [](TensorNode& node) {
    auto& an = *node.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const double g = node.grad[0];
    for (auto& v : an.grad) v += g;
  });
}

Tensor mean(const Tensor& a) {
  check(a.numel() > 0, "mean of an empty tensor");
  const double inv = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_op({}, {acc * inv}, {a}, [inv](TensorNode& node) {
    auto& an = *node.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const double g = node.grad[0] * inv;
    for (auto& v : an.grad) v += g;
  });
}

// --- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss");
  if (!loss.requires_grad())
    throw ContractError("backward on a tensor without graph history");

  // Iterative post-order DFS for the topological order.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes get a fresh buffer per call; only leaves (parameters)
  // accumulate across calls.
  for (TensorNode* node : order) {
    if (node->backward_fn) {
      node->ensure_grad();
      std::fill(node->grad.begin(), node->grad.end(), 0.0);
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h) {
  // Analytic pass.
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  double max_rel = 0.0;
  NoGradGuard no_grad;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].mutable_values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = f().item();
      vals[i] = orig - h;
      const double down = f().item();
      vals[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace avflow
