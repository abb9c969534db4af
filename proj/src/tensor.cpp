#include "pearl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "pearl/error.hpp"

namespace pearl {

namespace detail {

using GradBuffers = std::vector<std::vector<double>>;
// Receives the upstream gradient and writes per-input gradients into the
// pre-sized (zeroed) buffers. Buffers for inputs that do not require grad
// are left empty and must not be touched.
using BackwardFn = std::function<void(std::span<const double>, GradBuffers&)>;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;
  std::shared_ptr<Node> grad_fn;
};

struct Access {
  static const std::shared_ptr<TensorImpl>& impl(const Tensor& t) {
    return t.impl_;
  }
  static Tensor wrap(std::shared_ptr<TensorImpl> p) { return Tensor(std::move(p)); }
};

}  // namespace detail

using detail::Access;
using detail::GradBuffers;
using detail::TensorImpl;

namespace {

thread_local bool g_grad_enabled = true;

const TensorImpl& checked(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  return *Access::impl(t);
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

std::size_t leading_rows(const Shape& s) {
  const std::size_t cols = last_dim(s);
  return cols == 0 ? 0 : shape_numel(s) / cols;
}

// Builds the output tensor, recording a graph node when any input needs grad.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, detail::BackwardFn backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      auto node = std::make_shared<detail::Node>();
      for (const auto& in : inputs) node->inputs.push_back(Access::impl(in));
      node->backward = std::move(backward);
      impl->requires_grad = true;
      impl->grad_fn = std::move(node);
    }
  }
  return Access::wrap(std::move(impl));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_2d(const Tensor& a, const char* op) {
  if (a.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.shape()));
  }
}

// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      const double* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  for (auto s : shape) {
    if (s == 0) throw DimensionError("tensor dims must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> data(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) data[i * n + i] = 1.0;
  return from_data({n, n}, std::move(data));
}

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng,
                     bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const { return checked(*this, "shape").shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw IndexError("axis out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(*this, "numel").data.size(); }

std::span<const double> Tensor::data() const { return checked(*this, "data").data; }

std::span<double> Tensor::mutable_data() {
  checked(*this, "mutable_data");
  return impl_->data;
}

double Tensor::item() const {
  const auto& impl = checked(*this, "item");
  if (impl.data.size() != 1) throw ContractError("item() on non-scalar " + shape_str(impl.shape));
  return impl.data[0];
}

double Tensor::at(std::size_t i) const {
  const auto& impl = checked(*this, "at");
  if (i >= impl.data.size()) throw IndexError("flat index out of range");
  return impl.data[i];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  const auto& impl = checked(*this, "at");
  if (impl.shape.size() != 2 || i >= impl.shape[0] || j >= impl.shape[1]) {
    throw IndexError("matrix index out of range");
  }
  return impl.data[i * impl.shape[1] + j];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  checked(*this, "set_requires_grad");
  if (impl_->grad_fn) throw ContractError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return checked(*this, "is_leaf").grad_fn == nullptr; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no grad");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!has_grad()) throw ContractError("tensor has no grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  checked(*this, "zero_grad");
  if (!impl_->requires_grad) return;
  impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& impl = checked(*this, "detach");
  return from_data(impl.shape, impl.data, false);
}

Tensor Tensor::clone() const {
  const auto& impl = checked(*this, "clone");
  return from_data(impl.shape, impl.data, impl.requires_grad);
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  const auto& a = checked(*this, "bitwise_equal");
  const auto& b = checked(other, "bitwise_equal");
  if (a.shape != b.shape) return false;
  return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

void Tensor::backward() const {
  const auto& root = checked(*this, "backward");
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar, got " + shape_str(root.shape));
  }
  if (!root.requires_grad) {
    throw ContractError("backward() on a tensor that does not require grad");
  }

  // Post-order DFS: inputs land before the outputs that consume them.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      TensorImpl* child = fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  std::unordered_map<TensorImpl*, std::vector<double>> pending;
  pending[impl_.get()] = {1.0};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    auto found = pending.find(node);
    if (found == pending.end()) continue;
    std::vector<double> gout = std::move(found->second);
    pending.erase(found);

    if (!node->grad_fn) {
      if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
      for (std::size_t i = 0; i < gout.size(); ++i) node->grad[i] += gout[i];
      continue;
    }

    const auto& inputs = node->grad_fn->inputs;
    GradBuffers gin(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i]->requires_grad) gin[i].assign(inputs[i]->data.size(), 0.0);
    }
    node->grad_fn->backward(gout, gin);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i]->requires_grad) continue;
      auto& acc = pending[inputs[i].get()];
      if (acc.empty()) {
        acc = std::move(gin[i]);
      } else {
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gin[i][j];
      }
    }
  }
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  checked(a, "matmul");
  checked(b, "matmul");
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b},
                     [a, b, m, k, n](std::span<const double> g, GradBuffers& gin) {
                       if (!gin[0].empty()) gemm_nt(g.data(), b.data().data(), gin[0].data(), m, n, k);
                       if (!gin[1].empty()) gemm_tn(a.data().data(), g.data(), gin[1].data(), m, k, n);
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  checked(a, "add");
  checked(b, "add");
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](std::span<const double> g, GradBuffers& gin) {
                       for (auto& buf : gin) {
                         if (!buf.empty()) std::copy(g.begin(), g.end(), buf.begin());
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  checked(a, "sub");
  checked(b, "sub");
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](std::span<const double> g, GradBuffers& gin) {
                       if (!gin[0].empty()) std::copy(g.begin(), g.end(), gin[0].begin());
                       if (!gin[1].empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] = -g[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  checked(a, "mul");
  checked(b, "mul");
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](std::span<const double> g, GradBuffers& gin) {
                       auto ad = a.data(), bd = b.data();
                       if (!gin[0].empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * bd[i];
                       }
                       if (!gin[1].empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] = g[i] * ad[i];
                       }
                     });
}

Tensor scale(const Tensor& a, double factor) {
  checked(a, "scale");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a},
                     [factor](std::span<const double> g, GradBuffers& gin) {
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * factor;
                     });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  checked(a, "add_bias");
  checked(bias, "add_bias");
  const std::size_t n = last_dim(a.shape());
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match " + shape_str(a.shape()));
  }
  const std::size_t m = leading_rows(a.shape());
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bd[j];
  }
  return make_result(a.shape(), std::move(out), {a, bias},
                     [m, n](std::span<const double> g, GradBuffers& gin) {
                       if (!gin[0].empty()) std::copy(g.begin(), g.end(), gin[0].begin());
                       if (!gin[1].empty()) {
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t j = 0; j < n; ++j) gin[1][j] += g[i * n + j];
                         }
                       }
                     });
}

Tensor add_tiled(const Tensor& a, const Tensor& b) {
  checked(a, "add_tiled");
  checked(b, "add_tiled");
  const std::size_t n = last_dim(a.shape());
  const std::size_t period = b.numel();
  if (last_dim(b.shape()) != n || period == 0 || a.numel() % period != 0) {
    throw DimensionError("add_tiled: " + shape_str(b.shape()) + " does not tile " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % period];
  return make_result(a.shape(), std::move(out), {a, b},
                     [period](std::span<const double> g, GradBuffers& gin) {
                       if (!gin[0].empty()) std::copy(g.begin(), g.end(), gin[0].begin());
                       if (!gin[1].empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[1][i % period] += g[i];
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape tail;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& s = checked(parts[i], "concat").shape;
    if (s.empty()) throw DimensionError("concat: scalar input");
    Shape t(s.begin() + 1, s.end());
    if (i == 0) {
      tail = t;
    } else if (t != tail) {
      throw DimensionError("concat: trailing shapes differ " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(s));
    }
    rows += s[0];
  }
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result(std::move(shape), std::move(out), parts,
                     [sizes](std::span<const double> g, GradBuffers& gin) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < sizes.size(); ++i) {
                         if (!gin[i].empty()) {
                           std::copy(g.begin() + off, g.begin() + off + sizes[i], gin[i].begin());
                         }
                         off += sizes[i];
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  const auto& s = checked(a, "slice").shape;
  if (s.empty() || begin >= end || end > s[0]) {
    throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(s));
  }
  const std::size_t row = shape_numel(s) / s[0];
  Shape shape = s;
  shape[0] = end - begin;
  std::vector<double> out(a.data().begin() + begin * row, a.data().begin() + end * row);
  const std::size_t off = begin * row;
  return make_result(std::move(shape), std::move(out), {a},
                     [off](std::span<const double> g, GradBuffers& gin) {
                       std::copy(g.begin(), g.end(), gin[0].begin() + off);
                     });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  checked(a, "gather_rows");
  require_2d(a, "gather_rows");
  const std::size_t n = a.size(1);
  if (rows.empty()) throw ContractError("gather_rows: no rows");
  std::vector<double> out;
  out.reserve(rows.size() * n);
  for (auto r : rows) {
    if (r >= a.size(0)) throw IndexError("gather_rows: row out of range");
    auto src = a.data().subspan(r * n, n);
    out.insert(out.end(), src.begin(), src.end());
  }
  return make_result({rows.size(), n}, std::move(out), {a},
                     [rows, n](std::span<const double> g, GradBuffers& gin) {
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         for (std::size_t j = 0; j < n; ++j) gin[0][rows[i] * n + j] += g[i * n + j];
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  checked(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a},
                     [](std::span<const double> g, GradBuffers& gin) {
                       std::copy(g.begin(), g.end(), gin[0].begin());
                     });
}

Tensor transpose(const Tensor& a) {
  checked(a, "transpose");
  require_2d(a, "transpose");
  const std::size_t m = a.size(0), n = a.size(1);
  std::vector<double> out(m * n);
  auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  }
  return make_result({n, m}, std::move(out), {a},
                     [m, n](std::span<const double> g, GradBuffers& gin) {
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] = g[j * m + i];
                       }
                     });
}

Tensor sum(const Tensor& a) {
  checked(a, "sum");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result({}, {acc}, {a}, [](std::span<const double> g, GradBuffers& gin) {
    std::fill(gin[0].begin(), gin[0].end(), g[0]);
  });
}

Tensor mean(const Tensor& a) {
  checked(a, "mean");
  const double n = static_cast<double>(a.numel());
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result({}, {acc / n}, {a}, [n](std::span<const double> g, GradBuffers& gin) {
    std::fill(gin[0].begin(), gin[0].end(), g[0] / n);
  });
}

Tensor relu(const Tensor& a) {
  checked(a, "relu");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), {a},
                     [a](std::span<const double> g, GradBuffers& gin) {
                       auto ad = a.data();
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = ad[i] > 0.0 ? g[i] : 0.0;
                     });
}

Tensor gelu(const Tensor& a) {
  checked(a, "gelu");
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  return make_result(a.shape(), std::move(out), {a},
                     [a](std::span<const double> g, GradBuffers& gin) {
                       const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
                       auto ad = a.data();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double x = ad[i];
                         const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                         const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                         gin[0][i] = g[i] * (cdf + x * pdf);
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = checked(x, "softmax").shape;
  if (axis >= s.size()) throw IndexError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  auto xd = x.data();
  for (double v : xd) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  std::vector<double> probs = out;
  return make_result(s, std::move(out), {x},
                     [probs = std::move(probs), outer, inner, n](std::span<const double> g,
                                                                  GradBuffers& gin) {
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t in = 0; in < inner; ++in) {
                           const std::size_t base = o * n * inner + in;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             dot += g[base + j * inner] * probs[base + j * inner];
                           }
                           for (std::size_t j = 0; j < n; ++j) {
                             const std::size_t idx = base + j * inner;
                             gin[0][idx] = probs[idx] * (g[idx] - dot);
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
  checked(x, "layer_norm");
  checked(gain, "layer_norm");
  checked(shift, "layer_norm");
  const std::size_t n = last_dim(x.shape());
  if (gain.numel() != n || shift.numel() != n) {
    throw DimensionError("layer_norm: affine params do not match " + shape_str(x.shape()));
  }
  const std::size_t m = leading_rows(x.shape());
  auto xd = x.data();
  auto gd = gain.data();
  auto sd = shift.data();
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(m);
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv_std[i];
      xhat[i * n + j] = h;
      out[i * n + j] = h * gd[j] + sd[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gain, shift},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gain, m, n](
          std::span<const double> g, GradBuffers& gin) {
        auto gd = gain.data();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          const double* gr = g.data() + i * n;
          const double* hr = xhat.data() + i * n;
          if (!gin[1].empty()) {
            for (std::size_t j = 0; j < n; ++j) gin[1][j] += gr[j] * hr[j];
          }
          if (!gin[2].empty()) {
            for (std::size_t j = 0; j < n; ++j) gin[2][j] += gr[j];
          }
          if (!gin[0].empty()) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = gr[j] * gd[j];
              mean_dh += dh;
              mean_dh_h += dh * hr[j];
            }
            mean_dh *= inv_n;
            mean_dh_h *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = gr[j] * gd[j];
              gin[0][i * n + j] = inv_std[i] * (dh - mean_dh - hr[j] * mean_dh_h);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  checked(logits, "cross_entropy");
  require_2d(logits, "cross_entropy");
  const std::size_t b = logits.size(0), c = logits.size(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(b));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(c) + ")");
    }
  }
  auto ld = logits.data();
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = ld.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - log_z);
    loss += log_z - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result({}, {loss}, {logits},
                     [probs = std::move(probs), ys = std::move(ys), b, c](
                         std::span<const double> g, GradBuffers& gin) {
                       const double s = g[0] / static_cast<double>(b);
                       for (std::size_t i = 0; i < b; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const double target = static_cast<std::size_t>(ys[i]) == j ? 1.0 : 0.0;
                           gin[0][i * c + j] = s * (probs[i * c + j] - target);
                         }
                       }
                     });
}

Tensor mean_abs_error(const Tensor& a, const Tensor& b) {
  checked(a, "mean_abs_error");
  checked(b, "mean_abs_error");
  require_same_shape(a, b, "mean_abs_error");
  auto ad = a.data(), bd = b.data();
  const double n = static_cast<double>(ad.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) acc += std::abs(ad[i] - bd[i]);
  return make_result({}, {acc / n}, {a, b},
                     [a, b, n](std::span<const double> g, GradBuffers& gin) {
                       auto ad = a.data(), bd = b.data();
                       for (std::size_t i = 0; i < ad.size(); ++i) {
                         const double diff = ad[i] - bd[i];
                         const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                         if (!gin[0].empty()) gin[0][i] = g[0] * sgn / n;
                         if (!gin[1].empty()) gin[1][i] = -g[0] * sgn / n;
                       }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& prefix_k,
                 const Tensor& prefix_v, std::size_t batch, std::size_t heads) {
  checked(q, "attention");
  checked(k, "attention");
  checked(v, "attention");
  require_2d(q, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  if (prefix_k.defined() != prefix_v.defined()) {
    throw ContractError("attention: prefix keys and values must be given together");
  }
  const bool has_prefix = prefix_k.defined();
  const std::size_t d = q.size(1);
  if (batch == 0 || q.size(0) % batch != 0) {
    throw DimensionError("attention: " + std::to_string(q.size(0)) +
                         " rows do not split into batch " + std::to_string(batch));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
  }
  std::size_t p = 0;
  if (has_prefix) {
    require_2d(prefix_k, "attention");
    require_same_shape(prefix_k, prefix_v, "attention");
    if (prefix_k.size(1) != d) {
      throw DimensionError("attention: prefix width " + std::to_string(prefix_k.size(1)) +
                           " != " + std::to_string(d));
    }
    p = prefix_k.size(0);
  }
  const std::size_t s = q.size(0) / batch;
  const std::size_t dh = d / heads;
  const std::size_t n = p + s;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::span<const double> pkd, pvd;
  if (has_prefix) {
    pkd = prefix_k.data();
    pvd = prefix_v.data();
  }
  // Row r of the extended key/value sequence for sample b.
  auto key_row = [&](std::span<const double> pre, std::span<const double> own, std::size_t b,
                     std::size_t r) -> const double* {
    return r < p ? pre.data() + r * d : own.data() + (b * s + (r - p)) * d;
  };

  std::vector<double> probs(batch * heads * s * n);
  std::vector<double> out(q.numel(), 0.0);
  std::vector<double> scores(n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col = h * dh;
      double* pbh = probs.data() + (b * heads + h) * s * n;
      for (std::size_t i = 0; i < s; ++i) {
        const double* qi = qd.data() + (b * s + i) * d + col;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < n; ++r) {
          const double* kr = key_row(pkd, kd, b, r) + col;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kr[c];
          scores[r] = acc * inv_scale;
          mx = std::max(mx, scores[r]);
        }
        double z = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          scores[r] = std::exp(scores[r] - mx);
          z += scores[r];
        }
        double* oi = out.data() + (b * s + i) * d + col;
        for (std::size_t r = 0; r < n; ++r) {
          const double w = scores[r] / z;
          pbh[i * n + r] = w;
          const double* vr = key_row(pvd, vd, b, r) + col;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vr[c];
        }
      }
    }
  }

  std::vector<Tensor> inputs{q, k, v};
  if (has_prefix) {
    inputs.push_back(prefix_k);
    inputs.push_back(prefix_v);
  }
  return make_result(
      q.shape(), std::move(out), inputs,
      [q, k, v, prefix_k, prefix_v, probs = std::move(probs), has_prefix, batch, heads, s, p, n,
       d, dh, inv_scale](std::span<const double> g, GradBuffers& gin) {
        auto qd = q.data(), kd = k.data(), vd = v.data();
        std::span<const double> pkd, pvd;
        if (has_prefix) {
          pkd = prefix_k.data();
          pvd = prefix_v.data();
        }
        auto& gq = gin[0];
        auto& gk = gin[1];
        auto& gv = gin[2];
        std::vector<double> unused;
        auto& gpk = has_prefix ? gin[3] : unused;
        auto& gpv = has_prefix ? gin[4] : unused;
        std::vector<double> dprob(n);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t col = h * dh;
            const double* pbh = probs.data() + (b * heads + h) * s * n;
            for (std::size_t i = 0; i < s; ++i) {
              const double* gi = g.data() + (b * s + i) * d + col;
              const double* prow = pbh + i * n;
              // dP = dO * V^T, and dV += P^T * dO.
              double dot = 0.0;
              for (std::size_t r = 0; r < n; ++r) {
                const bool pre = r < p;
                const double* vr = pre ? pvd.data() + r * d + col
                                       : vd.data() + (b * s + (r - p)) * d + col;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vr[c];
                dprob[r] = acc;
                dot += acc * prow[r];
                auto& gvbuf = pre ? gpv : gv;
                if (!gvbuf.empty()) {
                  double* gvr = gvbuf.data() + (pre ? r * d : (b * s + (r - p)) * d) + col;
                  for (std::size_t c = 0; c < dh; ++c) gvr[c] += prow[r] * gi[c];
                }
              }
              // Softmax backward, then the scaled dot product.
              const double* qi = qd.data() + (b * s + i) * d + col;
              for (std::size_t r = 0; r < n; ++r) {
                const double ds = prow[r] * (dprob[r] - dot) * inv_scale;
                if (ds == 0.0) continue;
                const bool pre = r < p;
                const double* kr = pre ? pkd.data() + r * d + col
                                       : kd.data() + (b * s + (r - p)) * d + col;
                if (!gq.empty()) {
                  double* gqi = gq.data() + (b * s + i) * d + col;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kr[c];
                }
                auto& gkbuf = pre ? gpk : gk;
                if (!gkbuf.empty()) {
                  double* gkr = gkbuf.data() + (pre ? r * d : (b * s + (r - p)) * d) + col;
                  for (std::size_t c = 0; c < dh; ++c) gkr[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace pearl
