#pragma once

// Dense row-major f64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap shared handle. Ops on tensors that require grad record
// a node in the graph (unless a NoGradGuard is active on this thread);
// Tensor::backward() on a scalar walks the graph in reverse topological
// order and accumulates into the .grad of every leaf that requires grad.
// Intermediate gradients live only for the duration of backward().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pearl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Access;
}  // namespace detail

// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  // Undefined handle; most ops reject it. Used for "no prefix" etc.
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor eye(std::size_t n);
  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access. Only valid on tensors not produced by a taped op;
  // used by optimizers and loaders.
  std::span<double> mutable_data();

  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Fresh leaf holding a copy of the data; never attached to any graph.
  Tensor detach() const;
  // Deep copy preserving requires_grad (as a new leaf).
  Tensor clone() const;

  // Populates .grad of every requires_grad leaf reachable from this scalar.
  void backward() const;

  // Identity of the underlying storage; equal for handles to one tensor.
  const void* id() const { return impl_.get(); }

  bool bitwise_equal(const Tensor& other) const;

 private:
  friend struct detail::Access;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---- taped ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a[m x n] + bias[n], bias broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);
// a[m x n] + b[r x n] with m a multiple of r; b is tiled down the rows.
Tensor add_tiled(const Tensor& a, const Tensor& b);
// Concatenation / slicing along axis 0.
Tensor concat(const std::vector<Tensor>& parts);
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softmax(const Tensor& x, std::size_t axis);
// Normalizes over the last axis, then applies gain[n] and shift[n].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                  double eps = 1e-5);
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor mean_abs_error(const Tensor& a, const Tensor& b);

// Multi-head scaled dot-product attention over a batch of sequences.
//
// q, k, v are [batch*seq x d] with each sample's rows contiguous. When
// prefix_k/prefix_v are defined ([p x d], shared across the batch) their
// rows are placed in front of every sample's keys/values, so each query
// attends over p + seq positions. Heads split the d columns evenly.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Tensor& prefix_k, const Tensor& prefix_v,
                 std::size_t batch, std::size_t heads);

}  // namespace pearl
