#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Var is a shared handle to a graph node holding a forward value, a gradient
// accumulator of the same shape and the closure that pushes the node's
// gradient to its parents. Nodes that depend on no trainable input record
// nothing, so inference builds no graph at all.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "patchpu/tensor.hpp"

namespace patchpu {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  const char* op = "leaf";

  /// Gradient buffer, allocated with zeros on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }

  /// Gradient accumulated by the last backward pass; zeros if unreached.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, ops on the current thread record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

Var constant(Tensor value);
Var parameter(Tensor value);

/// Runs the backward pass from a scalar root. Throws ContractError if the
/// root is not a scalar.
void backward(const Var& root);

/// Builds the result node of an op: checks the forward value is finite and
/// records the backward closure only when some parent requires gradients.
Var make_result(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// ---------------------------------------------------------------------------
// Parameters

enum class InitKind { VarianceScaling, Zeros, Ones };

/// Named learnable tensors, enumerated in lexicographic path order.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t rng_seed = 0) : seed_(rng_seed) {}

  /// Creates a parameter whose initial value is a pure function of
  /// (shape, path, seed). fan_in is used by variance scaling.
  Var& create(const std::string& path, Shape shape, InitKind init, std::size_t fan_in = 1);

  Var& at(const std::string& path);
  const Var& at(const std::string& path) const;
  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  void set(const std::string& path, Tensor value);

  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_elements() const;

  std::vector<std::string> paths() const;
  std::map<std::string, Var>& entries() { return params_; }
  const std::map<std::string, Var>& entries() const { return params_; }

  void zero_grad();

 private:
  std::uint64_t seed_;
  std::map<std::string, Var> params_;
};

/// Unit-variance scaling initializer (fan-in mode, truncated normal).
Tensor variance_scaling_init(const Shape& shape, std::size_t fan_in, const std::string& path, std::uint64_t seed);

/// dL/dp for every parameter; parameters the root does not reach get zeros.
std::map<std::string, Tensor> evaluate_with_gradients(const Var& root, ParameterStore& params);

// ---------------------------------------------------------------------------
// Ops. Layout conventions: matrices are [rows x cols]; feature maps are
// channel-major [C, N, H, W] so a convolution over a batch is one GEMM.

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// scale * x + shift, elementwise.
Var affine(const Var& x, double scale, double shift);
/// X[n x k] + b[k] broadcast over rows.
Var add_row_bias(const Var& x, const Var& bias);

Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);

Var conv2d(const Var& input, const Var& weight, std::size_t stride, std::size_t padding);
Var depthwise_conv2d(const Var& input, const Var& weight, std::size_t stride, std::size_t padding);
/// Per-channel scale and bias on a [C, N, H, W] map.
Var channel_affine(const Var& input, const Var& scale, const Var& bias);
/// [C, N, H, W] -> [N, C].
Var global_avg_pool(const Var& input);
/// Multiplies every (c, n) plane of [C, N, H, W] by gate[n, c].
Var channel_gate(const Var& input, const Var& gate);

Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);

Var gelu(const Var& x);
Var swish(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var relu(const Var& x);
/// x if x > theta else 0.
Var thresholded_relu(const Var& x, double theta);
Var clamp(const Var& x, double lo, double hi);

Var sum(const Var& x);
Var mean(const Var& x);
Var max(const Var& x);
/// [n x k] -> [n].
Var row_sum(const Var& x);
/// [n x k] -> [n]; max over the columns where mask[j] != 0, 0 if none.
Var masked_row_max(const Var& x, const std::vector<double>& mask);

/// Pairwise cosine similarities of the rows of X[n x F] -> [n x n]. Rows with
/// zero norm get similarity 0 and are counted in *degenerate_rows.
Var cosine_similarity_matrix(const Var& x, std::size_t* degenerate_rows = nullptr);

Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
Var diagonal(const Var& x);
Var reshape(const Var& x, Shape shape);
/// Interleaved [N, H, W, C] to channel-major [C, N, H, W].
Var to_channel_major(const Var& x);
Var detach(const Var& x);

}  // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference verification of registered ops.

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // non-differentiable sample coordinates
  bool pass = false;
};

struct RegisteredOp {
  std::string name;
  Shape default_shape;
  /// Builds all inputs from the primary input shape.
  std::function<std::vector<Tensor>(const Shape&, std::uint64_t seed)> make_inputs;
  std::function<Var(const std::vector<Var>&)> apply;
};

const std::vector<RegisteredOp>& registered_ops();
const RegisteredOp& find_registered_op(const std::string& name);

/// Relative error used by every gradient check: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central-difference check of a scalar function of several inputs.
GradCheckReport gradient_check(const std::string& label,
                               const std::function<Var(const std::vector<Var>&)>& fn,
                               std::vector<Tensor> inputs, double eps, double tolerance);

/// Draws `points` random inputs of `input_shape` (empty = op default) and
/// checks the op's gradient contracted with a fixed random cotangent.
GradCheckReport finite_difference_check(const std::string& op, const Shape& input_shape, double eps,
                                        double tolerance, std::size_t points = 1, std::uint64_t seed = 1);
GradCheckReport finite_difference_check(const RegisteredOp& op, const Shape& input_shape, double eps,
                                        double tolerance, std::size_t points = 1, std::uint64_t seed = 1);

}  // namespace patchpu
