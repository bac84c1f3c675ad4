#include "patchpu/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <unordered_set>

#include "patchpu/errors.hpp"

namespace patchpu {

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor::zeros_like(node_->value);
  return node_->grad;
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return Var(std::move(node));
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->op = "parameter";
  return Var(std::move(node));
}

Var make_result(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) throw NumericError(op, "non-finite value in forward pass");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  const bool needs = g_grad_enabled && std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->backward = std::move(backward_fn);
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined() || root.value().size() != 1 || root.value().rank() != 0) {
    throw ContractError("backward requires a scalar (rank-0) root, got shape " +
                        (root.defined() ? shape_to_string(root.shape()) : std::string("<undefined>")));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    if (!node->grad.empty()) node->backward(*node);
    node->grad = Tensor();  // interior gradients are consumed exactly once
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Tensor variance_scaling_init(const Shape& shape, std::size_t fan_in, const std::string& path, std::uint64_t seed) {
  // Truncated at two standard deviations; the constant restores unit variance
  // of the truncated distribution.
  constexpr double kTruncationCorrection = 0.87962566103423978;
  const double stddev = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1))) / kTruncationCorrection;
  std::mt19937_64 rng(splitmix64(seed ^ fnv1a(path)));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(shape);
  for (double& v : t.values()) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = z * stddev;
  }
  return t;
}

Var& ParameterStore::create(const std::string& path, Shape shape, InitKind init, std::size_t fan_in) {
  if (params_.count(path)) throw ConfigError("duplicate parameter path '" + path + "'");
  Tensor value;
  switch (init) {
    case InitKind::VarianceScaling:
      value = variance_scaling_init(shape, fan_in, path, seed_);
      break;
    case InitKind::Zeros:
      value = Tensor(shape, 0.0);
      break;
    case InitKind::Ones:
      value = Tensor(shape, 1.0);
      break;
  }
  return params_.emplace(path, parameter(std::move(value))).first->second;
}

Var& ParameterStore::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw LookupError("unknown parameter '" + path + "'");
  return it->second;
}

const Var& ParameterStore::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw LookupError("unknown parameter '" + path + "'");
  return it->second;
}

void ParameterStore::set(const std::string& path, Tensor value) {
  Var& p = at(path);
  require_same_shape(p.value(), value, "ParameterStore::set");
  p.mutable_value() = std::move(value);
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += v.value().size();
  return n;
}

std::vector<std::string> ParameterStore::paths() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, _] : params_) out.push_back(k);
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& [_, v] : params_) v.zero_grad();
}

std::map<std::string, Tensor> evaluate_with_gradients(const Var& root, ParameterStore& params) {
  params.zero_grad();
  backward(root);
  std::map<std::string, Tensor> out;
  for (const auto& [path, v] : params.entries()) out.emplace(path, v.grad());
  return out;
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {
namespace {

void accumulate(Node& parent, const Tensor& delta) {
  if (!parent.requires_grad) return;
  Tensor& g = parent.grad_buffer();
  double* gp = g.data();
  const double* dp = delta.data();
  for (std::size_t i = 0, n = g.size(); i < n; ++i) gp[i] += dp[i];
}

bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

template <typename Fwd, typename Deriv>
Var unary(const char* name, const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  const double* xp = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xp[i]);
  return make_result(name, std::move(out), {x}, [deriv](Node& self) {
    Node& in = *self.parents[0];
    Tensor& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result("add", std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result("sub", std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (wants(self, 1)) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result("mul", std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var affine(const Var& x, double scale, double shift) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x.value()[i] + shift;
  return make_result("affine", std::move(out), {x}, [scale](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * self.grad[i];
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  require_rank(x.value(), 2, "add_row_bias");
  require_rank(bias.value(), 1, "add_row_bias bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.dim(0) != cols) throw ShapeError("add_row_bias: bias length does not match columns");
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bias.value()[c];
  return make_result("add_row_bias", std::move(out), {x, bias}, [rows, cols](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (wants(self, 1)) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
    }
  });
}

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  require_rank(a.value(), 2, "matmul lhs");
  require_rank(b.value(), 2, "matmul rhs");
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()) + ")");
  }
  Tensor out(Shape{m, n});
  auto A = a.value().matrix();
  auto B = b.value().matrix();
  auto C = out.matrix();
  if (!transpose_a && !transpose_b) C.noalias() = A * B;
  else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
  else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();

  return make_result("matmul", std::move(out), {a, b}, [transpose_a, transpose_b](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto G = self.grad.matrix();
    auto A = pa.value.matrix();
    auto B = pb.value.matrix();
    if (pa.requires_grad) {
      auto dA = pa.grad_buffer().matrix();
      if (!transpose_a && !transpose_b) dA.noalias() += G * B.transpose();
      else if (!transpose_a && transpose_b) dA.noalias() += G * B;
      else if (transpose_a && !transpose_b) dA.noalias() += B * G.transpose();
      else dA.noalias() += B.transpose() * G.transpose();
    }
    if (pb.requires_grad) {
      auto dB = pb.grad_buffer().matrix();
      if (!transpose_a && !transpose_b) dB.noalias() += A.transpose() * G;
      else if (transpose_a && !transpose_b) dB.noalias() += A * G;
      else if (!transpose_a && transpose_b) dB.noalias() += G.transpose() * A;
      else dB.noalias() += G.transpose() * A.transpose();
    }
  });
}

// --- convolution -----------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t channels, batch, height, width, kernel, stride, padding, out_h, out_w;

  std::size_t out_plane() const { return batch * out_h * out_w; }
};

ConvGeometry conv_geometry(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t padding,
                           const char* what) {
  require_rank(input, 4, what);
  if (stride == 0) throw ShapeError(std::string(what) + ": stride must be >= 1");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel, stride, padding, 0, 0};
  if (g.height + 2 * padding < kernel || g.width + 2 * padding < kernel) {
    throw ShapeError(std::string(what) + ": kernel larger than padded input " + shape_to_string(input.shape()));
  }
  g.out_h = (g.height + 2 * padding - kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - kernel) / stride + 1;
  return g;
}

// col[(c, ky, kx), (n, oy, ox)]
void im2col(const ConvGeometry& g, const double* in, double* col) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const double* src = in + (c * g.batch + n) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            double* dst = row + (n * g.out_h + oy) * g.out_w;
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
              std::fill(dst, dst + g.out_w, 0.0);
              continue;
            }
            const double* srow = src + static_cast<std::size_t>(iy) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
              dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? 0.0 : srow[ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* in) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        for (std::size_t n = 0; n < g.batch; ++n) {
          double* dst = in + (c * g.batch + n) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const double* src = row + (n * g.out_h + oy) * g.out_w;
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            double* drow = dst + static_cast<std::size_t>(iy) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) drow[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& input, const Var& weight, std::size_t stride, std::size_t padding) {
  require_rank(weight.value(), 4, "conv2d weight");
  const std::size_t out_channels = weight.dim(0);
  const std::size_t kernel = weight.dim(2);
  if (weight.dim(3) != kernel) throw ShapeError("conv2d: only square kernels are supported");
  const ConvGeometry g = conv_geometry(input.value(), kernel, stride, padding, "conv2d");
  if (weight.dim(1) != g.channels) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, got " +
                     std::to_string(g.channels));
  }
  const std::size_t patch = g.channels * kernel * kernel;
  const std::size_t plane = g.out_plane();

  // A 1x1 stride-1 unpadded convolution needs no column buffer.
  const bool pointwise = kernel == 1 && stride == 1 && padding == 0;
  Tensor col;
  if (!pointwise) {
    col = Tensor(Shape{patch, plane});
    im2col(g, input.value().data(), col.data());
  }
  const double* col_data = pointwise ? input.value().data() : col.data();

  Tensor out(Shape{out_channels, g.batch, g.out_h, g.out_w});
  ConstMatrixMap W(weight.value().data(), static_cast<Eigen::Index>(out_channels), static_cast<Eigen::Index>(patch));
  ConstMatrixMap X(col_data, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(plane));
  MatrixMap Y(out.data(), static_cast<Eigen::Index>(out_channels), static_cast<Eigen::Index>(plane));
  Y.noalias() = W * X;

  return make_result("conv2d", std::move(out), {input, weight},
                     [g, patch, plane, out_channels, pointwise, col = std::move(col)](Node& self) {
                       Node& in = *self.parents[0];
                       Node& w = *self.parents[1];
                       ConstMatrixMap G(self.grad.data(), static_cast<Eigen::Index>(out_channels),
                                        static_cast<Eigen::Index>(plane));
                       const double* col_data = pointwise ? in.value.data() : col.data();
                       ConstMatrixMap X(col_data, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(plane));
                       if (w.requires_grad) {
                         MatrixMap dW(w.grad_buffer().data(), static_cast<Eigen::Index>(out_channels),
                                      static_cast<Eigen::Index>(patch));
                         dW.noalias() += G * X.transpose();
                       }
                       if (in.requires_grad) {
                         ConstMatrixMap W(w.value.data(), static_cast<Eigen::Index>(out_channels),
                                          static_cast<Eigen::Index>(patch));
                         if (pointwise) {
                           MatrixMap dX(in.grad_buffer().data(), static_cast<Eigen::Index>(patch),
                                        static_cast<Eigen::Index>(plane));
                           dX.noalias() += W.transpose() * G;
                         } else {
                           RowMatrix dcol = W.transpose() * G;
                           col2im(g, dcol.data(), in.grad_buffer().data());
                         }
                       }
                     });
}

Var depthwise_conv2d(const Var& input, const Var& weight, std::size_t stride, std::size_t padding) {
  require_rank(weight.value(), 4, "depthwise_conv2d weight");
  const std::size_t kernel = weight.dim(2);
  const ConvGeometry g = conv_geometry(input.value(), kernel, stride, padding, "depthwise_conv2d");
  if (weight.dim(0) != g.channels || weight.dim(1) != 1 || weight.dim(3) != kernel) {
    throw ShapeError("depthwise_conv2d: weight must be [C, 1, k, k], got " + shape_to_string(weight.shape()));
  }
  Tensor out(Shape{g.channels, g.batch, g.out_h, g.out_w});
  const auto for_each_tap = [g](auto&& body) {
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t oy = 0; oy < g.out_h; ++oy)
          for (std::size_t ox = 0; ox < g.out_w; ++ox)
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                const std::size_t in_idx = ((c * g.batch + n) * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix);
                const std::size_t out_idx = ((c * g.batch + n) * g.out_h + oy) * g.out_w + ox;
                const std::size_t w_idx = (c * g.kernel + ky) * g.kernel + kx;
                body(in_idx, out_idx, w_idx);
              }
            }
  };
  const double* xp = input.value().data();
  const double* wp = weight.value().data();
  for_each_tap([&](std::size_t i, std::size_t o, std::size_t w) { out[o] += xp[i] * wp[w]; });
  return make_result("depthwise_conv2d", std::move(out), {input, weight}, [for_each_tap](Node& self) {
    Node& in = *self.parents[0];
    Node& w = *self.parents[1];
    double* dx = in.requires_grad ? in.grad_buffer().data() : nullptr;
    double* dw = w.requires_grad ? w.grad_buffer().data() : nullptr;
    const double* xp = in.value.data();
    const double* wp = w.value.data();
    const double* gp = self.grad.data();
    for_each_tap([&](std::size_t i, std::size_t o, std::size_t k) {
      if (dx) dx[i] += gp[o] * wp[k];
      if (dw) dw[k] += gp[o] * xp[i];
    });
  });
}

Var channel_affine(const Var& input, const Var& scale, const Var& bias) {
  require_rank(input.value(), 4, "channel_affine");
  const std::size_t channels = input.dim(0);
  const std::size_t plane = input.value().size() / std::max<std::size_t>(channels, 1);
  if (scale.value().size() != channels || bias.value().size() != channels) {
    throw ShapeError("channel_affine: scale/bias length must equal channel count");
  }
  Tensor out(input.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const double s = scale.value()[c], b = bias.value()[c];
    const double* x = input.value().data() + c * plane;
    double* y = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) y[i] = s * x[i] + b;
  }
  return make_result("channel_affine", std::move(out), {input, scale, bias}, [channels, plane](Node& self) {
    Node& in = *self.parents[0];
    Node& sc = *self.parents[1];
    Node& bi = *self.parents[2];
    for (std::size_t c = 0; c < channels; ++c) {
      const double* g = self.grad.data() + c * plane;
      const double* x = in.value.data() + c * plane;
      if (in.requires_grad) {
        double* dx = in.grad_buffer().data() + c * plane;
        const double s = sc.value[c];
        for (std::size_t i = 0; i < plane; ++i) dx[i] += s * g[i];
      }
      if (sc.requires_grad || bi.requires_grad) {
        double ds = 0.0, db = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          ds += g[i] * x[i];
          db += g[i];
        }
        if (sc.requires_grad) sc.grad_buffer()[c] += ds;
        if (bi.requires_grad) bi.grad_buffer()[c] += db;
      }
    }
  });
}

Var global_avg_pool(const Var& input) {
  require_rank(input.value(), 4, "global_avg_pool");
  const std::size_t channels = input.dim(0), batch = input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  Tensor out(Shape{batch, channels});
  const double inv = 1.0 / static_cast<double>(area);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < batch; ++n) {
      const double* x = input.value().data() + (c * batch + n) * area;
      double s = 0.0;
      for (std::size_t i = 0; i < area; ++i) s += x[i];
      out[n * channels + c] = s * inv;
    }
  return make_result("global_avg_pool", std::move(out), {input}, [channels, batch, area, inv](Node& self) {
    double* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t n = 0; n < batch; ++n) {
        const double g = self.grad[n * channels + c] * inv;
        double* d = dx + (c * batch + n) * area;
        for (std::size_t i = 0; i < area; ++i) d[i] += g;
      }
  });
}

Var channel_gate(const Var& input, const Var& gate) {
  require_rank(input.value(), 4, "channel_gate");
  require_rank(gate.value(), 2, "channel_gate gate");
  const std::size_t channels = input.dim(0), batch = input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  if (gate.dim(0) != batch || gate.dim(1) != channels) throw ShapeError("channel_gate: gate must be [N, C]");
  Tensor out(input.shape());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < batch; ++n) {
      const double s = gate.value()[n * channels + c];
      const std::size_t base = (c * batch + n) * area;
      for (std::size_t i = 0; i < area; ++i) out[base + i] = input.value()[base + i] * s;
    }
  return make_result("channel_gate", std::move(out), {input, gate}, [channels, batch, area](Node& self) {
    Node& in = *self.parents[0];
    Node& gt = *self.parents[1];
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t base = (c * batch + n) * area;
        const double s = gt.value[n * channels + c];
        if (in.requires_grad) {
          double* dx = in.grad_buffer().data() + base;
          for (std::size_t i = 0; i < area; ++i) dx[i] += self.grad[base + i] * s;
        }
        if (gt.requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < area; ++i) acc += self.grad[base + i] * in.value[base + i];
          gt.grad_buffer()[n * channels + c] += acc;
        }
      }
  });
}

// --- softmax ------------------------------------------------------------------

Var softmax_rows(const Var& x) {
  require_rank(x.value(), 2, "softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (cols == 0) throw ShapeError("softmax_rows: empty rows");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data() + r * cols;
    double* yr = out.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (yr[c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  return make_result("softmax_rows", std::move(out), {x}, [rows, cols](Node& self) {
    double* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

Var log_softmax_rows(const Var& x) {
  require_rank(x.value(), 2, "log_softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (cols == 0) throw ShapeError("log_softmax_rows: empty rows");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data() + r * cols;
    double* yr = out.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lz;
  }
  return make_result("log_softmax_rows", std::move(out), {x}, [rows, cols](Node& self) {
    double* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += g[c];
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += g[c] - std::exp(y[c]) * total;
    }
  });
}

// --- elementwise ----------------------------------------------------------------

Var gelu(const Var& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v); });
}

namespace {

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

ConstArrayMap as_array(const Tensor& t) { return {t.data(), static_cast<Eigen::Index>(t.size())}; }
ArrayMap as_array(Tensor& t) { return {t.data(), static_cast<Eigen::Index>(t.size())}; }

/// 1 / (1 + exp(-v)), vectorized; saturates cleanly to 0 and 1.
Tensor logistic(const Tensor& x) {
  Tensor s(x.shape());
  as_array(s) = (1.0 + (-as_array(x)).exp()).inverse();
  return s;
}

}  // namespace

Var swish(const Var& x) {
  Tensor s = logistic(x.value());
  Tensor out(x.shape());
  as_array(out) = as_array(x.value()) * as_array(s);
  return make_result("swish", std::move(out), {x}, [s = std::move(s)](Node& self) {
    Node& in = *self.parents[0];
    const auto sig = as_array(s);
    as_array(in.grad_buffer()) += as_array(self.grad) * (sig + as_array(in.value) * sig * (1.0 - sig));
  });
}

Var sigmoid(const Var& x) {
  return make_result("sigmoid", logistic(x.value()), {x}, [](Node& self) {
    Node& in = *self.parents[0];
    const auto y = as_array(self.value);
    as_array(in.grad_buffer()) += as_array(self.grad) * y * (1.0 - y);
  });
}

Var exp(const Var& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var relu(const Var& x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var thresholded_relu(const Var& x, double theta) {
  return unary(
      "thresholded_relu", x, [theta](double v) { return v > theta ? v : 0.0; },
      [theta](double v, double) { return v > theta ? 1.0 : 0.0; });
}

Var clamp(const Var& x, double lo, double hi) {
  return unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// --- reductions -----------------------------------------------------------------

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result("sum", Tensor::scalar(s), {x}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double d = self.grad[0];
    for (double& v : g.values()) v += d;
  });
}

Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result("mean", Tensor::scalar(s / static_cast<double>(n)), {x}, [n](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double d = self.grad[0] / static_cast<double>(n);
    for (double& v : g.values()) v += d;
  });
}

Var max(const Var& x) {
  if (x.value().empty()) throw ShapeError("max of empty tensor");
  const auto vals = x.value().values();
  const std::size_t arg = static_cast<std::size_t>(std::max_element(vals.begin(), vals.end()) - vals.begin());
  return make_result("max", Tensor::scalar(vals[arg]), {x},
                     [arg](Node& self) { self.parents[0]->grad_buffer()[arg] += self.grad[0]; });
}

Var row_sum(const Var& x) {
  require_rank(x.value(), 2, "row_sum");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x.value()[r * cols + c];
    out[r] = s;
  }
  return make_result("row_sum", std::move(out), {x}, [rows, cols](Node& self) {
    double* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += self.grad[r];
  });
}

Var masked_row_max(const Var& x, const std::vector<double>& mask) {
  require_rank(x.value(), 2, "masked_row_max");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (mask.size() != cols) throw ShapeError("masked_row_max: mask length must equal column count");
  Tensor out(Shape{rows});
  std::vector<std::ptrdiff_t> arg(rows, -1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask[c] == 0.0) continue;
      const double v = x.value()[r * cols + c];
      if (arg[r] < 0 || v > out[r]) {
        out[r] = v;
        arg[r] = static_cast<std::ptrdiff_t>(c);
      }
    }
  }
  return make_result("masked_row_max", std::move(out), {x}, [cols, arg = std::move(arg)](Node& self) {
    double* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < arg.size(); ++r)
      if (arg[r] >= 0) dx[r * cols + static_cast<std::size_t>(arg[r])] += self.grad[r];
  });
}

Var cosine_similarity_matrix(const Var& x, std::size_t* degenerate_rows) {
  require_rank(x.value(), 2, "cosine_similarity_matrix");
  const std::size_t n = x.dim(0);
  const auto X = x.value().matrix();
  const RowMatrix gram = X * X.transpose();
  std::vector<double> norm(n);
  std::size_t degenerate = 0;
  for (std::size_t i = 0; i < n; ++i) {
    norm[i] = std::sqrt(gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)));
    if (norm[i] == 0.0) ++degenerate;
  }
  if (degenerate_rows) *degenerate_rows = degenerate;
  Tensor out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (norm[i] == 0.0 || norm[j] == 0.0) continue;
      const double g = gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      // sqrt of the product keeps identical rows at exactly 1.
      const double denom = std::sqrt(gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) *
                                     gram(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)));
      out[i * n + j] = std::clamp(g / denom, -1.0, 1.0);
    }
  return make_result("cosine_similarity_matrix", std::move(out), {x}, [n, norm = std::move(norm)](Node& self) {
    Node& in = *self.parents[0];
    const auto X = in.value.matrix();
    const std::size_t f = in.value.dim(1);
    RowMatrix U = RowMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
    for (std::size_t i = 0; i < n; ++i)
      if (norm[i] > 0.0) U.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(i)) / norm[i];
    const auto G = self.grad.matrix();
    const RowMatrix dU = (G + G.transpose()) * U;
    auto dX = in.grad_buffer().matrix();
    for (std::size_t i = 0; i < n; ++i) {
      if (norm[i] == 0.0) continue;
      const auto ii = static_cast<Eigen::Index>(i);
      const double proj = dU.row(ii).dot(U.row(ii));
      dX.row(ii) += (dU.row(ii) - proj * U.row(ii)) / norm[i];
    }
  });
}

// --- shape ops ----------------------------------------------------------------

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  if (x.value().rank() == 0 || begin + count > x.dim(0)) throw ShapeError("slice_rows: range out of bounds");
  Shape shape = x.shape();
  const std::size_t row = x.value().size() / x.dim(0);
  shape[0] = count;
  Tensor out(shape);
  std::copy_n(x.value().data() + begin * row, count * row, out.data());
  return make_result("slice_rows", std::move(out), {x}, [begin, row](Node& self) {
    double* dx = self.parents[0]->grad_buffer().data() + begin * row;
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw ShapeError("concat_rows: scalars cannot be concatenated");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    Shape tail = p.shape();
    if (tail.size() != shape.size() || !std::equal(tail.begin() + 1, tail.end(), shape.begin() + 1)) {
      throw ShapeError("concat_rows: trailing dimensions differ");
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    std::copy_n(p.value().data(), p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  return make_result("concat_rows", std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
    }
  });
}

Var diagonal(const Var& x) {
  require_rank(x.value(), 2, "diagonal");
  const std::size_t n = std::min(x.dim(0), x.dim(1)), cols = x.dim(1);
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i * cols + i];
  return make_result("diagonal", std::move(out), {x}, [n, cols](Node& self) {
    double* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < n; ++i) dx[i * cols + i] += self.grad[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result("reshape", std::move(out), {x}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var to_channel_major(const Var& x) {
  require_rank(x.value(), 4, "to_channel_major");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor out(Shape{c, n, h, w});
  const double* src = x.value().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t k = 0; k < c; ++k) out[((k * n + b) * h + y) * w + xx] = src[((b * h + y) * w + xx) * c + k];
  return make_result("to_channel_major", std::move(out), {x}, [n, h, w, c](Node& self) {
    double* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          for (std::size_t k = 0; k < c; ++k)
            dx[((b * h + y) * w + xx) * c + k] += self.grad[((k * n + b) * h + y) * w + xx];
  });
}

Var detach(const Var& x) { return constant(x.value()); }

}  // namespace ops
}  // namespace patchpu
