#include <algorithm>
#include <cmath>
#include <random>

#include "patchpu/autodiff.hpp"
#include "patchpu/errors.hpp"

namespace patchpu {

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor random_normal(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

RegisteredOp unary_op(std::string name, Shape shape, std::function<Var(const Var&)> f, double lo = -2.0,
                      double hi = 2.0) {
  return RegisteredOp{std::move(name), std::move(shape),
                      [lo, hi](const Shape& s, std::uint64_t seed) {
                        std::mt19937_64 rng(seed);
                        return std::vector<Tensor>{random_tensor(s, rng, lo, hi)};
                      },
                      [f = std::move(f)](const std::vector<Var>& in) { return f(in[0]); }};
}

std::vector<RegisteredOp> build_registry() {
  std::vector<RegisteredOp> ops;
  using V = std::vector<Var>;

  const auto same_shape_pair = [](const Shape& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return std::vector<Tensor>{random_normal(s, rng), random_normal(s, rng)};
  };
  ops.push_back({"add", {3, 4}, same_shape_pair, [](const V& in) { return ops::add(in[0], in[1]); }});
  ops.push_back({"sub", {3, 4}, same_shape_pair, [](const V& in) { return ops::sub(in[0], in[1]); }});
  ops.push_back({"mul", {3, 4}, same_shape_pair, [](const V& in) { return ops::mul(in[0], in[1]); }});
  ops.push_back(unary_op("affine", {3, 4}, [](const Var& x) { return ops::affine(x, -1.5, 0.25); }));
  ops.push_back({"add_row_bias", {4, 5},
                 [](const Shape& s, std::uint64_t seed) {
                   std::mt19937_64 rng(seed);
                   return std::vector<Tensor>{random_normal(s, rng), random_normal(Shape{s.at(1)}, rng)};
                 },
                 [](const V& in) { return ops::add_row_bias(in[0], in[1]); }});
  // Primary shape is the lhs [m x k]; the rhs is [k x 3].
  ops.push_back({"matmul", {4, 5},
                 [](const Shape& s, std::uint64_t seed) {
                   std::mt19937_64 rng(seed);
                   return std::vector<Tensor>{random_normal(s, rng), random_normal(Shape{s.at(1), 3}, rng)};
                 },
                 [](const V& in) { return ops::matmul(in[0], in[1]); }});
  ops.push_back({"matmul_transposed", {5, 4},
                 [](const Shape& s, std::uint64_t seed) {
                   std::mt19937_64 rng(seed);
                   return std::vector<Tensor>{random_normal(s, rng), random_normal(Shape{3, s.at(0)}, rng)};
                 },
                 [](const V& in) { return ops::matmul(in[0], in[1], true, true); }});
  // Primary shape is the [C, N, H, W] input; 3 output channels, 3x3 kernel.
  ops.push_back({"conv2d", {2, 2, 5, 5},
                 [](const Shape& s, std::uint64_t seed) {
                   std::mt19937_64 rng(seed);
                   return std::vector<Tensor>{random_normal(s, rng), random_normal(Shape{3, s.at(0), 3, 3}, rng, 0.5)};
                 },
                 [](const V& in) { return ops::conv2d(in[0], in[1], 2, 1); }});
  ops.push_back({"conv2d_pointwise", {3, 2, 3, 3},
                 [](const Shape& s, std::uint64_t seed) {
                   std::mt19937_64 rng(seed);
                   return std::vector<Tensor>{random_normal(s, rng), random_normal(Shape{2, s.at(0), 1, 1}, rng)};
                 },
                 [](const V& in) { return ops::conv2d(in[0], in[1], 1, 0); }});
  ops.push_back({"depthwise_conv2d", {2, 2, 5, 5},
                 [](const Shape& s, std::uint64_t seed) {
                   std::mt19937_64 rng(seed);
                   return std::vector<Tensor>{random_normal(s, rng), random_normal(Shape{s.at(0), 1, 3, 3}, rng, 0.5)};
                 },
                 [](const V& in) { return ops::depthwise_conv2d(in[0], in[1], 2, 1); }});
  ops.push_back({"channel_affine", {3, 2, 2, 2},
                 [](const Shape& s, std::uint64_t seed) {
                   std::mt19937_64 rng(seed);
                   return std::vector<Tensor>{random_normal(s, rng), random_normal(Shape{s.at(0)}, rng),
                                              random_normal(Shape{s.at(0)}, rng)};
                 },
                 [](const V& in) { return ops::channel_affine(in[0], in[1], in[2]); }});
  ops.push_back(unary_op("global_avg_pool", {3, 2, 3, 3}, [](const Var& x) { return ops::global_avg_pool(x); }));
  ops.push_back({"channel_gate", {3, 2, 2, 2},
                 [](const Shape& s, std::uint64_t seed) {
                   std::mt19937_64 rng(seed);
                   return std::vector<Tensor>{random_normal(s, rng), random_normal(Shape{s.at(1), s.at(0)}, rng)};
                 },
                 [](const V& in) { return ops::channel_gate(in[0], in[1]); }});
  ops.push_back(unary_op("softmax_rows", {3, 5}, [](const Var& x) { return ops::softmax_rows(x); }, -3.0, 3.0));
  ops.push_back(unary_op("log_softmax_rows", {3, 5}, [](const Var& x) { return ops::log_softmax_rows(x); }, -3.0, 3.0));
  ops.push_back(unary_op("gelu", {20}, [](const Var& x) { return ops::gelu(x); }, -4.0, 4.0));
  ops.push_back(unary_op("swish", {20}, [](const Var& x) { return ops::swish(x); }, -4.0, 4.0));
  ops.push_back(unary_op("sigmoid", {20}, [](const Var& x) { return ops::sigmoid(x); }, -4.0, 4.0));
  ops.push_back(unary_op("exp", {20}, [](const Var& x) { return ops::exp(x); }));
  ops.push_back(unary_op("log", {20}, [](const Var& x) { return ops::log(x); }, 0.05, 3.0));
  ops.push_back(unary_op("relu", {20}, [](const Var& x) { return ops::relu(x); }));
  ops.push_back(unary_op("thresholded_relu", {20}, [](const Var& x) { return ops::thresholded_relu(x, 0.3); }));
  ops.push_back(unary_op("clamp", {20}, [](const Var& x) { return ops::clamp(x, -0.5, 0.5); }));
  ops.push_back(unary_op("sum", {3, 4}, [](const Var& x) { return ops::sum(x); }));
  ops.push_back(unary_op("mean", {3, 4}, [](const Var& x) { return ops::mean(x); }));
  ops.push_back(unary_op("max", {3, 4}, [](const Var& x) { return ops::max(x); }));
  ops.push_back(unary_op("row_sum", {3, 4}, [](const Var& x) { return ops::row_sum(x); }));
  ops.push_back(unary_op("masked_row_max", {4, 4}, [](const Var& x) {
    return ops::masked_row_max(x, std::vector<double>{1.0, 0.0, 1.0, 1.0});
  }));
  ops.push_back(unary_op("cosine_similarity_matrix", {4, 6}, [](const Var& x) {
    return ops::cosine_similarity_matrix(x);
  }));
  ops.push_back(unary_op("slice_rows", {5, 3}, [](const Var& x) { return ops::slice_rows(x, 1, 3); }));
  ops.push_back({"concat_rows", {2, 3}, same_shape_pair, [](const V& in) { return ops::concat_rows({in[0], in[1]}); }});
  ops.push_back(unary_op("diagonal", {4, 4}, [](const Var& x) { return ops::diagonal(x); }));
  ops.push_back(unary_op("reshape", {3, 4}, [](const Var& x) { return ops::reshape(x, Shape{2, 6}); }));
  ops.push_back(unary_op("to_channel_major", {2, 3, 3, 2}, [](const Var& x) { return ops::to_channel_major(x); }));
  return ops;
}

// Forward-only evaluation of a scalar function.
double evaluate(const std::function<Var(const std::vector<Var>&)>& fn, const std::vector<Tensor>& inputs) {
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(constant(t));
  return fn(vars).value().item();
}

}  // namespace

const std::vector<RegisteredOp>& registered_ops() {
  static const std::vector<RegisteredOp> registry = build_registry();
  return registry;
}

const RegisteredOp& find_registered_op(const std::string& name) {
  for (const auto& op : registered_ops())
    if (op.name == name) return op;
  throw LookupError("no registered op named '" + name + "'");
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport gradient_check(const std::string& label, const std::function<Var(const std::vector<Var>&)>& fn,
                               std::vector<Tensor> inputs, double eps, double tolerance) {
  if (!(eps > 0.0)) throw ContractError("gradient_check: eps must be positive");
  GradCheckReport report;
  report.op = label;

  std::vector<Var> params;
  for (const auto& t : inputs) params.push_back(parameter(t));
  Var out = fn(params);
  backward(out);
  const double f0 = out.value().item();

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = params[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + eps;
      const double fp = evaluate(fn, inputs);
      inputs[k][i] = saved - eps;
      const double fm = evaluate(fn, inputs);
      inputs[k][i] = saved;

      // One-sided slopes that disagree mark a kink (ReLU at 0, max ties,
      // clamp bounds); such sample coordinates are excluded.
      const double forward = (fp - f0) / eps;
      const double backward_slope = (f0 - fm) / eps;
      if (std::abs(forward - backward_slope) > 0.1 * std::max({std::abs(forward), std::abs(backward_slope), 1e-3})) {
        ++report.excluded;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      report.max_rel_err = std::max(report.max_rel_err, relative_error(analytic[i], numeric));
      ++report.checked;
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

GradCheckReport finite_difference_check(const std::string& op_name, const Shape& input_shape, double eps,
                                        double tolerance, std::size_t points, std::uint64_t seed) {
  return finite_difference_check(find_registered_op(op_name), input_shape, eps, tolerance, points, seed);
}

GradCheckReport finite_difference_check(const RegisteredOp& op, const Shape& input_shape, double eps,
                                        double tolerance, std::size_t points, std::uint64_t seed) {
  const std::string& op_name = op.name;
  const Shape shape = input_shape.empty() ? op.default_shape : input_shape;

  GradCheckReport total;
  total.op = op_name;
  for (std::size_t p = 0; p < points; ++p) {
    const std::uint64_t point_seed = seed * 1000003ULL + p;
    std::vector<Tensor> inputs = op.make_inputs(shape, point_seed);
    // Contract the op output with a fixed random cotangent to get a scalar.
    const Shape out_shape = [&] {
      std::vector<Var> probe;
      for (const auto& t : inputs) probe.push_back(constant(t));
      return op.apply(probe).shape();
    }();
    std::mt19937_64 rng(point_seed ^ 0x5bd1e995ULL);
    const Var cotangent = constant(random_tensor(out_shape, rng, 0.5, 1.5));
    auto scalar_fn = [&op, &cotangent](const std::vector<Var>& in) {
      return ops::sum(ops::mul(op.apply(in), cotangent));
    };
    const GradCheckReport r = gradient_check(op_name, scalar_fn, std::move(inputs), eps, tolerance);
    total.max_rel_err = std::max(total.max_rel_err, r.max_rel_err);
    total.checked += r.checked;
    total.excluded += r.excluded;
  }
  total.pass = total.max_rel_err < tolerance && total.checked > 0;
  return total;
}

}  // namespace patchpu
