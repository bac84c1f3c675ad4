#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>

#include "patchpu/autodiff.hpp"
#include "patchpu/errors.hpp"

using namespace patchpu;

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor t(shape);
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

void put(ParameterStore& store, const std::string& path, Tensor value) {
  store.entries().insert_or_assign(path, parameter(std::move(value)));
}

}  // namespace

TEST_CASE("results do not depend on where tensors are allocated") {
  std::mt19937_64 rng(11);
  const Tensor a = random_tensor({7, 100}, rng);
  const Tensor b = random_tensor({9, 100}, rng);
  const Tensor ref_prod = ops::matmul(constant(a), constant(b), false, true).value();
  const double ref_sum = ops::sum(constant(a)).value().item();
  std::vector<std::unique_ptr<double[]>> hold;
  for (std::size_t shift = 1; shift <= 8; ++shift) {
    // Perturb the heap so the copies land at different addresses.
    hold.emplace_back(new double[shift]);
    const Tensor ca = a;
    const Tensor cb = b;
    CHECK(reinterpret_cast<std::uintptr_t>(ca.data()) % EIGEN_MAX_ALIGN_BYTES == 0);
    CHECK(ops::matmul(constant(ca), constant(cb), false, true).value().storage() == ref_prod.storage());
    CHECK(ops::sum(constant(ca)).value().item() == ref_sum);
  }
}

TEST_CASE("square has derivative 2x") {
  ParameterStore store;
  put(store, "x", Tensor::scalar(3.0));
  const Var& x = store.at("x");
  const auto grads = evaluate_with_gradients(ops::mul(x, x), store);
  CHECK(grads.at("x").item() == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("sum of softmax is constant so its gradient vanishes") {
  ParameterStore store;
  put(store, "x", Tensor(Shape{1, 5}, {0.3, -1.2, 2.0, 0.0, 0.7}));
  const auto grads = evaluate_with_gradients(ops::sum(ops::softmax_rows(store.at("x"))), store);
  for (double g : grads.at("x").storage()) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("unreached parameters get zero gradient") {
  ParameterStore store;
  put(store, "used", Tensor(Shape{3}, {1, 2, 3}));
  put(store, "unused", Tensor(Shape{2}, {4, 5}));
  const auto grads = evaluate_with_gradients(ops::sum(store.at("used")), store);
  CHECK(grads.at("unused").shape() == Shape{2});
  for (double g : grads.at("unused").storage()) CHECK(g == 0.0);
}

TEST_CASE("non-scalar root is a contract violation") {
  ParameterStore store;
  put(store, "x", Tensor(Shape{3}, {1, 2, 3}));
  CHECK_THROWS_AS(evaluate_with_gradients(store.at("x"), store), ContractError);
  CHECK_THROWS_AS(backward(ops::mul(store.at("x"), store.at("x"))), ContractError);
}

TEST_CASE("non-finite forward value names the op") {
  const Var x = parameter(Tensor(Shape{2}, {1.0, 0.0}));
  try {
    (void)ops::log(x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.op() == "log");
  }
}

TEST_CASE("random three-layer MLP matches central differences") {
  std::mt19937_64 rng(11);
  const Tensor input = random_tensor(Shape{4, 6}, rng);
  std::vector<Tensor> params{random_tensor(Shape{6, 8}, rng), random_tensor(Shape{8}, rng),
                             random_tensor(Shape{8, 5}, rng), random_tensor(Shape{5}, rng),
                             random_tensor(Shape{5, 1}, rng), random_tensor(Shape{1}, rng)};
  auto mlp = [&](const std::vector<Var>& p) {
    Var h = ops::gelu(ops::add_row_bias(ops::matmul(constant(input), p[0]), p[1]));
    h = ops::swish(ops::add_row_bias(ops::matmul(h, p[2]), p[3]));
    return ops::sum(ops::add_row_bias(ops::matmul(h, p[4]), p[5]));
  };
  const GradCheckReport r = gradient_check("mlp", mlp, params, 1e-5, 1e-4);
  CHECK(r.pass);
  CHECK(r.checked == 6 * 8 + 8 + 8 * 5 + 5 + 5 + 1);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("matmul 4x5 by 5x3 passes the finite-difference check") {
  const GradCheckReport r = finite_difference_check("matmul", Shape{4, 5}, 1e-5, 1e-4);
  CHECK(r.pass);
  CHECK(r.checked == 4 * 5 + 5 * 3);
}

TEST_CASE("gelu on a thousand random scalars passes") {
  const GradCheckReport r = finite_difference_check("gelu", Shape{1000}, 1e-5, 1e-4);
  CHECK(r.pass);
  CHECK(r.checked == 1000);
}

TEST_CASE("relu probed exactly at zero excludes the kink and passes on the rest") {
  const Tensor x(Shape{5}, {-1.0, 0.0, 0.5, 0.0, 2.0});
  auto fn = [](const std::vector<Var>& in) { return ops::sum(ops::relu(in[0])); };
  const GradCheckReport r = gradient_check("relu", fn, {x}, 1e-5, 1e-4);
  CHECK(r.excluded == 2);
  CHECK(r.checked == 3);
  CHECK(r.pass);
}

TEST_CASE("unknown op is a lookup error") {
  CHECK_THROWS_AS(finite_difference_check("no_such_op", {}, 1e-5, 1e-4), LookupError);
}

TEST_CASE("every registered op passes at a few random points") {
  for (const auto& op : registered_ops()) {
    CAPTURE(op.name);
    const GradCheckReport r = finite_difference_check(op.name, {}, 1e-5, 1e-4, 3, 5);
    CHECK(r.pass);
  }
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(3);
  ParameterStore store;
  put(store, "w", random_tensor(Shape{4, 3}, rng));
  const Tensor x = random_tensor(Shape{2, 4}, rng);
  const Var& w = store.at("w");
  auto loss1 = [&] { return ops::sum(ops::gelu(ops::matmul(constant(x), w))); };
  auto loss2 = [&] { return ops::sum(ops::exp(ops::affine(ops::matmul(constant(x), w), 0.3, 0.0))); };
  const double a = 1.7, b = -0.6;
  const Tensor g1 = evaluate_with_gradients(loss1(), store).at("w");
  const Tensor g2 = evaluate_with_gradients(loss2(), store).at("w");
  const Tensor gc =
      evaluate_with_gradients(ops::add(ops::affine(loss1(), a, 0.0), ops::affine(loss2(), b, 0.0)), store).at("w");
  for (std::size_t i = 0; i < gc.size(); ++i) CHECK(std::abs(gc[i] - (a * g1[i] + b * g2[i])) < 1e-10);
}

TEST_CASE("gradients of a shared input accumulate") {
  ParameterStore store;
  put(store, "x", Tensor(Shape{2}, {1.5, -2.0}));
  const Var& x = store.at("x");
  // d/dx (x + x*x) = 1 + 2x
  const auto g = evaluate_with_gradients(ops::sum(ops::add(x, ops::mul(x, x))), store).at("x");
  CHECK(g[0] == doctest::Approx(4.0));
  CHECK(g[1] == doctest::Approx(-3.0));
}

TEST_CASE("no-grad mode records no graph") {
  const Var x = parameter(Tensor(Shape{2}, {1, 2}));
  NoGradGuard guard;
  CHECK_FALSE(grad_enabled());
  const Var y = ops::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("detach blocks the gradient") {
  ParameterStore store;
  put(store, "x", Tensor(Shape{2}, {1, 2}));
  const Var& x = store.at("x");
  const auto g = evaluate_with_gradients(ops::sum(ops::mul(ops::detach(x), x)), store).at("x");
  CHECK(g[0] == doctest::Approx(1.0));
  CHECK(g[1] == doctest::Approx(2.0));
}

TEST_CASE("parameter initialization is a pure function of shape, path and seed") {
  ParameterStore a(42), b(42), c(43);
  for (auto* s : {&a, &b, &c}) {
    s->create("layer/weight", Shape{8, 4}, InitKind::VarianceScaling, 4);
    s->create("layer/bias", Shape{8}, InitKind::Zeros);
  }
  CHECK(a.at("layer/weight").value().storage() == b.at("layer/weight").value().storage());
  CHECK(a.at("layer/weight").value().storage() != c.at("layer/weight").value().storage());
  for (double v : a.at("layer/bias").value().storage()) CHECK(v == 0.0);

  // Creation order does not matter.
  ParameterStore d(42);
  d.create("layer/bias", Shape{8}, InitKind::Zeros);
  d.create("layer/weight", Shape{8, 4}, InitKind::VarianceScaling, 4);
  CHECK(d.at("layer/weight").value().storage() == a.at("layer/weight").value().storage());
}

TEST_CASE("variance scaling keeps unit fan-in variance and truncates at two sigma") {
  const std::size_t fan_in = 50;
  const Tensor t = variance_scaling_init(Shape{400, fan_in}, fan_in, "w", 9);
  double sum = 0.0, sq = 0.0, max_abs = 0.0;
  for (double v : t.storage()) {
    sum += v;
    sq += v * v;
    max_abs = std::max(max_abs, std::abs(v));
  }
  const double n = static_cast<double>(t.size());
  const double var = sq / n - (sum / n) * (sum / n);
  CHECK(var * fan_in == doctest::Approx(1.0).epsilon(0.03));
  const double sigma = std::sqrt(1.0 / fan_in) / 0.87962566103423978;
  CHECK(max_abs <= 2.0 * sigma + 1e-12);
}

TEST_CASE("parameter enumeration is lexicographic") {
  ParameterStore s;
  s.create("b/x", Shape{1}, InitKind::Zeros);
  s.create("a/y", Shape{1}, InitKind::Zeros);
  s.create("a/x", Shape{1}, InitKind::Zeros);
  CHECK(s.paths() == std::vector<std::string>{"a/x", "a/y", "b/x"});
}

TEST_CASE("softmax stays finite for large logits") {
  const Var x = constant(Tensor(Shape{1, 3}, {1000.0, 0.0, -1000.0}));
  const Tensor y = ops::softmax_rows(x).value();
  CHECK(y[0] == doctest::Approx(1.0));
  CHECK(y[1] >= 0.0);
}

TEST_CASE("conv2d matches a direct loop") {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor(Shape{2, 1, 5, 6}, rng);  // C N H W
  const Tensor w = random_tensor(Shape{3, 2, 3, 3}, rng);
  const Tensor y = ops::conv2d(constant(x), constant(w), 2, 1).value();
  REQUIRE(y.shape() == Shape{3, 1, 3, 3});
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t oy = 0; oy < 3; ++oy)
      for (std::size_t ox = 0; ox < 3; ++ox) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = static_cast<int>(oy) * 2 + ky - 1, ix = static_cast<int>(ox) * 2 + kx - 1;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              acc += x[(c * 5 + iy) * 6 + ix] * w[((o * 2 + c) * 3 + ky) * 3 + kx];
            }
        CHECK(y[(o * 3 + oy) * 3 + ox] == doctest::Approx(acc).epsilon(1e-12));
      }
}
