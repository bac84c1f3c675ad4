#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "patchpu/errors.hpp"
#include "patchpu/losses.hpp"

using namespace patchpu;

namespace {

using Vec = std::vector<double>;
constexpr double kEps = 1e-12;

// Brute-force scalar oracles, written independently of the library.
double clamp_log(double p) { return std::log(std::min(std::max(p, kEps), 1.0 - kEps)); }

double ce_oracle(const Vec& z, const Vec& y) {
  double s = 0.0;
  for (std::size_t l = 0; l < z.size(); ++l) s -= z[l] * clamp_log(y[l]);
  return s;
}

double bce_oracle(const Vec& zp, const Vec& zn, const Vec& y) {
  double s = ce_oracle(zp, y);
  for (std::size_t l = 0; l < y.size(); ++l) s -= zn[l] * clamp_log(1.0 - y[l]);
  return s;
}

double an_oracle(const Vec& zp, const Vec& y, double lambda) {
  double s = ce_oracle(zp, y);
  for (std::size_t l = 0; l < y.size(); ++l) s -= lambda * (1.0 - zp[l]) * clamp_log(1.0 - y[l]);
  return s;
}

double epr_oracle(const Vec& zp, const Vec& y, double k, double lambda) {
  double total = 0.0;
  for (double v : y) total += v;
  return ce_oracle(zp, y) + lambda * (total - k) * (total - k);
}

Vec random_probs(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 0.99);
  Vec v(n);
  for (double& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("ce: perfect prediction, ln 2, empty support") {
  CHECK(ce_loss(Vec{1, 0}, Vec{1 - kEps, 0.3}) < 1e-11);
  CHECK(std::abs(ce_loss(Vec{1, 0}, Vec{0.5, 0.9}) - std::log(2.0)) < 1e-9);
  CHECK(std::abs(ce_loss(Vec{1, 0}, Vec{0.5, 0.9}) - ce_oracle({1, 0}, {0.5, 0.9})) < 1e-9);
  CHECK(ce_loss(Vec{0, 0}, Vec{0.2, 0.9}) == 0.0);
}

TEST_CASE("bce: perfect prediction and 2 ln 2") {
  CHECK(bce_loss(Vec{1, 0}, Vec{0, 1}, Vec{1 - kEps, kEps}) < 1e-11);
  const double v = bce_loss(Vec{1, 0}, Vec{0, 1}, Vec{0.5, 0.5});
  CHECK(std::abs(v - 2.0 * std::log(2.0)) < 1e-9);
  CHECK(std::abs(v - bce_oracle({1, 0}, {0, 1}, {0.5, 0.5})) < 1e-9);
  CHECK(v == doctest::Approx(1.386294).epsilon(1e-6));
}

TEST_CASE("bce with zero negatives is ce exactly") {
  std::mt19937_64 rng(1);
  const Vec y = random_probs(5, rng);
  CHECK(bce_loss(Vec{0, 1, 0, 0, 1}, Vec(5, 0.0), y) == ce_loss(Vec{0, 1, 0, 0, 1}, y));
}

TEST_CASE("bce rejects a label that is both positive and negative") {
  CHECK_THROWS_AS(bce_loss(Vec{1, 0}, Vec{1, 1}, Vec{0.5, 0.5}), ContractError);
}

TEST_CASE("an: lambda 0 is ce, 3 ln 2 example, and equals bce with z- = 1 - z+") {
  std::mt19937_64 rng(2);
  const Vec y = random_probs(4, rng);
  const Vec z{0, 0, 1, 0};
  CHECK(an_loss(z, y, 0.0) == ce_loss(z, y));
  const double v = an_loss(Vec{1, 0, 0}, Vec{0.5, 0.5, 0.5}, 1.0);
  CHECK(std::abs(v - 3.0 * std::log(2.0)) < 1e-9);
  CHECK(std::abs(v - an_oracle({1, 0, 0}, {0.5, 0.5, 0.5}, 1.0)) < 1e-9);
  CHECK(v == doctest::Approx(2.079442).epsilon(1e-6));
  CHECK(an_loss(z, y, 1.0) == bce_loss(z, Vec{1, 1, 0, 1}, y));
}

TEST_CASE("an rejects negative lambda") {
  CHECK_THROWS_AS(an_loss(Vec{1, 0}, Vec{0.5, 0.5}, -0.1), ConfigError);
}

TEST_CASE("epr: zero residual is ce, 0.837547 example, symmetric penalty") {
  CHECK(epr_loss(Vec{1, 0}, Vec{0.6, 0.78}, 1.38) == doctest::Approx(ce_loss(Vec{1, 0}, Vec{0.6, 0.78})).epsilon(1e-14));
  const double v = epr_loss(Vec{1, 0}, Vec{0.5, 0.5}, 1.38);
  CHECK(std::abs(v - epr_oracle({1, 0}, {0.5, 0.5}, 1.38, 1.0)) < 1e-9);
  CHECK(std::abs(v - 0.837547) < 1e-6);
  const double over = epr_loss(Vec{0, 0}, Vec{0.7, 0.8}, 1.2);   // residual +0.3
  const double under = epr_loss(Vec{0, 0}, Vec{0.4, 0.5}, 1.2);  // residual -0.3
  CHECK(over == doctest::Approx(under).epsilon(1e-12));
}

TEST_CASE("wn: 1.039721 example and identities") {
  const double v = wn_loss(Vec{1, 0}, Vec{0, 0.5}, Vec{0.5, 0.5});
  CHECK(std::abs(v - 1.5 * std::log(2.0)) < 1e-9);
  CHECK(std::abs(v - 1.039721) < 1e-6);
  std::mt19937_64 rng(6);
  const Vec y = random_probs(4, rng);
  const Vec z{0, 1, 0, 0};
  CHECK(wn_loss(z, Vec(4, 0.0), y) == ce_loss(z, y));
  CHECK(wn_loss(z, Vec{1, 0, 1, 1}, y) == an_loss(z, y, 1.0));
}

TEST_CASE("losses reject shape mismatches") {
  CHECK_THROWS_AS(ce_loss(Vec{1, 0, 0}, Vec{0.5, 0.5}), ShapeError);
  CHECK_THROWS_AS(wn_loss(Vec{1, 0}, Vec{0, 0.5, 0}, Vec{0.5, 0.5}), ShapeError);
}

TEST_CASE("all losses are non-negative on random inputs") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    const Vec y = random_probs(6, rng);
    Vec zp(6, 0.0), zn(6, 0.0), zt(6, 0.0);
    zp[t % 6] = 1.0;
    for (std::size_t l = 0; l < 6; ++l)
      if (zp[l] == 0.0) {
        zn[l] = u(rng) < 0.5 ? 1.0 : 0.0;
        zt[l] = u(rng);
      }
    CHECK(ce_loss(zp, y) >= 0.0);
    CHECK(bce_loss(zp, zn, y) >= 0.0);
    CHECK(an_loss(zp, y) >= 0.0);
    CHECK(epr_loss(zp, y, 2.0) >= 0.0);
    CHECK(wn_loss(zp, zt, y) >= 0.0);
  }
}

TEST_CASE("batch loss is exactly the sum of per-image losses") {
  std::mt19937_64 rng(4);
  const std::size_t batch = 5, labels = 4;
  Tensor zp(Shape{batch, labels}), zt(Shape{batch, labels}), y(Shape{batch, labels});
  std::uniform_real_distribution<double> u(0.02, 0.98);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < labels; ++l) {
      zp[b * labels + l] = l == b % labels ? 1.0 : 0.0;
      zt[b * labels + l] = l == b % labels ? 0.0 : u(rng);
      y[b * labels + l] = u(rng);
    }
  auto row = [&](const Tensor& t, std::size_t b) {
    return Tensor(Shape{labels}, Vec(t.data() + b * labels, t.data() + (b + 1) * labels));
  };
  double ce_sum = 0.0, an_sum = 0.0, epr_sum = 0.0, wn_sum = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    ce_sum += ce_loss(row(zp, b), constant(row(y, b))).value().item();
    an_sum += an_loss(row(zp, b), constant(row(y, b))).value().item();
    epr_sum += epr_loss(row(zp, b), constant(row(y, b)), 1.5).value().item();
    wn_sum += wn_loss(row(zp, b), constant(row(zt, b)), constant(row(y, b))).value().item();
  }
  CHECK(ce_loss(zp, constant(y)).value().item() == ce_sum);
  CHECK(an_loss(zp, constant(y)).value().item() == an_sum);
  CHECK(epr_loss(zp, constant(y), 1.5).value().item() == epr_sum);
  CHECK(wn_loss(zp, constant(zt), constant(y)).value().item() == wn_sum);
  CHECK(ce_loss(zp, constant(y), Reduction::Mean).value().item() == doctest::Approx(ce_sum / batch).epsilon(1e-15));
}

TEST_CASE("loss gradients with respect to yhat match finite differences within 1e-6") {
  std::mt19937_64 rng(5);
  const Tensor zp(Shape{2, 3}, {1, 0, 0, 0, 0, 1});
  const Tensor zn(Shape{2, 3}, {0, 1, 0, 1, 0, 0});
  const std::vector<std::function<Var(const std::vector<Var>&)>> losses{
      [&](const std::vector<Var>& in) { return ce_loss(zp, in[0]); },
      [&](const std::vector<Var>& in) { return bce_loss(zp, zn, in[0]); },
      [&](const std::vector<Var>& in) { return an_loss(zp, in[0], 0.5); },
      [&](const std::vector<Var>& in) { return epr_loss(zp, in[0], 1.38); },
      [&](const std::vector<Var>& in) { return wn_loss(zp, constant(Tensor(Shape{2, 3}, {0, 0.3, 0.9, 0.1, 0.6, 0})), in[0]); }};
  for (const auto& fn : losses) {
    const Vec y = random_probs(6, rng);
    const GradCheckReport r = gradient_check("loss", fn, {Tensor(Shape{2, 3}, y)}, 1e-6, 1e-6);
    CHECK(r.pass);
  }
}

TEST_CASE("ce gradient is zero on every unobserved label") {
  const Vec z{0, 1, 0, 0};
  const Var yhat = parameter(Tensor(Shape{4}, {0.3, 0.4, 0.8, 0.1}));
  backward(ce_loss(Tensor(Shape{4}, z), yhat));
  const Tensor g = yhat.grad();
  CHECK(g[0] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
  CHECK(g[1] < 0.0);  // pushes the observed label towards 1
}

TEST_CASE("log arguments are clamped") {
  CHECK(std::isfinite(ce_loss(Vec{1}, Vec{0.0})));
  CHECK(ce_loss(Vec{1}, Vec{0.0}) == doctest::Approx(-std::log(kEps)));
  CHECK(std::isfinite(wn_loss(Vec{0}, Vec{1.0}, Vec{1.0})));
}

TEST_CASE("label vectors validate their kind-specific range") {
  CHECK_NOTHROW((LabelVector{LabelKind::WeakNegative, {0.0, 0.4, 1.0}}.validate()));
  CHECK_THROWS_AS((LabelVector{LabelKind::WeakNegative, {1.2}}.validate()), ContractError);
  CHECK_THROWS_AS((LabelVector{LabelKind::ObservedPositive, {0.5}}.validate()), ContractError);
  CHECK_THROWS_AS((LabelVector{LabelKind::Prediction, {1.0}}.validate()), ContractError);
  CHECK_THROWS_AS(check_compatible({LabelKind::ObservedPositive, {1, 0}}, {LabelKind::ObservedNegative, {1, 1}}),
                  ContractError);
}

TEST_CASE("loss names round-trip") {
  for (const char* name : {"bce", "ce", "an", "epr", "wn"}) CHECK(loss_name(parse_loss(name)) == name);
  CHECK_THROWS_AS(parse_loss("role"), ConfigError);
}
