#include <doctest.h>

#include <cmath>
#include <random>

#include "patchpu/errors.hpp"
#include "patchpu/losses.hpp"
#include "patchpu/negatives.hpp"

using namespace patchpu;

namespace {

using Vec = std::vector<double>;

double cos_oracle(const Vec& u, const Vec& v) {
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  return uv / std::sqrt(uu * vv);
}

// Weak negatives by direct loops over label pairs.
Vec estimate_oracle(const std::vector<Vec>& reps, const Vec& z, double theta) {
  Vec out(reps.size(), 0.0);
  for (std::size_t l = 0; l < reps.size(); ++l) {
    if (z[l] == 1.0) continue;
    double best = -2.0;
    for (std::size_t k = 0; k < reps.size(); ++k) {
      if (z[k] != 1.0) continue;
      const double s = cos_oracle(reps[l], reps[k]);
      best = std::max(best, s > theta ? s : 0.0);
    }
    out[l] = best;
  }
  return out;
}

Tensor stack(const std::vector<Vec>& rows) {
  Tensor t(Shape{rows.size(), rows.front().size()});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) t[r * rows[r].size() + c] = rows[r][c];
  return t;
}

Vec estimate(const std::vector<Vec>& reps, const Vec& z, SimilarityConfig cfg = {}) {
  return estimate_negatives(constant(stack(reps)), z, cfg).weak_negatives.value().to_vector();
}

std::vector<Vec> random_reps(std::size_t labels, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Vec> reps(labels, Vec(dim));
  for (auto& r : reps)
    for (double& x : r) x = n(rng);
  return reps;
}

}  // namespace

TEST_CASE("cosine similarity of parallel, orthogonal and opposite vectors") {
  CHECK(cosine_similarity(Vec{1, 2, 3}, Vec{2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_similarity(Vec{1, 0}, Vec{0, 5}) == 0.0);
  CHECK(cosine_similarity(Vec{1, -1}, Vec{-3, 3}) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_similarity(Vec{0, 0}, Vec{1, 1}), ContractError);
  CHECK_THROWS_AS(cosine_similarity(Vec{1, 0}, Vec{1, 1, 1}), ShapeError);
}

TEST_CASE("thresholded relu") {
  CHECK(thresholded_relu(0.4, 0.0) == 0.4);
  CHECK(thresholded_relu(-0.4, 0.0) == 0.0);
  CHECK(thresholded_relu(0.3, 0.5) == 0.0);
  CHECK(thresholded_relu(0.0, 0.0) == 0.0);
}

TEST_CASE("weak negative equals the thresholded similarity to the observed positive") {
  // cos(angle) = 0.8, then -0.2, then identical direction.
  const double s = std::sqrt(1.0 - 0.64);
  const double t = std::sqrt(1.0 - 0.04);
  const auto z1 = estimate({{1, 0}, {0.8, s}}, {1, 0});
  CHECK(z1[0] == 0.0);
  CHECK(z1[1] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(estimate({{1, 0}, {-0.2, t}}, {1, 0})[1] == 0.0);
  CHECK(estimate({{3, 1}, {6, 2}}, {1, 0})[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("observed labels get zero and a missing positive is an error") {
  std::mt19937_64 rng(1);
  const auto reps = random_reps(5, 6, rng);
  const auto z = estimate(reps, {0, 1, 0, 1, 0});
  CHECK(z[1] == 0.0);
  CHECK(z[3] == 0.0);
  CHECK_THROWS_AS(estimate(reps, {0, 0, 0, 0, 0}), ContractError);
  CHECK_THROWS_AS(estimate(reps, {1, 0, 0}), ShapeError);
}

TEST_CASE("estimate matches a loop oracle on random representations") {
  std::mt19937_64 rng(2);
  for (double theta : {-0.5, 0.0, 0.2, 0.6}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto reps = random_reps(6, 4, rng);
      Vec z(6, 0.0);
      z[trial % 6] = 1.0;
      if (trial % 3 == 0) z[(trial + 2) % 6] = 1.0;
      const auto got = estimate(reps, z, {theta, true});
      const auto want = estimate_oracle(reps, z, theta);
      for (std::size_t l = 0; l < 6; ++l) {
        CHECK(got[l] == doctest::Approx(want[l]).epsilon(1e-12));
        if (theta >= 0.0) {
          CHECK(got[l] >= 0.0);
          CHECK(got[l] <= 1.0);
        }
      }
    }
  }
}

TEST_CASE("beta is symmetric with a unit diagonal") {
  std::mt19937_64 rng(3);
  const auto reps = random_reps(5, 7, rng);
  const Tensor beta = estimate_negatives(constant(stack(reps)), Vec{1, 0, 0, 0, 0}, {}).beta;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(beta[i * 5 + i] == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t j = 0; j < 5; ++j) CHECK(beta[i * 5 + j] == beta[j * 5 + i]);
  }
}

TEST_CASE("raising a non-negative theta never increases a weak negative") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto reps = random_reps(6, 3, rng);
    const Vec z{1, 0, 0, 0, 0, 0};
    Vec prev = estimate(reps, z, {0.0, true});
    for (double theta = 0.1; theta <= 1.0; theta += 0.1) {
      const Vec cur = estimate(reps, z, {theta, true});
      for (std::size_t l = 0; l < 6; ++l) CHECK(cur[l] <= prev[l]);
      prev = cur;
    }
  }
}

TEST_CASE("scaling a representation leaves the estimate unchanged") {
  std::mt19937_64 rng(5);
  auto reps = random_reps(4, 5, rng);
  const Vec z{0, 0, 1, 0};
  const auto before = estimate(reps, z);
  for (double& x : reps[1]) x *= 7.5;
  for (double& x : reps[2]) x *= 0.01;
  const auto after = estimate(reps, z);
  for (std::size_t l = 0; l < 4; ++l) CHECK(after[l] == doctest::Approx(before[l]).epsilon(1e-12));
}

TEST_CASE("theta outside [-1, 1] is rejected") {
  CHECK_THROWS_AS((SimilarityConfig{1.5, true}.validate()), ConfigError);
  CHECK_THROWS_AS((SimilarityConfig{-2.0, true}.validate()), ConfigError);
}

TEST_CASE("zero-norm representations are counted") {
  const auto est = estimate_negatives(constant(stack({{1, 0}, {0, 0}, {1, 1}})), Vec{1, 0, 0}, {});
  CHECK(est.degenerate_representations == 1);
  CHECK(est.weak_negatives.value()[1] == 0.0);
}

TEST_CASE("wn lies between ce and an") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 100; ++trial) {
    Vec y(5), zt(5), z(5, 0.0);
    for (double& v : y) v = u(rng);
    z[trial % 5] = 1.0;
    for (std::size_t l = 0; l < 5; ++l) zt[l] = z[l] == 1.0 ? 0.0 : u(rng);
    const double wn = wn_loss(z, zt, y);
    CHECK(wn >= ce_loss(z, y));
    CHECK(wn <= an_loss(z, y, 1.0) + 1e-12);
  }
}

TEST_CASE("detached targets block gradients into the representations") {
  std::mt19937_64 rng(7);
  const Tensor reps = stack(random_reps(4, 3, rng));
  const Tensor zp(Shape{4}, {1, 0, 0, 0});
  const Tensor yhat(Shape{4}, {0.6, 0.4, 0.3, 0.7});
  for (bool detach : {true, false}) {
    const Var r = parameter(reps);
    const auto est = estimate_negatives(r, zp.storage(), {0.0, detach});
    backward(wn_loss(zp, est.weak_negatives, constant(yhat)));
    double norm = 0.0;
    const Tensor g = r.grad();
    for (double v : g.storage()) norm += v * v;
    if (detach) CHECK(norm == 0.0);
    else CHECK(norm > 0.0);
  }
}
