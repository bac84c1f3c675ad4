#include "patchpu/negatives.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "patchpu/errors.hpp"

namespace patchpu {

void SimilarityConfig::validate() const {
  if (!(theta >= -1.0 && theta <= 1.0)) throw ConfigError("similarity threshold theta must lie in [-1, 1]");
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("cosine_similarity: vector lengths differ");
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw ContractError("cosine_similarity: degenerate (zero-norm) vector");
  return std::clamp(uv / std::sqrt(uu * vv), -1.0, 1.0);
}

double thresholded_relu(double x, double theta) { return x > theta ? x : 0.0; }

NegativeEstimate estimate_negatives(const Var& representations, std::span<const double> z_plus,
                                    const SimilarityConfig& cfg) {
  cfg.validate();
  require_rank(representations.value(), 2, "estimate_negatives");
  const std::size_t labels = representations.dim(0);
  if (z_plus.size() != labels) throw ShapeError("estimate_negatives: label vector length differs from |L|");
  const std::vector<double> observed(z_plus.begin(), z_plus.end());
  if (std::none_of(observed.begin(), observed.end(), [](double z) { return z == 1.0; })) {
    throw ContractError("estimate_negatives: at least one observed positive label is required");
  }

  NegativeEstimate out;
  const Var similarity = ops::cosine_similarity_matrix(representations, &out.degenerate_representations);
  const Var beta = ops::thresholded_relu(similarity, cfg.theta);
  out.beta = beta.value();

  Tensor unobserved(Shape{labels});
  for (std::size_t l = 0; l < labels; ++l) unobserved[l] = observed[l] == 1.0 ? 0.0 : 1.0;
  Var z = ops::mul(ops::masked_row_max(beta, observed), constant(std::move(unobserved)));
  out.weak_negatives = cfg.detach_targets ? ops::detach(z) : z;
  return out;
}

}  // namespace patchpu
