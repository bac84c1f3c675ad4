#pragma once

#include <cstddef>
#include <span>

#include "patchpu/autodiff.hpp"

namespace patchpu {

struct SimilarityConfig {
  double theta = 0.0;
  bool detach_targets = true;

  void validate() const;
};

/// (u . v) / (|u| |v|). Throws ContractError when either vector has zero norm.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

/// x if x > theta else 0.
double thresholded_relu(double x, double theta);

struct NegativeEstimate {
  Var weak_negatives;  // [L], zero on observed labels
  Tensor beta;         // [L, L]
  std::size_t degenerate_representations = 0;
};

/// beta[l, k] = phi(sim(e_image_l, e_image_k), theta); for every unobserved l,
/// z~-_l = max over observed k of beta[l, k]. With detach_targets the
/// estimate is a constant for the backward pass.
NegativeEstimate estimate_negatives(const Var& representations, std::span<const double> z_plus,
                                    const SimilarityConfig& cfg);

}  // namespace patchpu
