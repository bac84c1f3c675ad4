#pragma once

#include <string>
#include <vector>

#include "patchpu/autodiff.hpp"

namespace patchpu {

enum class LabelKind { GroundTruth, ObservedPositive, ObservedNegative, WeakNegative, Prediction };

/// A length-|L| vector tagged with what it holds; validate() checks the
/// kind-specific range.
struct LabelVector {
  LabelKind kind = LabelKind::GroundTruth;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  void validate() const;
  Tensor tensor() const { return Tensor(Shape{values.size()}, values); }
};

/// Throws ContractError if some label is both an observed positive and an
/// observed negative.
void check_compatible(const LabelVector& z_plus, const LabelVector& z_minus);

/// Log arguments are clamped to [kLogClamp, 1 - kLogClamp].
inline constexpr double kLogClamp = 1e-12;

enum class Reduction { Sum, Mean };

enum class LossKind { BCE, CE, AN, EPR, WN };

LossKind parse_loss(const std::string& name);
std::string loss_name(LossKind kind);

// Every loss takes predictions [L] (one image) or [B, L] (a batch) with label
// tensors of the same shape, computes one loss per image and reduces over the
// batch in image order, so a batch loss is exactly the sum of its per-image
// losses under Reduction::Sum.

/// Per-image -sum_l z_l log(clamp(p_l)), shape [B].
Var cross_entropy_per_image(const Var& targets, const Var& predictions);

/// -sum z+ log yhat.
Var ce_loss(const Tensor& z_plus, const Var& yhat, Reduction reduction = Reduction::Sum);
/// CE(z+, yhat) + CE(z-, 1 - yhat).
Var bce_loss(const Tensor& z_plus, const Tensor& z_minus, const Var& yhat, Reduction reduction = Reduction::Sum);
/// CE(z+, yhat) + lambda CE(1 - z+, 1 - yhat).
Var an_loss(const Tensor& z_plus, const Var& yhat, double lambda = 1.0, Reduction reduction = Reduction::Sum);
/// CE(z+, yhat) + lambda_epr (sum_l yhat_l - k)^2 per image.
Var epr_loss(const Tensor& z_plus, const Var& yhat, double k, double lambda_epr = 1.0,
             Reduction reduction = Reduction::Sum);
/// CE(z+, yhat) + CE(z~-, 1 - yhat). z~- is a Var so callers may keep it
/// attached to the graph.
Var wn_loss(const Tensor& z_plus, const Var& z_tilde_minus, const Var& yhat, Reduction reduction = Reduction::Sum);

// Scalar conveniences over plain vectors (single image, Sum reduction).
double ce_loss(const std::vector<double>& z_plus, const std::vector<double>& yhat);
double bce_loss(const std::vector<double>& z_plus, const std::vector<double>& z_minus, const std::vector<double>& yhat);
double an_loss(const std::vector<double>& z_plus, const std::vector<double>& yhat, double lambda = 1.0);
double epr_loss(const std::vector<double>& z_plus, const std::vector<double>& yhat, double k, double lambda_epr = 1.0);
double wn_loss(const std::vector<double>& z_plus, const std::vector<double>& z_tilde_minus,
               const std::vector<double>& yhat);

}  // namespace patchpu
