#include "patchpu/losses.hpp"

#include "patchpu/errors.hpp"

namespace patchpu {

namespace {

const char* kind_name(LabelKind kind) {
  switch (kind) {
    case LabelKind::GroundTruth: return "ground truth";
    case LabelKind::ObservedPositive: return "observed positive";
    case LabelKind::ObservedNegative: return "observed negative";
    case LabelKind::WeakNegative: return "weak negative";
    case LabelKind::Prediction: return "prediction";
  }
  return "?";
}

}  // namespace

void LabelVector::validate() const {
  for (std::size_t l = 0; l < values.size(); ++l) {
    const double v = values[l];
    bool ok = false;
    switch (kind) {
      case LabelKind::GroundTruth:
      case LabelKind::ObservedPositive:
      case LabelKind::ObservedNegative: ok = v == 0.0 || v == 1.0; break;
      case LabelKind::WeakNegative: ok = v >= 0.0 && v <= 1.0; break;
      case LabelKind::Prediction: ok = v > 0.0 && v < 1.0; break;
    }
    if (!ok) {
      throw ContractError(std::string(kind_name(kind)) + " label " + std::to_string(l) + " out of range: " +
                          std::to_string(v));
    }
  }
}

void check_compatible(const LabelVector& z_plus, const LabelVector& z_minus) {
  if (z_plus.size() != z_minus.size()) throw ShapeError("positive and negative label vectors differ in length");
  for (std::size_t l = 0; l < z_plus.size(); ++l) {
    if (z_plus.values[l] == 1.0 && z_minus.values[l] == 1.0) {
      throw ContractError("label " + std::to_string(l) + " is observed both positive and negative");
    }
  }
}

LossKind parse_loss(const std::string& name) {
  if (name == "bce") return LossKind::BCE;
  if (name == "ce") return LossKind::CE;
  if (name == "an") return LossKind::AN;
  if (name == "epr") return LossKind::EPR;
  if (name == "wn") return LossKind::WN;
  throw ConfigError("unknown loss '" + name + "' (expected one of bce, ce, an, epr, wn)");
}

std::string loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::BCE: return "bce";
    case LossKind::CE: return "ce";
    case LossKind::AN: return "an";
    case LossKind::EPR: return "epr";
    case LossKind::WN: return "wn";
  }
  return "?";
}

namespace {

// Views a [L] or [B, L] tensor as [B, L].
Shape batch_shape(const Shape& s) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return s;
  throw ShapeError("loss inputs must be [L] or [B, L], got " + shape_to_string(s));
}

Var as_batch(const Var& v) { return v.value().rank() == 2 ? v : ops::reshape(v, batch_shape(v.shape())); }

Tensor as_batch(const Tensor& t) { return t.rank() == 2 ? t : t.reshaped(batch_shape(t.shape())); }

void check_shapes(const Tensor& labels, const Var& yhat, const char* what) {
  if (batch_shape(labels.shape()) != batch_shape(yhat.shape())) {
    throw ShapeError(std::string(what) + ": labels " + shape_to_string(labels.shape()) + " vs predictions " +
                     shape_to_string(yhat.shape()));
  }
}

Var complement(const Var& p) { return ops::affine(p, -1.0, 1.0); }

Var reduce(const Var& per_image, Reduction reduction) {
  Var total = ops::sum(per_image);
  if (reduction == Reduction::Mean) total = ops::affine(total, 1.0 / static_cast<double>(per_image.dim(0)), 0.0);
  return total;
}

Tensor one_minus(const Tensor& t) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = 1.0 - t[i];
  return out;
}

}  // namespace

Var cross_entropy_per_image(const Var& targets, const Var& predictions) {
  const Var logp = ops::log(ops::clamp(as_batch(predictions), kLogClamp, 1.0 - kLogClamp));
  return ops::affine(ops::row_sum(ops::mul(as_batch(targets), logp)), -1.0, 0.0);
}

Var ce_loss(const Tensor& z_plus, const Var& yhat, Reduction reduction) {
  check_shapes(z_plus, yhat, "ce_loss");
  return reduce(cross_entropy_per_image(constant(as_batch(z_plus)), yhat), reduction);
}

Var bce_loss(const Tensor& z_plus, const Tensor& z_minus, const Var& yhat, Reduction reduction) {
  check_shapes(z_plus, yhat, "bce_loss");
  check_shapes(z_minus, yhat, "bce_loss");
  for (std::size_t i = 0; i < z_plus.size(); ++i) {
    if (z_plus[i] == 1.0 && z_minus[i] == 1.0) {
      throw ContractError("bce_loss: label observed both positive and negative (flat index " + std::to_string(i) + ")");
    }
  }
  const Var pos = cross_entropy_per_image(constant(as_batch(z_plus)), yhat);
  const Var neg = cross_entropy_per_image(constant(as_batch(z_minus)), complement(as_batch(yhat)));
  return reduce(ops::add(pos, neg), reduction);
}

Var an_loss(const Tensor& z_plus, const Var& yhat, double lambda, Reduction reduction) {
  if (lambda < 0.0) throw ConfigError("an_loss: lambda must be >= 0");
  check_shapes(z_plus, yhat, "an_loss");
  const Tensor zp = as_batch(z_plus);
  const Var pos = cross_entropy_per_image(constant(zp), yhat);
  const Var neg = cross_entropy_per_image(constant(one_minus(zp)), complement(as_batch(yhat)));
  return reduce(ops::add(pos, ops::affine(neg, lambda, 0.0)), reduction);
}

Var epr_loss(const Tensor& z_plus, const Var& yhat, double k, double lambda_epr, Reduction reduction) {
  check_shapes(z_plus, yhat, "epr_loss");
  const Var pos = cross_entropy_per_image(constant(as_batch(z_plus)), yhat);
  const Var residual = ops::affine(ops::row_sum(as_batch(yhat)), 1.0, -k);
  return reduce(ops::add(pos, ops::affine(ops::mul(residual, residual), lambda_epr, 0.0)), reduction);
}

Var wn_loss(const Tensor& z_plus, const Var& z_tilde_minus, const Var& yhat, Reduction reduction) {
  check_shapes(z_plus, yhat, "wn_loss");
  check_shapes(z_tilde_minus.value(), yhat, "wn_loss");
  const Var pos = cross_entropy_per_image(constant(as_batch(z_plus)), yhat);
  const Var neg = cross_entropy_per_image(as_batch(z_tilde_minus), complement(as_batch(yhat)));
  return reduce(ops::add(pos, neg), reduction);
}

namespace {
Tensor vec(const std::vector<double>& v) { return Tensor(Shape{v.size()}, v); }
Var cvec(const std::vector<double>& v) { return constant(vec(v)); }
}  // namespace

double ce_loss(const std::vector<double>& z_plus, const std::vector<double>& yhat) {
  return ce_loss(vec(z_plus), cvec(yhat)).value().item();
}

double bce_loss(const std::vector<double>& z_plus, const std::vector<double>& z_minus, const std::vector<double>& yhat) {
  return bce_loss(vec(z_plus), vec(z_minus), cvec(yhat)).value().item();
}

double an_loss(const std::vector<double>& z_plus, const std::vector<double>& yhat, double lambda) {
  return an_loss(vec(z_plus), cvec(yhat), lambda).value().item();
}

double epr_loss(const std::vector<double>& z_plus, const std::vector<double>& yhat, double k, double lambda_epr) {
  return epr_loss(vec(z_plus), cvec(yhat), k, lambda_epr).value().item();
}

double wn_loss(const std::vector<double>& z_plus, const std::vector<double>& z_tilde_minus,
               const std::vector<double>& yhat) {
  return wn_loss(vec(z_plus), cvec(z_tilde_minus), cvec(yhat)).value().item();
}

}  // namespace patchpu
