#include "patchpu/attention.hpp"

#include <cmath>

#include "patchpu/errors.hpp"

namespace patchpu {

void HeadConfig::validate() const {
  if (num_labels < 2) throw ConfigError("head: at least two labels are required");
  if (embedding_dim == 0 || mlp_hidden == 0) throw ConfigError("head: dimensions must be positive");
}

void init_head(ParameterStore& params, const HeadConfig& cfg) {
  cfg.validate();
  const std::size_t f = cfg.embedding_dim, l = cfg.num_labels, h = cfg.mlp_hidden;
  params.create("codebook/labels", {l, f}, InitKind::VarianceScaling, f);
  params.create("pool_mlp/dense1/weight", {f, h}, InitKind::VarianceScaling, f);
  params.create("pool_mlp/dense1/bias", {h}, InitKind::Zeros);
  params.create("pool_mlp/dense2/weight", {h, f}, InitKind::VarianceScaling, h);
  params.create("pool_mlp/dense2/bias", {f}, InitKind::Zeros);
  params.create("classifier/weight", {l, f}, InitKind::VarianceScaling, f);
}

Var attention_scores(const Var& codebook, const Var& patch_embeddings, bool scaled) {
  require_rank(codebook.value(), 2, "attention_scores codebook");
  require_rank(patch_embeddings.value(), 2, "attention_scores embeddings");
  if (patch_embeddings.dim(0) == 0) throw ContractError("attention_scores: empty patch set");
  if (codebook.dim(1) != patch_embeddings.dim(1)) throw ShapeError("attention_scores: embedding dimensions differ");
  Var logits = ops::matmul(codebook, patch_embeddings, false, true);
  if (scaled) logits = ops::affine(logits, 1.0 / std::sqrt(static_cast<double>(codebook.dim(1))), 0.0);
  return ops::softmax_rows(logits);
}

Var pool_representations(const Var& attention, const Var& patch_embeddings, const ParameterStore& params) {
  if (attention.dim(1) != patch_embeddings.dim(0)) throw ShapeError("pool_representations: patch counts differ");
  const Var pooled = ops::matmul(attention, patch_embeddings);
  Var h = ops::add_row_bias(ops::matmul(pooled, params.at("pool_mlp/dense1/weight")), params.at("pool_mlp/dense1/bias"));
  h = ops::gelu(h);
  h = ops::add_row_bias(ops::matmul(h, params.at("pool_mlp/dense2/weight")), params.at("pool_mlp/dense2/bias"));
  return ops::add(h, pooled);
}

Var classifier_scores(const Var& representations, const Var& classifier_weights) {
  if (representations.dim(0) != classifier_weights.dim(0)) {
    throw ShapeError("classify: representation count differs from classifier label count");
  }
  return ops::matmul(representations, classifier_weights, false, true);
}

Var classify(const Var& representations, const Var& classifier_weights) {
  return ops::exp(ops::diagonal(ops::log_softmax_rows(classifier_scores(representations, classifier_weights))));
}

HeadOutput run_head(const Var& patch_embeddings, const ParameterStore& params, const HeadConfig& cfg) {
  HeadOutput out;
  out.attention = attention_scores(params.at("codebook/labels"), patch_embeddings, cfg.scaled_attention);
  out.representations = pool_representations(out.attention, patch_embeddings, params);
  out.predictions = classify(out.representations, params.at("classifier/weight"));
  return out;
}

}  // namespace patchpu
