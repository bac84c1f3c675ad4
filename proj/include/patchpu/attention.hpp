#pragma once

#include <cstddef>

#include "patchpu/autodiff.hpp"

namespace patchpu {

struct HeadConfig {
  std::size_t num_labels = 2;
  std::size_t embedding_dim = 256;
  std::size_t mlp_hidden = 256;
  /// Divide codebook-patch dot products by sqrt(F). Off by default.
  bool scaled_attention = false;

  void validate() const;
};

/// Creates "codebook/", "pool_mlp/" and "classifier/" parameters.
void init_head(ParameterStore& params, const HeadConfig& cfg);

/// A[l, i] = softmax over patches i of e_label_l . e_patch_i, shape [L, m].
Var attention_scores(const Var& codebook, const Var& patch_embeddings, bool scaled = false);

/// E_image = f(A E_patch) + A E_patch with f a two-layer GELU MLP applied per row.
Var pool_representations(const Var& attention, const Var& patch_embeddings, const ParameterStore& params);

/// Scores S[l, k] = W_k . e_image_l, shape [L, L].
Var classifier_scores(const Var& representations, const Var& classifier_weights);

/// yhat_l = softmax_k(S[l, :])[l]; each entry in (0, 1), no constraint on the sum.
Var classify(const Var& representations, const Var& classifier_weights);

struct HeadOutput {
  Var attention;        // [L, m]
  Var representations;  // [L, F]
  Var predictions;      // [L]
};

/// Blocks 3-5 for one image's patch embeddings.
HeadOutput run_head(const Var& patch_embeddings, const ParameterStore& params, const HeadConfig& cfg);

}  // namespace patchpu
