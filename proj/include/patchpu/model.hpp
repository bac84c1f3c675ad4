#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchpu/attention.hpp"
#include "patchpu/autodiff.hpp"
#include "patchpu/embedder.hpp"
#include "patchpu/patches.hpp"

namespace patchpu {

struct ModelConfig {
  std::vector<std::string> labels;
  PatchGridConfig grid;
  EmbedderConfig embedder = EmbedderConfig::reduced();
  std::size_t mlp_hidden = 256;
  bool scaled_attention = false;

  HeadConfig head() const { return {labels.size(), embedder.embedding_dim, mlp_hidden, scaled_attention}; }
  void validate() const;
};

nlohmann::json to_json(const PatchGridConfig& cfg);
PatchGridConfig grid_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EmbedderConfig& cfg);
EmbedderConfig embedder_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_from_json(const nlohmann::json& j);

/// Forward pass over a batch of images.
struct BatchForward {
  Var predictions;               // [B, L]
  std::vector<HeadOutput> heads;  // one per image
};

/// Patch embedder plus attention head, owning its parameters.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  Model(ModelConfig cfg, ParameterStore params);

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }
  std::size_t num_labels() const noexcept { return cfg_.labels.size(); }
  std::size_t label_index(const std::string& name) const;

  /// All patches of the batch go through the embedder in one pass.
  BatchForward forward(const std::vector<PatchSet>& images) const;

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

/// Manifest (JSON) plus little-endian float64 blob in manifest order.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace patchpu
