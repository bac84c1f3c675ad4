#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchpu/data.hpp"
#include "patchpu/losses.hpp"
#include "patchpu/metrics.hpp"
#include "patchpu/model.hpp"
#include "patchpu/negatives.hpp"
#include "patchpu/optimizer.hpp"

namespace patchpu {

enum class Supervision {
  Auto,            // full labels for bce, single positive otherwise
  Full,            // z+ = y, z- = 1 - y
  SinglePositive,  // one frozen positive per image, no negatives
};

struct TrainConfig {
  LossKind loss = LossKind::WN;
  std::size_t epochs = 25;
  std::size_t batch_size = 16;
  StepSchedule lr_schedule = StepSchedule::halving_every_five();
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;
  std::filesystem::path output_dir;
  PatchGridConfig grid;
  EmbedderConfig embedder = EmbedderConfig::reduced();
  std::size_t mlp_hidden = 256;
  bool scaled_attention = false;
  SimilarityConfig similarity;
  double k = 2.92;  // expected positives per image, EPR only
  double lambda = 1.0;
  double lambda_epr = 1.0;
  Reduction reduction = Reduction::Sum;
  Supervision supervision = Supervision::Auto;
  bool eval_every_epoch = true;
  bool verbose = true;

  void validate() const;
  bool full_supervision() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Unknown keys are rejected so typos do not silently fall back to defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean per-image loss
  std::optional<double> val_map;
  double mean_weak_negative_mass = 0.0;  // mean per image of sum_l z~-_l (wn only)
  double wall_seconds = 0.0;
};

struct RunLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::filesystem::path checkpoint;
};

struct TrainResult {
  Model model;
  RunLog log;
};

/// Trains on in-memory datasets; val may be null.
TrainResult train(const TrainConfig& cfg, const MultiLabelDataset& train_set, const MultiLabelDataset* val_set,
                  std::ostream* table = nullptr);
/// Loads the manifests named in cfg.
TrainResult train(const TrainConfig& cfg, std::ostream* table = nullptr);

/// Patches of one dataset image as fed to the model.
PatchSet patches_for(const Image8& image, const PatchGridConfig& grid, std::uint64_t sampling_seed);

/// [N, L] predictions, inference mode.
Tensor predict(const Model& model, const MultiLabelDataset& dataset, std::size_t batch_size = 32);

/// Scores every image against its full ground truth.
EvalReport evaluate(const Model& model, const MultiLabelDataset& dataset);
EvalReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest);

struct LocalizedPatch {
  PatchOrigin origin;
  PixelRect rect;  // level-0 footprint
  double alpha = 0.0;
  double opacity = 0.0;  // alpha / max alpha
};

struct Localization {
  std::string label;
  std::size_t label_index = 0;
  double score = 0.0;  // yhat for the label
  std::vector<LocalizedPatch> patches;

  /// Index of the highest-attention patch among those at `level`.
  std::size_t argmax_at_level(std::size_t level) const;
  std::string to_csv() const;
  /// Level-0 image with each patch rectangle blended towards red by its opacity
  /// (0 transparent, 1 solid red),
  /// coarsest level painted first.
  Image8 overlay(const Image8& image) const;
};

Localization localize(const Model& model, const Image8& image, const std::string& label);

/// Writes <stem>_<label>_yhat<score>.csv and .png into out_dir; returns the CSV path.
std::filesystem::path export_localization(const Localization& loc, const Image8& image,
                                          const std::filesystem::path& out_dir, const std::string& stem);

}  // namespace patchpu
