#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchpu/image.hpp"
#include "patchpu/patches.hpp"
#include "patchpu/tensor.hpp"

namespace patchpu {

/// Placement of one synthetic object, level-0 pixel box.
struct ObjectRecord {
  std::size_t label = 0;
  PixelRect box;
};

struct DatasetItem {
  std::string image;  // path relative to the dataset root
  Image8 pixels;
  std::vector<double> y;  // ground truth, length |L|
  std::vector<ObjectRecord> objects;  // synthetic data only
};

struct MultiLabelDataset {
  std::vector<std::string> label_names;
  std::vector<DatasetItem> items;
  std::string split = "train";
  std::filesystem::path root;

  std::size_t size() const noexcept { return items.size(); }
  std::size_t num_labels() const noexcept { return label_names.size(); }
  /// [N, L] ground-truth matrix.
  Tensor truth_matrix() const;
  /// Throws ContractError if an item has no positive or names repeat.
  void validate() const;
};

enum class ShapeKind { Disk, Square, Triangle, Cross, Ring, Diamond, HorizontalBar, VerticalBar };
inline constexpr std::size_t kShapeKinds = 8;

struct LabelVisual {
  ShapeKind shape = ShapeKind::Disk;
  std::array<double, 3> color{1.0, 0.0, 0.0};
  bool textured = false;
};

struct SyntheticConfig {
  std::size_t num_labels = 8;
  std::size_t train_images = 2000;
  std::size_t val_images = 500;
  std::size_t canvas_size = 128;
  std::size_t cell_size = 64;  // objects never leave their cell
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 4;
  std::uint64_t seed = 7;
  double background = 0.12;
  double noise = 0.03;  // uniform pixel noise amplitude
  double min_radius = 12.0;
  double max_radius = 22.0;
  bool textured = false;
  /// Optional explicit visuals; defaults assign shape l % 8 and a distinct colour.
  std::vector<LabelVisual> visuals;

  void validate() const;
  std::vector<LabelVisual> resolved_visuals() const;
  std::vector<std::string> label_names() const;
};

/// Keys mirror the struct fields; shapes_per_image_range and radius_range are
/// [min, max] pairs. Unknown keys are rejected.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticConfig& cfg);

/// Deterministic in (cfg, split); "train" and "val" draw from different streams.
MultiLabelDataset generate_synthetic(const SyntheticConfig& cfg, const std::string& split, std::size_t count);
MultiLabelDataset generate_synthetic(const SyntheticConfig& cfg, const std::string& split);

/// Writes images as PNG plus manifest.json into dir; returns the manifest path.
std::filesystem::path write_dataset(const MultiLabelDataset& dataset, const std::filesystem::path& dir);

/// Reads a manifest and every referenced PNG. Repeated positives collapse.
MultiLabelDataset load_annotations(const std::filesystem::path& manifest_path);

/// One label drawn uniformly among the positives of y.
std::vector<double> sample_single_positive(std::span<const double> y, std::mt19937_64& rng);

/// One frozen single-positive vector per item, drawn in item order.
std::vector<std::vector<double>> sample_single_positives(const MultiLabelDataset& dataset, std::uint64_t seed);

/// Mean number of positives per image.
double mean_labels_per_image(const MultiLabelDataset& dataset);

}  // namespace patchpu
