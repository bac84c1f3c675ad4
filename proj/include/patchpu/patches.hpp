#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "patchpu/image.hpp"
#include "patchpu/tensor.hpp"

namespace patchpu {

struct PatchGridConfig {
  std::size_t levels = 3;  // resolution levels, level 0 included
  double ratio = 2.0;      // downsampling ratio between consecutive levels
  std::size_t patch_height = 64;
  std::size_t patch_width = 64;
  std::size_t stride = 64;
  std::optional<std::size_t> max_patches;

  /// Throws ConfigError on invalid values.
  void validate() const;
};

struct Pyramid {
  std::vector<ImageTensor> images;
  std::vector<std::size_t> level_of;  // original level index of each kept image
  std::size_t dropped_levels = 0;
};

/// Grid position of a patch: resolution level, window row and column.
struct PatchOrigin {
  std::size_t level = 0;
  std::size_t row = 0;
  std::size_t col = 0;

  bool operator==(const PatchOrigin&) const = default;
};

/// Axis-aligned rectangle in level-0 pixel coordinates, half-open.
struct PixelRect {
  double y0 = 0, x0 = 0, y1 = 0, x1 = 0;

  bool intersects(const PixelRect& other) const {
    return y0 < other.y1 && other.y0 < y1 && x0 < other.x1 && other.x0 < x1;
  }
};

struct PatchSet {
  Tensor patches;  // [m, h, w, C]
  std::vector<PatchOrigin> origins;
  std::size_t source_height = 0;
  std::size_t source_width = 0;
  std::size_t stride = 0;
  double ratio = 2.0;

  std::size_t size() const noexcept { return origins.size(); }
  std::size_t patch_height() const { return patches.dim(1); }
  std::size_t patch_width() const { return patches.dim(2); }
  std::size_t channels() const { return patches.dim(3); }

  /// Footprint of patch i projected onto the level-0 image.
  PixelRect footprint(std::size_t i) const;
  std::vector<std::size_t> count_per_level() const;
};

/// Bilinear resize with half-pixel-centre alignment.
ImageTensor resize_bilinear(const ImageTensor& image, std::size_t out_height, std::size_t out_width);

/// Level r has size floor(H / ratio^r) x floor(W / ratio^r) and is resampled
/// from level r-1. Levels smaller than the patch are dropped and counted.
Pyramid build_pyramid(const ImageTensor& image, const PatchGridConfig& cfg);

/// Sliding-window extraction per level; partial border windows are discarded.
PatchSet extract_patches(const Pyramid& pyramid, const PatchGridConfig& cfg);

/// Number of patches extract_patches yields for an H x W image.
std::size_t expected_patch_count(std::size_t height, std::size_t width, const PatchGridConfig& cfg);

/// Per-level quotas proportional to level counts; leftover slots go to the
/// largest fractional remainders, coarsest level first on ties.
std::vector<std::size_t> subsample_quotas(const std::vector<std::size_t>& per_level, std::size_t max_patches);

/// Identity when the set already fits; otherwise a stratified uniform subset
/// that keeps the original patch order.
PatchSet subsample_patches(const PatchSet& set, std::size_t max_patches, std::mt19937_64& rng);

/// build_pyramid + extract_patches (+ subsampling when cfg.max_patches is set).
PatchSet image_to_patches(const ImageTensor& image, const PatchGridConfig& cfg, std::mt19937_64* rng = nullptr);

}  // namespace patchpu
