#include "patchpu/patches.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "patchpu/errors.hpp"

namespace patchpu {

void PatchGridConfig::validate() const {
  if (levels < 1) throw ConfigError("patch grid: levels must be >= 1");
  if (!(ratio > 1.0)) throw ConfigError("patch grid: ratio must be > 1");
  if (patch_height < 1 || patch_width < 1 || stride < 1) {
    throw ConfigError("patch grid: patch size and stride must be >= 1");
  }
  if (max_patches && *max_patches < 1) throw ConfigError("patch grid: max_patches must be >= 1");
}

PixelRect PatchSet::footprint(std::size_t i) const {
  const PatchOrigin& o = origins.at(i);
  const double scale = std::pow(ratio, static_cast<double>(o.level));
  const double y0 = static_cast<double>(o.row * stride) * scale;
  const double x0 = static_cast<double>(o.col * stride) * scale;
  return {y0, x0, y0 + static_cast<double>(patch_height()) * scale, x0 + static_cast<double>(patch_width()) * scale};
}

std::vector<std::size_t> PatchSet::count_per_level() const {
  std::size_t top = 0;
  for (const auto& o : origins) top = std::max(top, o.level + 1);
  std::vector<std::size_t> counts(top, 0);
  for (const auto& o : origins) ++counts[o.level];
  return counts;
}

ImageTensor resize_bilinear(const ImageTensor& image, std::size_t out_height, std::size_t out_width) {
  if (out_height == 0 || out_width == 0) throw ContractError("resize_bilinear: empty output size");
  ImageTensor out(out_height, out_width, image.channels);
  const double sy = static_cast<double>(image.height) / static_cast<double>(out_height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(out_width);

  struct Tap {
    std::size_t lo, hi;
    double w_hi;
  };
  const auto taps = [](std::size_t n_out, std::size_t n_in, double scale) {
    std::vector<Tap> t(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(n_in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      const std::size_t hi = std::min(lo + 1, n_in - 1);
      t[i] = {lo, hi, src - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ty = taps(out_height, image.height, sy);
  const auto tx = taps(out_width, image.width, sx);
  for (std::size_t y = 0; y < out_height; ++y) {
    for (std::size_t x = 0; x < out_width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = image.at(ty[y].lo, tx[x].lo, c) * (1.0 - tx[x].w_hi) + image.at(ty[y].lo, tx[x].hi, c) * tx[x].w_hi;
        const double bottom = image.at(ty[y].hi, tx[x].lo, c) * (1.0 - tx[x].w_hi) + image.at(ty[y].hi, tx[x].hi, c) * tx[x].w_hi;
        out.at(y, x, c) = top * (1.0 - ty[y].w_hi) + bottom * ty[y].w_hi;
      }
    }
  }
  return out;
}

namespace {

std::size_t level_extent(std::size_t size, double ratio, std::size_t level) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(size) / std::pow(ratio, static_cast<double>(level)) + 1e-9));
}

std::size_t windows(std::size_t extent, std::size_t window, std::size_t stride) {
  return extent < window ? 0 : (extent - window) / stride + 1;
}

}  // namespace

Pyramid build_pyramid(const ImageTensor& image, const PatchGridConfig& cfg) {
  cfg.validate();
  if (image.height == 0 || image.width == 0 || image.channels == 0) throw ContractError("build_pyramid: empty image");
  Pyramid pyramid;
  ImageTensor current = image;
  for (std::size_t r = 0; r < cfg.levels; ++r) {
    const std::size_t h = level_extent(image.height, cfg.ratio, r);
    const std::size_t w = level_extent(image.width, cfg.ratio, r);
    if (h < cfg.patch_height || w < cfg.patch_width || h == 0 || w == 0) {
      // Every further level is smaller still.
      pyramid.dropped_levels += cfg.levels - r;
      break;
    }
    if (r > 0) current = resize_bilinear(current, h, w);
    pyramid.images.push_back(current);
    pyramid.level_of.push_back(r);
  }
  if (pyramid.images.empty()) {
    throw ContractError("build_pyramid: every level is smaller than the " + std::to_string(cfg.patch_height) + "x" +
                        std::to_string(cfg.patch_width) + " patch");
  }
  return pyramid;
}

PatchSet extract_patches(const Pyramid& pyramid, const PatchGridConfig& cfg) {
  cfg.validate();
  if (pyramid.images.empty()) throw ContractError("extract_patches: empty pyramid");
  const std::size_t channels = pyramid.images.front().channels;
  const std::size_t ph = cfg.patch_height, pw = cfg.patch_width;

  std::size_t total = 0;
  for (const auto& img : pyramid.images) total += windows(img.height, ph, cfg.stride) * windows(img.width, pw, cfg.stride);

  PatchSet set;
  set.patches = Tensor(Shape{total, ph, pw, channels});
  set.origins.reserve(total);
  set.source_height = pyramid.images.front().height;
  set.source_width = pyramid.images.front().width;
  set.stride = cfg.stride;
  set.ratio = cfg.ratio;

  double* dst = set.patches.data();
  for (std::size_t k = 0; k < pyramid.images.size(); ++k) {
    const ImageTensor& img = pyramid.images[k];
    const std::size_t rows = windows(img.height, ph, cfg.stride);
    const std::size_t cols = windows(img.width, pw, cfg.stride);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t y = 0; y < ph; ++y) {
          const double* src = img.pixels.data() + ((r * cfg.stride + y) * img.width + c * cfg.stride) * channels;
          dst = std::copy_n(src, pw * channels, dst);
        }
        set.origins.push_back({pyramid.level_of[k], r, c});
      }
    }
  }
  return set;
}

std::size_t expected_patch_count(std::size_t height, std::size_t width, const PatchGridConfig& cfg) {
  cfg.validate();
  std::size_t total = 0;
  for (std::size_t r = 0; r < cfg.levels; ++r) {
    const std::size_t h = level_extent(height, cfg.ratio, r);
    const std::size_t w = level_extent(width, cfg.ratio, r);
    if (h < cfg.patch_height || w < cfg.patch_width) break;
    total += windows(h, cfg.patch_height, cfg.stride) * windows(w, cfg.patch_width, cfg.stride);
  }
  return total;
}

std::vector<std::size_t> subsample_quotas(const std::vector<std::size_t>& per_level, std::size_t max_patches) {
  const std::size_t total = std::accumulate(per_level.begin(), per_level.end(), std::size_t{0});
  if (total <= max_patches) return per_level;

  std::vector<std::size_t> quota(per_level.size());
  std::vector<double> remainder(per_level.size());
  std::size_t assigned = 0;
  for (std::size_t l = 0; l < per_level.size(); ++l) {
    const double exact = static_cast<double>(max_patches) * static_cast<double>(per_level[l]) / static_cast<double>(total);
    quota[l] = std::min(per_level[l], static_cast<std::size_t>(std::floor(exact)));
    remainder[l] = exact - static_cast<double>(quota[l]);
    assigned += quota[l];
  }
  std::vector<std::size_t> order(per_level.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
    return a > b;  // coarsest level first on ties
  });
  while (assigned < max_patches) {
    bool progressed = false;
    for (std::size_t l : order) {
      if (assigned == max_patches) break;
      if (quota[l] < per_level[l]) {
        ++quota[l];
        ++assigned;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return quota;
}

PatchSet subsample_patches(const PatchSet& set, std::size_t max_patches, std::mt19937_64& rng) {
  if (max_patches < 1) throw ContractError("subsample_patches: max_patches must be >= 1");
  if (set.size() <= max_patches) return set;

  const auto per_level = set.count_per_level();
  const auto quota = subsample_quotas(per_level, max_patches);

  std::vector<std::size_t> keep;
  for (std::size_t level = 0; level < per_level.size(); ++level) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < set.size(); ++i)
      if (set.origins[i].level == level) members.push_back(i);
    std::sample(members.begin(), members.end(), std::back_inserter(keep), quota[level], rng);
  }
  std::sort(keep.begin(), keep.end());

  PatchSet out;
  const std::size_t ph = set.patch_height(), pw = set.patch_width(), ch = set.channels();
  const std::size_t stride = ph * pw * ch;
  out.patches = Tensor(Shape{keep.size(), ph, pw, ch});
  out.source_height = set.source_height;
  out.source_width = set.source_width;
  out.stride = set.stride;
  out.ratio = set.ratio;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    std::copy_n(set.patches.data() + keep[k] * stride, stride, out.patches.data() + k * stride);
    out.origins.push_back(set.origins[keep[k]]);
  }
  return out;
}

PatchSet image_to_patches(const ImageTensor& image, const PatchGridConfig& cfg, std::mt19937_64* rng) {
  PatchSet set = extract_patches(build_pyramid(image, cfg), cfg);
  if (cfg.max_patches && set.size() > *cfg.max_patches) {
    if (!rng) throw ContractError("image_to_patches: subsampling requested without a generator");
    set = subsample_patches(set, *cfg.max_patches, *rng);
  }
  return set;
}

}  // namespace patchpu
