#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <tuple>

#include "patchpu/errors.hpp"
#include "patchpu/patches.hpp"

using namespace patchpu;

namespace {

ImageTensor random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageTensor img(h, w, c);
  for (double& v : img.pixels) v = u(rng);
  return img;
}

PatchGridConfig grid(std::size_t levels, std::size_t size = 64) {
  PatchGridConfig cfg;
  cfg.levels = levels;
  cfg.patch_height = cfg.patch_width = cfg.stride = size;
  return cfg;
}

// Independent bilinear oracle: sample the source at the centre of each output
// pixel's footprint, clamping to the border.
double bilinear_oracle(const ImageTensor& img, std::size_t oh, std::size_t ow, std::size_t y, std::size_t x,
                       std::size_t c) {
  auto coord = [](std::size_t i, std::size_t n_in, std::size_t n_out) {
    double s = (i + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    return std::min(std::max(s, 0.0), static_cast<double>(n_in - 1));
  };
  const double sy = coord(y, img.height, oh), sx = coord(x, img.width, ow);
  const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
         fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
}

}  // namespace

TEST_CASE("pyramid of a 640x640 image has sizes 640, 320, 160") {
  const Pyramid p = build_pyramid(ImageTensor(640, 640, 3, 0.2), grid(3));
  REQUIRE(p.images.size() == 3);
  CHECK(p.images[0].height == 640);
  CHECK(p.images[1].height == 320);
  CHECK(p.images[2].height == 160);
  CHECK(p.images[2].width == 160);
  CHECK(p.dropped_levels == 0);
}

TEST_CASE("constant image stays constant at every level") {
  const Pyramid p = build_pyramid(ImageTensor(200, 150, 3, 0.37), grid(3, 32));
  for (const auto& level : p.images)
    for (double v : level.pixels) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
}

TEST_CASE("2x2 checkerboard halves to 0.5") {
  ImageTensor img(2, 2, 1);
  img.pixels = {0.0, 1.0, 1.0, 0.0};
  const ImageTensor out = resize_bilinear(img, 1, 1);
  CHECK(out.pixels.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(bilinear_oracle(img, 1, 1, 0, 0, 0) == doctest::Approx(0.5));
}

TEST_CASE("bilinear resize agrees with the independent oracle") {
  const ImageTensor img = random_image(37, 23, 2, 4);
  for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{18, 11}, {9, 5}, {40, 30}}) {
    const ImageTensor out = resize_bilinear(img, oh, ow);
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        for (std::size_t c = 0; c < 2; ++c) CHECK(out.at(y, x, c) == doctest::Approx(bilinear_oracle(img, oh, ow, y, x, c)).epsilon(1e-13));
  }
}

TEST_CASE("levels smaller than the patch are dropped and counted") {
  const Pyramid p = build_pyramid(ImageTensor(128, 128, 3), grid(3));
  CHECK(p.images.size() == 2);
  CHECK(p.dropped_levels == 1);
  CHECK_THROWS_AS(build_pyramid(ImageTensor(32, 32, 3), grid(3)), ContractError);
}

TEST_CASE("640x640 with three levels gives 100 + 25 + 4 = 129 patches") {
  const PatchSet set = extract_patches(build_pyramid(ImageTensor(640, 640, 3), grid(3)), grid(3));
  CHECK(set.size() == 129);
  CHECK(set.count_per_level() == std::vector<std::size_t>{100, 25, 4});
  CHECK(expected_patch_count(640, 640, grid(3)) == 129);
  // Grid arithmetic oracle.
  std::size_t oracle = 0;
  for (int r = 0; r < 3; ++r) {
    const std::size_t side = 640 >> r;
    oracle += ((side - 64) / 64 + 1) * ((side - 64) / 64 + 1);
  }
  CHECK(set.size() == oracle);
}

TEST_CASE("single window and discarded remainder") {
  CHECK(image_to_patches(ImageTensor(64, 64, 3), grid(1)).size() == 1);
  const PatchSet tall = image_to_patches(ImageTensor(100, 64, 3), grid(1));
  CHECK(tall.size() == 1);
  CHECK(tall.origins[0] == PatchOrigin{0, 0, 0});
}

TEST_CASE("patches are exact sub-windows of their pyramid level") {
  const ImageTensor img = random_image(160, 200, 3, 1);
  const PatchGridConfig cfg = grid(2, 32);
  const Pyramid p = build_pyramid(img, cfg);
  const PatchSet set = extract_patches(p, cfg);
  const std::size_t per_patch = 32 * 32 * 3;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& o = set.origins[i];
    const ImageTensor& level = p.images[o.level];
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          REQUIRE(set.patches[i * per_patch + (y * 32 + x) * 3 + c] ==
                  level.at(o.row * 32 + y, o.col * 32 + x, c));
  }
}

TEST_CASE("provenance entries are unique and patches share one shape") {
  const PatchSet set = image_to_patches(random_image(300, 260, 3, 2), grid(3, 32));
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  for (const auto& o : set.origins) seen.insert({o.level, o.row, o.col});
  CHECK(seen.size() == set.size());
  CHECK(set.patches.shape() == Shape{set.size(), 32, 32, 3});
}

TEST_CASE("shifting by one stride shifts level-0 provenance by one") {
  const ImageTensor a = random_image(128, 256, 3, 3);
  ImageTensor b(128, 192, 3);
  for (std::size_t y = 0; y < 128; ++y)
    for (std::size_t x = 0; x < 192; ++x)
      for (std::size_t c = 0; c < 3; ++c) b.at(y, x, c) = a.at(y, x + 64, c);
  const PatchSet pa = image_to_patches(a, grid(1));
  const PatchSet pb = image_to_patches(b, grid(1));
  const std::size_t per_patch = 64 * 64 * 3;
  for (std::size_t j = 0; j < pb.size(); ++j) {
    const auto ob = pb.origins[j];
    const auto it = std::find(pa.origins.begin(), pa.origins.end(), PatchOrigin{0, ob.row, ob.col + 1});
    REQUIRE(it != pa.origins.end());
    const std::size_t i = static_cast<std::size_t>(it - pa.origins.begin());
    CHECK(std::equal(pb.patches.data() + j * per_patch, pb.patches.data() + (j + 1) * per_patch,
                     pa.patches.data() + i * per_patch));
  }
}

TEST_CASE("patch count is a pure function of size and config") {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{640, 480}, {500, 375}, {128, 128}, {64, 200}}) {
    CAPTURE(h);
    CAPTURE(w);
    CHECK(image_to_patches(random_image(h, w, 1, h * w), grid(3)).size() == expected_patch_count(h, w, grid(3)));
  }
}

TEST_CASE("subsample quotas follow proportional allocation") {
  CHECK(subsample_quotas({100, 25, 4}, 65) == std::vector<std::size_t>{50, 13, 2});
  // Oracle: floor shares, leftovers to the largest remainders, coarsest first on ties.
  const std::vector<std::size_t> counts{100, 25, 4};
  std::vector<double> exact;
  std::size_t assigned = 0;
  std::vector<std::size_t> quota;
  for (std::size_t c : counts) {
    exact.push_back(65.0 * c / 129.0);
    quota.push_back(static_cast<std::size_t>(std::floor(exact.back())));
    assigned += quota.back();
  }
  while (assigned < 65) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < counts.size(); ++l) {
      const double rb = exact[best] - std::floor(exact[best]), rl = exact[l] - std::floor(exact[l]);
      if (rl >= rb) best = l;
    }
    ++quota[best];
    exact[best] = std::floor(exact[best]);
    ++assigned;
  }
  CHECK(subsample_quotas(counts, 65) == quota);
  // Ties between equal remainders go to the coarsest level.
  CHECK(subsample_quotas({2, 2}, 3) == std::vector<std::size_t>{1, 2});
}

TEST_CASE("subsampling below the cap is the identity") {
  const PatchSet set = image_to_patches(ImageTensor(640, 640, 1, 0.5), grid(3));
  std::mt19937_64 rng(1);
  const PatchSet same = subsample_patches(set, 200, rng);
  CHECK(same.size() == 129);
  CHECK(same.origins == set.origins);
}

TEST_CASE("subsampling is deterministic for a fixed seed and stratified by level") {
  const PatchSet set = image_to_patches(random_image(640, 640, 1, 8), grid(3));
  std::mt19937_64 r1(77), r2(77), r3(78);
  const PatchSet a = subsample_patches(set, 64, r1);
  const PatchSet b = subsample_patches(set, 64, r2);
  const PatchSet c = subsample_patches(set, 64, r3);
  CHECK(a.size() == 64);
  CHECK(a.origins == b.origins);
  CHECK(a.patches.storage() == b.patches.storage());
  CHECK(a.origins != c.origins);
  CHECK(a.count_per_level() == subsample_quotas({100, 25, 4}, 64));
  std::mt19937_64 r4(5);
  CHECK(subsample_patches(set, 65, r4).count_per_level() == std::vector<std::size_t>{50, 13, 2});
}

TEST_CASE("footprints project coarse patches onto level 0") {
  const PatchSet set = image_to_patches(ImageTensor(256, 256, 1), grid(3));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& o = set.origins[i];
    const PixelRect r = set.footprint(i);
    const double scale = std::pow(2.0, o.level);
    CHECK(r.y0 == o.row * 64 * scale);
    CHECK(r.x1 - r.x0 == 64 * scale);
  }
}

TEST_CASE("invalid grid configs are rejected") {
  PatchGridConfig cfg;
  cfg.levels = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = PatchGridConfig{};
  cfg.ratio = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = PatchGridConfig{};
  cfg.stride = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = PatchGridConfig{};
  cfg.max_patches = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
