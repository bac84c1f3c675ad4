#include "patchpu/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "patchpu/errors.hpp"
#include "patchpu/seeding.hpp"

namespace patchpu {

using nlohmann::json;

Tensor MultiLabelDataset::truth_matrix() const {
  Tensor t(Shape{items.size(), label_names.size()});
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::size_t l = 0; l < label_names.size(); ++l) t.at(i, l) = items[i].y.at(l);
  return t;
}

void MultiLabelDataset::validate() const {
  std::set<std::string> names(label_names.begin(), label_names.end());
  if (names.size() != label_names.size()) throw ContractError("dataset label names are not unique");
  for (const auto& item : items) {
    if (item.y.size() != label_names.size()) throw ShapeError("item '" + item.image + "' has a wrong-length label vector");
    if (std::none_of(item.y.begin(), item.y.end(), [](double v) { return v == 1.0; })) {
      throw ContractError("item '" + item.image + "' has no positive label");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic generation

namespace {

constexpr std::array<std::array<double, 3>, 8> kPalette{{
    {0.90, 0.10, 0.10},  // red
    {0.10, 0.80, 0.20},  // green
    {0.15, 0.30, 0.95},  // blue
    {0.95, 0.90, 0.10},  // yellow
    {0.90, 0.20, 0.85},  // magenta
    {0.10, 0.85, 0.90},  // cyan
    {1.00, 0.55, 0.05},  // orange
    {0.95, 0.95, 0.95},  // white
}};

constexpr std::array<const char*, kShapeKinds> kShapeNames{"disk", "square", "triangle", "cross",
                                                           "ring", "diamond", "hbar", "vbar"};
constexpr std::array<const char*, 8> kColorNames{"red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"};

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return mix_seeds(a, b); }

std::uint64_t split_salt(const std::string& split) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : split) h = (h ^ c) * 1099511628211ULL;
  return h;
}

// True when (dy, dx), relative to the object centre, lies inside the shape.
bool inside(ShapeKind shape, double dy, double dx, double r) {
  const double ay = std::abs(dy), ax = std::abs(dx);
  switch (shape) {
    case ShapeKind::Disk: return dy * dy + dx * dx <= r * r;
    case ShapeKind::Square: return ay <= 0.8 * r && ax <= 0.8 * r;
    case ShapeKind::Triangle: {
      // apex up, base at dy = 0.8r
      if (dy < -r || dy > 0.8 * r) return false;
      const double half_width = (dy + r) / 1.8;
      return ax <= half_width;
    }
    case ShapeKind::Cross: return (ay <= r / 3.0 && ax <= r) || (ax <= r / 3.0 && ay <= r);
    case ShapeKind::Ring: {
      const double d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case ShapeKind::Diamond: return ay + ax <= r;
    case ShapeKind::HorizontalBar: return ay <= 0.35 * r && ax <= r;
    case ShapeKind::VerticalBar: return ax <= 0.35 * r && ay <= r;
  }
  return false;
}

}  // namespace

void SyntheticConfig::validate() const {
  if (num_labels < 2) throw ConfigError("synthetic: at least two labels are required");
  if (cell_size == 0 || canvas_size < cell_size) throw ConfigError("synthetic: canvas must hold at least one cell");
  if (min_shapes < 1 || min_shapes > max_shapes) throw ConfigError("synthetic: need 1 <= min_shapes <= max_shapes");
  const std::size_t cells = (canvas_size / cell_size) * (canvas_size / cell_size);
  if (max_shapes > cells) {
    throw ConfigError("synthetic: " + std::to_string(max_shapes) + " shapes cannot be packed without overlap into " +
                      std::to_string(cells) + " cells");
  }
  if (max_shapes > num_labels) throw ConfigError("synthetic: max_shapes exceeds the number of distinct labels");
  if (!(min_radius > 0.0) || min_radius > max_radius || 2.0 * max_radius > static_cast<double>(cell_size)) {
    throw ConfigError("synthetic: radii must satisfy 0 < min <= max <= cell_size / 2");
  }
  if (num_labels > kShapeKinds * kPalette.size() && visuals.empty()) {
    throw ConfigError("synthetic: not enough distinct default visuals for the label count");
  }
  if (!visuals.empty()) {
    if (visuals.size() != num_labels) throw ConfigError("synthetic: visuals must list one entry per label");
    for (std::size_t a = 0; a < visuals.size(); ++a)
      for (std::size_t b = a + 1; b < visuals.size(); ++b)
        if (visuals[a].shape == visuals[b].shape && visuals[a].color == visuals[b].color &&
            visuals[a].textured == visuals[b].textured) {
          throw ConfigError("synthetic: labels " + std::to_string(a) + " and " + std::to_string(b) +
                            " share a visual");
        }
  }
}

std::vector<LabelVisual> SyntheticConfig::resolved_visuals() const {
  if (!visuals.empty()) return visuals;
  std::vector<LabelVisual> out;
  for (std::size_t l = 0; l < num_labels; ++l) {
    out.push_back({static_cast<ShapeKind>(l % kShapeKinds), kPalette[(l + l / kShapeKinds) % kPalette.size()], textured});
  }
  return out;
}

std::vector<std::string> SyntheticConfig::label_names() const {
  std::vector<std::string> names;
  const auto vis = resolved_visuals();
  for (std::size_t l = 0; l < num_labels; ++l) {
    const auto color = std::find(kPalette.begin(), kPalette.end(), vis[l].color);
    std::string name = kShapeNames[static_cast<std::size_t>(vis[l].shape)];
    name += "_";
    name += color != kPalette.end() ? kColorNames[static_cast<std::size_t>(color - kPalette.begin())] : "custom";
    names.push_back(name + "_" + std::to_string(l));
  }
  return names;
}

SyntheticConfig synthetic_config_from_json(const json& j) {
  static const std::set<std::string> known{"num_labels", "train_images", "val_images", "canvas_size",
                                           "cell_size",  "shapes_per_image_range", "seed", "background",
                                           "noise",      "radius_range", "textured"};
  if (!j.is_object()) throw ConfigError("synthetic config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown synthetic config key '" + key + "'");
  }
  SyntheticConfig cfg;
  try {
    cfg.num_labels = j.value("num_labels", cfg.num_labels);
    cfg.train_images = j.value("train_images", cfg.train_images);
    cfg.val_images = j.value("val_images", cfg.val_images);
    cfg.canvas_size = j.value("canvas_size", cfg.canvas_size);
    cfg.cell_size = j.value("cell_size", cfg.cell_size);
    if (j.contains("shapes_per_image_range")) {
      const auto& r = j.at("shapes_per_image_range");
      cfg.min_shapes = r.at(0).get<std::size_t>();
      cfg.max_shapes = r.at(1).get<std::size_t>();
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.background = j.value("background", cfg.background);
    cfg.noise = j.value("noise", cfg.noise);
    if (j.contains("radius_range")) {
      const auto& r = j.at("radius_range");
      cfg.min_radius = r.at(0).get<double>();
      cfg.max_radius = r.at(1).get<double>();
    }
    cfg.textured = j.value("textured", cfg.textured);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed synthetic config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

json to_json(const SyntheticConfig& cfg) {
  return {{"num_labels", cfg.num_labels},
          {"train_images", cfg.train_images},
          {"val_images", cfg.val_images},
          {"canvas_size", cfg.canvas_size},
          {"cell_size", cfg.cell_size},
          {"shapes_per_image_range", {cfg.min_shapes, cfg.max_shapes}},
          {"seed", cfg.seed},
          {"background", cfg.background},
          {"noise", cfg.noise},
          {"radius_range", {cfg.min_radius, cfg.max_radius}},
          {"textured", cfg.textured}};
}

MultiLabelDataset generate_synthetic(const SyntheticConfig& cfg, const std::string& split, std::size_t count) {
  cfg.validate();
  const auto visuals = cfg.resolved_visuals();
  const std::size_t side = cfg.canvas_size;
  const std::size_t grid = side / cfg.cell_size;
  const double cell = static_cast<double>(cfg.cell_size);

  MultiLabelDataset ds;
  ds.label_names = cfg.label_names();
  ds.split = split;
  ds.items.reserve(count);
  const std::uint64_t salt = mix(cfg.seed, split_salt(split));

  for (std::size_t n = 0; n < count; ++n) {
    std::mt19937_64 rng(mix(salt, n));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    DatasetItem item;
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.png", n);
    item.image = name;
    item.y.assign(cfg.num_labels, 0.0);

    const std::size_t k = std::uniform_int_distribution<std::size_t>(cfg.min_shapes, cfg.max_shapes)(rng);
    std::vector<std::size_t> labels(cfg.num_labels), cells(grid * grid);
    std::iota(labels.begin(), labels.end(), std::size_t{0});
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    std::shuffle(labels.begin(), labels.end(), rng);
    std::shuffle(cells.begin(), cells.end(), rng);

    ImageTensor canvas(side, side, 3, cfg.background);
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t label = labels[s];
      const double r = cfg.min_radius + (cfg.max_radius - cfg.min_radius) * unit(rng);
      const double cy0 = static_cast<double>(cells[s] / grid) * cell;
      const double cx0 = static_cast<double>(cells[s] % grid) * cell;
      const double cy = cy0 + r + (cell - 2.0 * r) * unit(rng);
      const double cx = cx0 + r + (cell - 2.0 * r) * unit(rng);
      const LabelVisual& vis = visuals[label];
      for (std::size_t y = static_cast<std::size_t>(cy0); y < static_cast<std::size_t>(cy0 + cell); ++y) {
        for (std::size_t x = static_cast<std::size_t>(cx0); x < static_cast<std::size_t>(cx0 + cell); ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          if (!inside(vis.shape, dy, dx, r)) continue;
          const double shade = vis.textured && ((x + y) / 4) % 2 ? 0.75 : 1.0;
          for (std::size_t c = 0; c < 3; ++c) canvas.at(y, x, c) = vis.color[c] * shade;
        }
      }
      item.y[label] = 1.0;
      item.objects.push_back({label, PixelRect{cy - r, cx - r, cy + r, cx + r}});
    }
    if (cfg.noise > 0.0) {
      std::uniform_real_distribution<double> jitter(-cfg.noise, cfg.noise);
      for (double& v : canvas.pixels) v = std::clamp(v + jitter(rng), 0.0, 1.0);
    }
    item.pixels = to_8bit(canvas);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

MultiLabelDataset generate_synthetic(const SyntheticConfig& cfg, const std::string& split) {
  return generate_synthetic(cfg, split, split == "val" ? cfg.val_images : cfg.train_images);
}

// ---------------------------------------------------------------------------
// Manifest I/O

std::filesystem::path write_dataset(const MultiLabelDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json items = json::array();
  for (const auto& item : dataset.items) {
    write_png(dir / item.image, item.pixels);
    json positives = json::array();
    for (std::size_t l = 0; l < dataset.num_labels(); ++l)
      if (item.y[l] == 1.0) positives.push_back(dataset.label_names[l]);
    json entry{{"image", item.image}, {"positives", positives}};
    if (!item.objects.empty()) {
      json objects = json::array();
      for (const auto& o : item.objects) {
        objects.push_back({{"label", dataset.label_names[o.label]}, {"box", {o.box.y0, o.box.x0, o.box.y1, o.box.x1}}});
      }
      entry["objects"] = objects;
    }
    items.push_back(std::move(entry));
  }
  const json manifest{{"labels", dataset.label_names}, {"items", items}, {"split", dataset.split}};
  const auto path = dir / "manifest.json";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << manifest.dump(1) << '\n';
  return path;
}

MultiLabelDataset load_annotations(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest '" + manifest_path.string() + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("cannot parse manifest '" + manifest_path.string() + "': " + e.what());
  }
  if (!manifest.contains("labels") || !manifest.contains("items")) {
    throw IoError("manifest '" + manifest_path.string() + "' needs 'labels' and 'items'");
  }

  MultiLabelDataset ds;
  ds.root = manifest_path.parent_path();
  ds.label_names = manifest.at("labels").get<std::vector<std::string>>();
  ds.split = manifest.value("split", std::string("train"));
  std::map<std::string, std::size_t> index;
  for (std::size_t l = 0; l < ds.label_names.size(); ++l) {
    if (!index.emplace(ds.label_names[l], l).second) {
      throw ContractError("manifest label '" + ds.label_names[l] + "' is listed twice");
    }
  }
  const auto lookup = [&](const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) {
      std::string known;
      for (const auto& n : ds.label_names) known += (known.empty() ? "" : ", ") + n;
      throw LookupError("unknown label '" + name + "' (known labels: " + known + ")");
    }
    return it->second;
  };

  for (const auto& entry : manifest.at("items")) {
    DatasetItem item;
    item.image = entry.at("image").get<std::string>();
    item.y.assign(ds.label_names.size(), 0.0);
    for (const auto& name : entry.at("positives")) item.y[lookup(name.get<std::string>())] = 1.0;
    if (std::none_of(item.y.begin(), item.y.end(), [](double v) { return v == 1.0; })) {
      throw ContractError("manifest item '" + item.image + "' has no positive label");
    }
    if (entry.contains("objects")) {
      for (const auto& o : entry.at("objects")) {
        const auto box = o.at("box").get<std::vector<double>>();
        if (box.size() != 4) throw IoError("object box must have 4 coordinates");
        item.objects.push_back({lookup(o.at("label").get<std::string>()), PixelRect{box[0], box[1], box[2], box[3]}});
      }
    }
    const auto image_path = ds.root / item.image;
    if (!std::filesystem::exists(image_path)) throw IoError("image file missing: " + image_path.string());
    item.pixels = read_png(image_path);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Single-positive sampling

std::vector<double> sample_single_positive(std::span<const double> y, std::mt19937_64& rng) {
  std::vector<std::size_t> positives;
  for (std::size_t l = 0; l < y.size(); ++l)
    if (y[l] == 1.0) positives.push_back(l);
  if (positives.empty()) throw ContractError("sample_single_positive: ground truth has no positive label");
  const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, positives.size() - 1)(rng);
  std::vector<double> z(y.size(), 0.0);
  z[positives[pick]] = 1.0;
  return z;
}

std::vector<std::vector<double>> sample_single_positives(const MultiLabelDataset& dataset, std::uint64_t seed) {
  std::mt19937_64 rng(mix(seed, 0x51a9e1ULL));
  std::vector<std::vector<double>> out;
  out.reserve(dataset.size());
  for (const auto& item : dataset.items) out.push_back(sample_single_positive(item.y, rng));
  return out;
}

double mean_labels_per_image(const MultiLabelDataset& dataset) {
  if (dataset.items.empty()) return 0.0;
  double total = 0.0;
  for (const auto& item : dataset.items) total += std::accumulate(item.y.begin(), item.y.end(), 0.0);
  return total / static_cast<double>(dataset.items.size());
}

}  // namespace patchpu
