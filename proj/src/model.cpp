#include "patchpu/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "patchpu/errors.hpp"

namespace patchpu {

using nlohmann::json;

void ModelConfig::validate() const {
  if (labels.size() < 2) throw ConfigError("model: at least two labels are required");
  grid.validate();
  embedder.validate();
  head().validate();
}

json to_json(const PatchGridConfig& cfg) {
  json j{{"levels", cfg.levels},
         {"ratio", cfg.ratio},
         {"patch_height", cfg.patch_height},
         {"patch_width", cfg.patch_width},
         {"stride", cfg.stride}};
  j["max_patches"] = cfg.max_patches ? json(*cfg.max_patches) : json(nullptr);
  return j;
}

PatchGridConfig grid_from_json(const json& j) {
  PatchGridConfig cfg;
  cfg.levels = j.value("levels", cfg.levels);
  cfg.ratio = j.value("ratio", cfg.ratio);
  const std::size_t size = j.value("patch_size", cfg.patch_height);
  cfg.patch_height = j.value("patch_height", size);
  cfg.patch_width = j.value("patch_width", size);
  cfg.stride = j.value("stride", cfg.stride);
  if (j.contains("max_patches") && !j.at("max_patches").is_null()) cfg.max_patches = j.at("max_patches").get<std::size_t>();
  cfg.validate();
  return cfg;
}

namespace {

const char* kind_name(BlockKind k) { return k == BlockKind::Conv ? "conv" : "mbconv"; }

BlockKind kind_from(const std::string& s) {
  if (s == "conv") return BlockKind::Conv;
  if (s == "mbconv") return BlockKind::MBConv;
  throw ConfigError("unknown block kind '" + s + "'");
}

}  // namespace

json to_json(const EmbedderConfig& cfg) {
  json blocks = json::array();
  for (const auto& b : cfg.blocks) {
    blocks.push_back({{"kind", kind_name(b.kind)},
                      {"out_channels", b.out_channels},
                      {"kernel", b.kernel},
                      {"stride", b.stride},
                      {"expand_ratio", b.expand_ratio},
                      {"se_ratio", b.se_ratio},
                      {"repeats", b.repeats}});
  }
  return {{"embedding_dim", cfg.embedding_dim}, {"input_channels", cfg.input_channels}, {"blocks", blocks}};
}

EmbedderConfig embedder_from_json(const json& j) {
  const std::size_t dim = j.value("embedding_dim", std::size_t{256});
  EmbedderConfig cfg = EmbedderConfig::preset(j.value("preset", std::string("reduced")), dim);
  cfg.input_channels = j.value("input_channels", cfg.input_channels);
  if (j.contains("blocks")) {
    cfg.blocks.clear();
    for (const auto& b : j.at("blocks")) {
      BlockSpec spec;
      spec.kind = kind_from(b.value("kind", std::string("conv")));
      spec.out_channels = b.at("out_channels").get<std::size_t>();
      spec.kernel = b.value("kernel", spec.kernel);
      spec.stride = b.value("stride", spec.stride);
      spec.expand_ratio = b.value("expand_ratio", spec.expand_ratio);
      spec.se_ratio = b.value("se_ratio", spec.kind == BlockKind::Conv ? 0.0 : spec.se_ratio);
      spec.repeats = b.value("repeats", spec.repeats);
      cfg.blocks.push_back(spec);
    }
  }
  cfg.validate();
  return cfg;
}

json to_json(const ModelConfig& cfg) {
  return {{"labels", cfg.labels},
          {"grid", to_json(cfg.grid)},
          {"embedder", to_json(cfg.embedder)},
          {"mlp_hidden", cfg.mlp_hidden},
          {"scaled_attention", cfg.scaled_attention}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig cfg;
  cfg.labels = j.at("labels").get<std::vector<std::string>>();
  if (j.contains("grid")) cfg.grid = grid_from_json(j.at("grid"));
  if (j.contains("embedder")) cfg.embedder = embedder_from_json(j.at("embedder"));
  cfg.mlp_hidden = j.value("mlp_hidden", cfg.mlp_hidden);
  cfg.scaled_attention = j.value("scaled_attention", cfg.scaled_attention);
  cfg.validate();
  return cfg;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), params_(seed) {
  cfg_.validate();
  init_embedder(params_, cfg_.embedder);
  init_head(params_, cfg_.head());
}

Model::Model(ModelConfig cfg, ParameterStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  // Every expected parameter must be present with the expected shape.
  ParameterStore reference(params_.seed());
  init_embedder(reference, cfg_.embedder);
  init_head(reference, cfg_.head());
  for (const auto& [path, var] : reference.entries()) {
    if (!params_.contains(path)) throw ConfigError("checkpoint lacks parameter '" + path + "'");
    require_same_shape(var.value(), params_.at(path).value(), path.c_str());
  }
  if (reference.size() != params_.size()) throw ConfigError("checkpoint has parameters the model does not use");
}

std::size_t Model::label_index(const std::string& name) const {
  const auto it = std::find(cfg_.labels.begin(), cfg_.labels.end(), name);
  if (it == cfg_.labels.end()) {
    std::string known;
    for (const auto& l : cfg_.labels) known += (known.empty() ? "" : ", ") + l;
    throw LookupError("unknown label '" + name + "' (available: " + known + ")");
  }
  return static_cast<std::size_t>(it - cfg_.labels.begin());
}

BatchForward Model::forward(const std::vector<PatchSet>& images) const {
  if (images.empty()) throw ContractError("Model::forward: empty batch");
  const Shape patch_shape(images.front().patches.shape().begin() + 1, images.front().patches.shape().end());
  std::size_t total = 0;
  for (const auto& set : images) {
    if (set.size() == 0) throw ContractError("Model::forward: image without patches");
    if (!std::equal(patch_shape.begin(), patch_shape.end(), set.patches.shape().begin() + 1)) {
      throw ShapeError("Model::forward: patch shapes differ across the batch");
    }
    total += set.size();
  }
  Shape all_shape = patch_shape;
  all_shape.insert(all_shape.begin(), total);
  Tensor all(all_shape);
  double* dst = all.data();
  for (const auto& set : images) dst = std::copy_n(set.patches.data(), set.patches.size(), dst);

  const Var embeddings = embed_patches(all, params_, cfg_.embedder);
  const HeadConfig head = cfg_.head();
  BatchForward out;
  std::vector<Var> rows;
  std::size_t offset = 0;
  for (const auto& set : images) {
    HeadOutput h = run_head(ops::slice_rows(embeddings, offset, set.size()), params_, head);
    offset += set.size();
    rows.push_back(ops::reshape(h.predictions, Shape{1, head.num_labels}));
    out.heads.push_back(std::move(h));
  }
  out.predictions = ops::concat_rows(rows);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kBlobName = "params.bin";

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  else return __builtin_bswap64(v);
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json params = json::array();
  std::size_t offset = 0;
  std::ofstream blob(dir / kBlobName, std::ios::binary);
  if (!blob) throw IoError("cannot write checkpoint blob in '" + dir.string() + "'");
  for (const auto& [path, var] : model.params().entries()) {
    const Tensor& t = var.value();
    params.push_back({{"path", path}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    for (double v : t.values()) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
      blob.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
    offset += t.size();
  }
  if (!blob) throw IoError("failed writing checkpoint blob");
  const json manifest{{"format", "patchpu-checkpoint"},
                      {"version", 1},
                      {"dtype", "float64"},
                      {"byte_order", "little"},
                      {"rng_seed", model.params().seed()},
                      {"model", to_json(model.config())},
                      {"blob", kBlobName},
                      {"parameters", params}};
  std::ofstream out(dir / kManifestName);
  if (!out) throw IoError("cannot write checkpoint manifest in '" + dir.string() + "'");
  out << manifest.dump(1) << '\n';
}

Model load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw IoError("no checkpoint manifest in '" + dir.string() + "'");
  const json manifest = json::parse(in);
  if (manifest.value("dtype", std::string()) != "float64") throw IoError("unsupported checkpoint dtype");

  std::ifstream blob(dir / manifest.value("blob", std::string(kBlobName)), std::ios::binary);
  if (!blob) throw IoError("checkpoint blob missing in '" + dir.string() + "'");
  ParameterStore params(manifest.at("rng_seed").get<std::uint64_t>());
  for (const auto& entry : manifest.at("parameters")) {
    const auto path = entry.at("path").get<std::string>();
    Tensor t(entry.at("shape").get<Shape>());
    blob.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::size_t>() * sizeof(double)));
    for (double& v : t.values()) {
      std::uint64_t bits = 0;
      blob.read(reinterpret_cast<char*>(&bits), sizeof(bits));
      v = std::bit_cast<double>(to_little(bits));
    }
    if (!blob) throw IoError("checkpoint blob truncated at parameter '" + path + "'");
    params.entries().emplace(path, parameter(std::move(t)));
  }
  return Model(model_from_json(manifest.at("model")), std::move(params));
}

}  // namespace patchpu
