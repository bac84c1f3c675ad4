#include "patchpu/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "patchpu/errors.hpp"

namespace patchpu {

EmbedderConfig EmbedderConfig::reduced(std::size_t embedding_dim) {
  EmbedderConfig cfg;
  cfg.embedding_dim = embedding_dim;
  for (std::size_t ch : {16, 32, 64, 128}) cfg.blocks.push_back({BlockKind::Conv, ch, 3, 2, 1, 0.0, 1});
  return cfg;
}

EmbedderConfig EmbedderConfig::efficientnet(std::size_t embedding_dim) {
  EmbedderConfig cfg;
  cfg.embedding_dim = embedding_dim;
  cfg.blocks = {
      {BlockKind::Conv, 32, 3, 2, 1, 0.0, 1},     // stem
      {BlockKind::MBConv, 16, 3, 1, 1, 0.25, 1},
      {BlockKind::MBConv, 24, 3, 2, 6, 0.25, 2},
      {BlockKind::MBConv, 40, 5, 2, 6, 0.25, 2},
      {BlockKind::MBConv, 80, 3, 2, 6, 0.25, 3},
      {BlockKind::MBConv, 112, 5, 1, 6, 0.25, 3},
  };
  return cfg;
}

EmbedderConfig EmbedderConfig::preset(const std::string& name, std::size_t embedding_dim) {
  if (name == "reduced") return reduced(embedding_dim);
  if (name == "efficientnet") return efficientnet(embedding_dim);
  throw ConfigError("unknown embedder preset '" + name + "' (expected reduced or efficientnet)");
}

void EmbedderConfig::validate() const {
  if (embedding_dim == 0) throw ConfigError("embedder: embedding_dim must be positive");
  if (input_channels == 0) throw ConfigError("embedder: input_channels must be positive");
  if (blocks.empty()) throw ConfigError("embedder: at least one block is required");
  for (const auto& b : blocks) {
    if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.repeats == 0 || b.expand_ratio == 0) {
      throw ConfigError("embedder: block fields must be positive");
    }
    if (b.kernel % 2 == 0) throw ConfigError("embedder: kernels must be odd");
  }
}

std::size_t EmbedderConfig::final_channels() const { return blocks.back().out_channels; }

namespace {

std::string block_prefix(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "embedder/block%02zu/", index);
  return buf;
}

// Expands repeats into one entry per executed block, with input channels.
struct Layer {
  BlockSpec spec;
  std::size_t in_channels;
  std::size_t stride;
};

std::vector<Layer> layers_of(const EmbedderConfig& cfg) {
  std::vector<Layer> layers;
  std::size_t in = cfg.input_channels;
  for (const auto& b : cfg.blocks) {
    for (std::size_t r = 0; r < b.repeats; ++r) {
      layers.push_back({b, in, r == 0 ? b.stride : 1});
      in = b.out_channels;
    }
  }
  return layers;
}

void add_affine(ParameterStore& params, const std::string& prefix, std::size_t channels) {
  params.create(prefix + "scale", {channels}, InitKind::Ones);
  params.create(prefix + "bias", {channels}, InitKind::Zeros);
}

Var conv_affine(const Var& x, const ParameterStore& params, const std::string& prefix, std::size_t stride,
                std::size_t padding, bool depthwise) {
  const Var& w = params.at(prefix + "weight");
  Var y = depthwise ? ops::depthwise_conv2d(x, w, stride, padding) : ops::conv2d(x, w, stride, padding);
  return ops::channel_affine(y, params.at(prefix + "scale"), params.at(prefix + "bias"));
}

Var dense(const Var& x, const ParameterStore& params, const std::string& prefix) {
  return ops::add_row_bias(ops::matmul(x, params.at(prefix + "weight")), params.at(prefix + "bias"));
}

}  // namespace

void init_embedder(ParameterStore& params, const EmbedderConfig& cfg) {
  cfg.validate();
  const auto layers = layers_of(cfg);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& [spec, in, stride] = layers[i];
    const std::string p = block_prefix(i);
    const std::size_t k = spec.kernel;
    if (spec.kind == BlockKind::Conv) {
      params.create(p + "conv/weight", {spec.out_channels, in, k, k}, InitKind::VarianceScaling, in * k * k);
      add_affine(params, p + "conv/", spec.out_channels);
      continue;
    }
    const std::size_t hidden = in * spec.expand_ratio;
    if (spec.expand_ratio != 1) {
      params.create(p + "expand/weight", {hidden, in, 1, 1}, InitKind::VarianceScaling, in);
      add_affine(params, p + "expand/", hidden);
    }
    params.create(p + "depthwise/weight", {hidden, 1, k, k}, InitKind::VarianceScaling, k * k);
    add_affine(params, p + "depthwise/", hidden);
    if (spec.se_ratio > 0.0) {
      const std::size_t squeezed = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(in) * spec.se_ratio));
      params.create(p + "se_reduce/weight", {hidden, squeezed}, InitKind::VarianceScaling, hidden);
      params.create(p + "se_reduce/bias", {squeezed}, InitKind::Zeros);
      params.create(p + "se_expand/weight", {squeezed, hidden}, InitKind::VarianceScaling, squeezed);
      params.create(p + "se_expand/bias", {hidden}, InitKind::Zeros);
    }
    params.create(p + "project/weight", {spec.out_channels, hidden, 1, 1}, InitKind::VarianceScaling, hidden);
    add_affine(params, p + "project/", spec.out_channels);
  }
  const std::size_t c = cfg.final_channels();
  params.create("embedder/head/weight", {c, cfg.embedding_dim}, InitKind::VarianceScaling, c);
  params.create("embedder/head/bias", {cfg.embedding_dim}, InitKind::Zeros);
}

Var embed_patches(const Tensor& patches, const ParameterStore& params, const EmbedderConfig& cfg) {
  return embed_patches(constant(patches), params, cfg);
}

namespace {

// One patch through the network. Evaluating patches separately keeps every
// row a function of its own pixels only, down to the last bit: batched GEMM
// kernels round differently depending on where a column lands in a block.
Var embed_one(const Var& patch, const ParameterStore& params, const EmbedderConfig& cfg) {
  Var x = ops::to_channel_major(patch);
  const auto layers = layers_of(cfg);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& [spec, in, stride] = layers[i];
    const std::string p = block_prefix(i);
    const std::size_t pad = spec.kernel / 2;
    if (spec.kind == BlockKind::Conv) {
      x = ops::swish(conv_affine(x, params, p + "conv/", stride, pad, false));
      continue;
    }
    Var h = x;
    if (spec.expand_ratio != 1) h = ops::swish(conv_affine(h, params, p + "expand/", 1, 0, false));
    h = ops::swish(conv_affine(h, params, p + "depthwise/", stride, pad, true));
    if (spec.se_ratio > 0.0) {
      Var s = ops::global_avg_pool(h);
      s = ops::swish(dense(s, params, p + "se_reduce/"));
      s = ops::sigmoid(dense(s, params, p + "se_expand/"));
      h = ops::channel_gate(h, s);
    }
    h = conv_affine(h, params, p + "project/", 1, 0, false);
    x = (stride == 1 && in == spec.out_channels) ? ops::add(h, x) : h;
  }
  if (x.dim(2) == 0 || x.dim(3) == 0) throw ConfigError("embed_patches: blocks reduce the patch to an empty map");
  return dense(ops::global_avg_pool(x), params, "embedder/head/");
}

}  // namespace

Var embed_patches(const Var& patch_var, const ParameterStore& params, const EmbedderConfig& cfg) {
  const Tensor& patches = patch_var.value();
  require_rank(patches, 4, "embed_patches");
  if (patches.dim(3) != cfg.input_channels) {
    throw ConfigError("embed_patches: patches have " + std::to_string(patches.dim(3)) +
                      " channels, embedder expects " + std::to_string(cfg.input_channels));
  }
  if (patches.dim(0) == 0) throw ContractError("embed_patches: empty patch set");

  std::vector<Var> rows;
  rows.reserve(patches.dim(0));
  for (std::size_t i = 0; i < patches.dim(0); ++i) rows.push_back(embed_one(ops::slice_rows(patch_var, i, 1), params, cfg));
  return rows.size() == 1 ? rows.front() : ops::concat_rows(rows);
}

Var embed_patches(const PatchSet& set, const ParameterStore& params, const EmbedderConfig& cfg) {
  return embed_patches(set.patches, params, cfg);
}

}  // namespace patchpu
