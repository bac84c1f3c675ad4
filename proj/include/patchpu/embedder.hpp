#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "patchpu/autodiff.hpp"
#include "patchpu/patches.hpp"

namespace patchpu {

enum class BlockKind {
  Conv,    // k x k convolution -> per-channel scale/bias -> swish
  MBConv,  // inverted bottleneck: expand -> depthwise -> squeeze-excite -> project
};

struct BlockSpec {
  BlockKind kind = BlockKind::Conv;
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t expand_ratio = 1;  // MBConv only
  double se_ratio = 0.25;        // MBConv only; 0 disables squeeze-excite
  std::size_t repeats = 1;       // repeats after the first use stride 1
};

struct EmbedderConfig {
  std::size_t embedding_dim = 256;
  std::size_t input_channels = 3;
  std::vector<BlockSpec> blocks;

  /// Four stride-2 conv blocks 16 -> 32 -> 64 -> 128.
  static EmbedderConfig reduced(std::size_t embedding_dim = 256);
  /// Stem plus the first five EfficientNet-B0 stages.
  static EmbedderConfig efficientnet(std::size_t embedding_dim = 256);
  static EmbedderConfig preset(const std::string& name, std::size_t embedding_dim);

  void validate() const;
  std::size_t final_channels() const;
};

/// Creates every embedder parameter under the "embedder/" prefix.
void init_embedder(ParameterStore& params, const EmbedderConfig& cfg);

/// Embeds a [m, h, w, C] patch tensor into an [m, F] matrix. Every patch goes
/// through the same weights independently of the others.
Var embed_patches(const Tensor& patches, const ParameterStore& params, const EmbedderConfig& cfg);
/// Same, differentiable with respect to the patch pixels as well.
Var embed_patches(const Var& patches, const ParameterStore& params, const EmbedderConfig& cfg);
Var embed_patches(const PatchSet& set, const ParameterStore& params, const EmbedderConfig& cfg);

}  // namespace patchpu
