#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "afenet/afsim.hpp"
#include "afenet/sfm.hpp"
#include "afenet/spectral.hpp"
#include "afenet/tensor.hpp"

namespace afenet {

struct ModelConfig {
  int num_classes = 5;
  std::array<int, 4> stage_channels{64, 128, 256, 512};
  float width_multiplier = 0.125f;  // desk default: channels 8/16/32/64
  std::array<int, 4> encoder_blocks{2, 2, 2, 2};
  std::array<int, 4> tb_depth{1, 1, 1, 1};  // transformer blocks per level
  std::array<int, 4> heads{2, 2, 2, 2};
  int ffn_expansion = 2;
  MaskMode mask_mode = MaskMode::soft;
  float mask_tau = 1.0f;
  int input_channels = 3;
  // SFM fusion starts near pass-through (gate bias 1, down-scaled mix), so
  // the multiplicative decoder cascade stays bounded at init while every
  // branch still receives gradient. false = plain He init everywhere.
  bool identity_init = true;

  // Channel count at decoder level 1..4 after the width multiplier.
  int channels(int level) const;
  void validate() const;

  static ModelConfig desk();
  static ModelConfig full_size();
};

// Conv (biasless) followed by a per-channel norm with affine parameters.
struct ConvNorm {
  Tensor conv_w;
  Tensor norm_g, norm_b;
};

struct BasicBlock {
  ConvNorm c1, c2;
  ConvNorm down;  // 1x1 stride-2 projection; undefined for identity shortcuts
  int stride = 1;
};

struct EncoderWeights {
  ConvNorm stem;  // 7x7 stride 2, then 3x3 stride-2 max pool
  std::array<std::vector<BasicBlock>, 4> stages;
};

struct EncoderFeatures {
  std::array<Tensor, 4> level;  // strides 4, 8, 16, 32
};

// Restormer-style block: channel attention + gated depthwise FFN, both
// residual around per-channel norms.
struct TransformerBlockWeights {
  Tensor norm1_g, norm1_b;
  Tensor qkv_pw_w, qkv_pw_b;  // 1x1 conv C -> 3C
  Tensor qkv_dw_w, qkv_dw_b;  // depthwise 3x3 over 3C
  Tensor attn_out_w, attn_out_b;
  Tensor norm2_g, norm2_b;
  Tensor ffn_pw1_w, ffn_pw1_b;  // 1x1 conv C -> 2eC (two gating halves)
  Tensor ffn_dw_w, ffn_dw_b;    // depthwise 3x3 over 2eC
  Tensor ffn_pw2_w, ffn_pw2_b;  // 1x1 conv eC -> C
};

struct DecoderLevelWeights {
  AfsimWeights afsim;
  SfmWeights sfm;
  std::vector<TransformerBlockWeights> tbs;
};

struct ModelWeights {
  EncoderWeights encoder;
  std::array<DecoderLevelWeights, 4> decoder;  // [0] = level 1 ... [3] = level 4
  Tensor head_w, head_b;  // 1x1 conv to num_classes
};

ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed);

// Visits every parameter as (canonical name, tensor). Order is a fixed
// structural traversal; checkpoints sort by name on disk.
void visit_params(ModelWeights& w,
                  const std::function<void(const std::string&, Tensor&)>& fn);
void visit_params(const ModelWeights& w,
                  const std::function<void(const std::string&, const Tensor&)>& fn);

EncoderFeatures encoder_forward(const Tensor& image, const EncoderWeights& w);

Tensor transformer_block(const Tensor& x, const TransformerBlockWeights& w,
                         int heads);

// Full pipeline: encoder, level-4..1 AFEB+TB decoder, segmentation head.
// ratios_out, when given, receives the per-level AWM window ratios (N,2).
Tensor model_forward(const Tensor& image, const ModelWeights& w,
                     const ModelConfig& cfg,
                     std::array<Tensor, 4>* ratios_out = nullptr);

// Analytic accounting. FLOPs are 2 x multiply-accumulates for convolutions,
// linears and matmuls; each 2D FFT costs 5*H*W*log2(H*W) per channel per
// direction. Elementwise work, norms and pooling are excluded.
int64_t count_params(const ModelConfig& cfg);
int64_t count_flops(const ModelConfig& cfg, int64_t height, int64_t width);

// Checkpoint container: a named tensor table. Model state, config snapshot
// (as "__config__.*" entries), the step counter ("__step__") and optimizer
// moments ("__opt__.*") all live in the same table.
struct Checkpoint {
  std::map<std::string, Tensor> entries;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint pack_model(const ModelWeights& w, const ModelConfig& cfg,
                      int64_t step);
// Restores config + weights (+ step). Throws on missing or misshapen entries.
void unpack_model(const Checkpoint& ck, ModelWeights& w, ModelConfig& cfg,
                  int64_t& step);

}  // namespace afenet
