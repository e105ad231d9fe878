#pragma once

#include <utility>

#include "afenet/spectral.hpp"
#include "afenet/tensor.hpp"

namespace afenet {

// Projection weights for one frequency->spatial cross-attention branch.
// Queries come from the frequency band, keys/values from the spatial path;
// each projection is a 1x1 conv followed by a depthwise 3x3 conv.
struct AttentionWeights {
  Tensor q_pw_w, q_pw_b, q_dw_w, q_dw_b;
  Tensor k_pw_w, k_pw_b, k_dw_w, k_dw_b;
  Tensor v_pw_w, v_pw_b, v_dw_w, v_dw_b;
  Tensor out_w, out_b;  // 1x1 output projection
};

// AFSIM: adaptive frequency and spatial feature interaction.
struct AfsimWeights {
  // 1x1 conv over Concat(Upsample(x_dec_next), x_enc). Left undefined at the
  // deepest level, where the encoder feature passes through unchanged.
  Tensor fuse_w, fuse_b;
  Tensor dw5_w, dw5_b;  // depthwise 5x5, padding 2
  Tensor dw7_w, dw7_b;  // depthwise 7x7, padding 3
  AttentionWeights high, low;  // branches share no weights
  FreqSepWeights freq;
  int head_count = 2;
};

// X_in = Conv1x1(Concat(Upsample2x(x_dec_next), x_enc)); if x_dec_next is
// undefined the encoder feature is returned as-is (deepest-level rule).
Tensor fuse_encoder_decoder(const Tensor& x_dec_next, const Tensor& x_enc,
                            const AfsimWeights& w);

// F_h_spa = DWConv5x5(X_in); F_l_spa = DWConv7x7(F_h_spa), sequential.
std::pair<Tensor, Tensor> spatial_branches(const Tensor& x_in,
                                           const AfsimWeights& w);

// Transposed (channel-token) cross-attention: heads split C, each token is a
// channel of length H*W, scores scaled by 1/sqrt(H*W), softmax over keys,
// then a 1x1 output projection. No residual inside.
Tensor cross_attention(const Tensor& f_fre, const Tensor& f_spa,
                       const AttentionWeights& w, int heads);

// Full module: fuse inputs, split the raw image into frequency bands, run the
// spatial branches, and cross-attend band->branch pairwise. Returns (F_h, F_l).
// x_in_out/ratios_out expose the fused feature and window ratios when the
// caller needs them (selective fusion, adaptivity probes).
std::pair<Tensor, Tensor> afsim_forward(const Tensor& x_raw,
                                        const Tensor& x_enc,
                                        const Tensor& x_dec_next,
                                        const AfsimWeights& w, MaskMode mode,
                                        float tau = 1.0f,
                                        Tensor* x_in_out = nullptr,
                                        Tensor* ratios_out = nullptr);

}  // namespace afenet
