#include "afenet/afsim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace afenet {

Tensor fuse_encoder_decoder(const Tensor& x_dec_next, const Tensor& x_enc,
                            const AfsimWeights& w) {
  if (!x_dec_next.defined()) return x_enc;  // deepest level: passthrough
  if (x_dec_next.rank() != 4 || x_enc.rank() != 4)
    throw std::invalid_argument("fuse_encoder_decoder: inputs must be rank-4");
  if (x_dec_next.dim(2) * 2 != x_enc.dim(2) ||
      x_dec_next.dim(3) * 2 != x_enc.dim(3))
    throw std::invalid_argument(
        "fuse_encoder_decoder: decoder feature " +
        std::to_string(x_dec_next.dim(2)) + "x" +
        std::to_string(x_dec_next.dim(3)) + " is not half of encoder " +
        std::to_string(x_enc.dim(2)) + "x" + std::to_string(x_enc.dim(3)));
  Tensor up = upsample(x_dec_next, 2, UpsampleMode::bilinear);
  Tensor cat = concat({up, x_enc}, 1);
  return conv2d(cat, w.fuse_w, w.fuse_b);
}

std::pair<Tensor, Tensor> spatial_branches(const Tensor& x_in,
                                           const AfsimWeights& w) {
  const int64_t c = x_in.dim(1);
  Tensor f_h = conv2d(x_in, w.dw5_w, w.dw5_b, 1, 2, c);
  Tensor f_l = conv2d(f_h, w.dw7_w, w.dw7_b, 1, 3, c);
  return {f_h, f_l};
}

Tensor cross_attention(const Tensor& f_fre, const Tensor& f_spa,
                       const AttentionWeights& w, int heads) {
  if (f_fre.shape() != f_spa.shape())
    throw std::invalid_argument(
        "cross_attention: frequency and spatial inputs must share a shape");
  const int64_t n = f_fre.dim(0), c = f_fre.dim(1);
  const int64_t h = f_fre.dim(2), wd = f_fre.dim(3);
  if (heads <= 0 || c % heads != 0)
    throw std::invalid_argument("cross_attention: heads=" +
                                std::to_string(heads) +
                                " does not divide channels=" +
                                std::to_string(c));
  Tensor q = conv2d(conv2d(f_fre, w.q_pw_w, w.q_pw_b), w.q_dw_w, w.q_dw_b,
                    1, 1, c);
  Tensor k = conv2d(conv2d(f_spa, w.k_pw_w, w.k_pw_b), w.k_dw_w, w.k_dw_b,
                    1, 1, c);
  Tensor v = conv2d(conv2d(f_spa, w.v_pw_w, w.v_pw_b), w.v_dw_w, w.v_dw_b,
                    1, 1, c);
  const int64_t per_head = c / heads, hw = h * wd;
  q = reshape(q, {n, heads, per_head, hw});
  k = reshape(k, {n, heads, per_head, hw});
  v = reshape(v, {n, heads, per_head, hw});
  // Channel tokens: scores are (per_head x per_head), scaled by 1/sqrt(H*W).
  Tensor scores = affine(matmul(q, transpose_last2(k)),
                         float(1.0 / std::sqrt(double(hw))), 0.0f);
  Tensor attn = softmax(scores, -1);
  Tensor out = reshape(matmul(attn, v), {n, c, h, wd});
  return conv2d(out, w.out_w, w.out_b);
}

std::pair<Tensor, Tensor> afsim_forward(const Tensor& x_raw,
                                        const Tensor& x_enc,
                                        const Tensor& x_dec_next,
                                        const AfsimWeights& w, MaskMode mode,
                                        float tau, Tensor* x_in_out,
                                        Tensor* ratios_out) {
  Tensor x_in = fuse_encoder_decoder(x_dec_next, x_enc, w);
  FreqSepResult fs = separate_frequencies(x_raw, w.freq, mode, tau);
  auto [f_h_spa, f_l_spa] = spatial_branches(x_in, w);
  Tensor f_h = cross_attention(fs.high, f_h_spa, w.high, w.head_count);
  Tensor f_l = cross_attention(fs.low, f_l_spa, w.low, w.head_count);
  if (x_in_out) *x_in_out = x_in;
  if (ratios_out) *ratios_out = fs.ratios;
  return {f_h, f_l};
}

}  // namespace afenet
