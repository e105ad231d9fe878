#pragma once

#include <utility>

#include "afenet/tensor.hpp"

namespace afenet {

// SFM: selective feature fusion via spatial gating.
struct SfmWeights {
  Tensor gate_w, gate_b;  // 7x7 conv 2->2, padding 3
  Tensor out_w, out_b;    // 1x1 conv C->C
};

// Channel-wise average and max pools of the concatenated bands, each N x 1 x H x W.
std::pair<Tensor, Tensor> channel_pool(const Tensor& f_c);

// [G1, G2] = sigmoid(Conv7x7(Concat(u_avg, u_max))), two independent gates.
std::pair<Tensor, Tensor> spatial_gates(const Tensor& u_avg,
                                        const Tensor& u_max,
                                        const SfmWeights& w);

// X_out = Conv1x1(G1 * F_h + G2 * F_l) * X_in (multiplicative residual).
Tensor sfm_fuse(const Tensor& f_h, const Tensor& f_l, const Tensor& x_in,
                const SfmWeights& w);

}  // namespace afenet
