#include "afenet/sfm.hpp"

#include <stdexcept>

namespace afenet {

std::pair<Tensor, Tensor> channel_pool(const Tensor& f_c) {
  return {pool(f_c, PoolKind::channel_avg), pool(f_c, PoolKind::channel_max)};
}

std::pair<Tensor, Tensor> spatial_gates(const Tensor& u_avg,
                                        const Tensor& u_max,
                                        const SfmWeights& w) {
  Tensor gates = sigmoid(
      conv2d(concat({u_avg, u_max}, 1), w.gate_w, w.gate_b, 1, 3));
  return {slice(gates, 1, 0, 1), slice(gates, 1, 1, 1)};
}

Tensor sfm_fuse(const Tensor& f_h, const Tensor& f_l, const Tensor& x_in,
                const SfmWeights& w) {
  if (f_h.shape() != f_l.shape() || f_h.shape() != x_in.shape())
    throw std::invalid_argument(
        "sfm_fuse: F_h, F_l and X_in must share a shape");
  Tensor f_c = concat({f_h, f_l}, 1);
  auto [u_avg, u_max] = channel_pool(f_c);
  auto [g1, g2] = spatial_gates(u_avg, u_max, w);
  Tensor mixed = add(mul(g1, f_h), mul(g2, f_l));
  Tensor f_hat = conv2d(mixed, w.out_w, w.out_b);
  return mul(f_hat, x_in);
}

}  // namespace afenet
