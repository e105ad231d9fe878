#pragma once

// Frequency-domain toolkit: centered 2D FFT with autograd, the adaptive
// window-mask machinery (AWM), and FFT-based frequency separation.
//
// Spectra are stored as two float tensors (real, imaginary) with the DC bin
// at (H/2, W/2).  Transforms run in double internally; forward is
// unnormalized, inverse scales by 1/(H*W).

#include <utility>

#include "afenet/tensor.hpp"

namespace afenet {

// Log-scaled compression width d = max(2, floor(C / log2(C))); C >= 2.
int64_t compress_dim(int64_t channels);

struct Spectrum {
  Tensor real;  // (N, C, H, W)
  Tensor imag;  // (N, C, H, W)
};

Spectrum fft2d(const Tensor& x);
// Real part of the centered inverse transform.  The largest imaginary
// residue of the most recent call is kept per thread for diagnostics; it
// stays below 1e-5 when the masked spectrum is symmetric about the center.
Tensor ifft2d(const Spectrum& s);
double last_ifft_imag_residue();

enum class MaskMode { hard, soft };

struct WindowRatios {
  float r_h;  // in (0, 1)
  float r_w;
};

struct AwmWeights {
  Tensor fc1_w;  // (d, C) with d = compress_dim(C)
  Tensor fc1_b;  // (d)
  Tensor fc2_w;  // (2, d)
  Tensor fc2_b;  // (2)
};

// [r_h, r_w] = sigmoid(fc2(gelu(fc1(gap(x))))), one row per sample: (N, 2).
Tensor awm_ratios(const Tensor& x, const AwmWeights& w);

struct MaskPair {
  Tensor low;   // (H, W)
  Tensor high;  // (H, W)
  MaskMode mode = MaskMode::hard;
  float tau = 1.0f;
};

// Centered window masks for one sample.  Hard mode: half-extent
// h = clamp(floor(H/2 * r_h), 1, H/2), ones on rows [H/2-h, H/2+h), and
// high = 1 - low exactly.  Soft mode: sigmoid edges at the same boundaries
// with temperature tau, using the continuous half-extent clamp(H/2 * r_h,
// 1, H/2) so the window stays differentiable in r.
MaskPair build_masks(int64_t h, int64_t w, WindowRatios r, MaskMode mode,
                     float tau = 1.0f);

// Batched differentiable soft masks from a (N, 2) ratio tensor:
// returns {low, high}, each (N, 1, H, W), with gradients into `ratios`.
std::pair<Tensor, Tensor> soft_masks(int64_t h, int64_t w,
                                     const Tensor& ratios, float tau = 1.0f);

struct FreqSepWeights {
  Tensor align_w;  // (C, in_channels, 3, 3)
  Tensor align_b;  // (C)
  AwmWeights awm;
};

struct FreqSepResult {
  Tensor high;    // (N, C, H, W)
  Tensor low;     // (N, C, H, W)
  Tensor ratios;  // (N, 2)
};

// X' = conv3x3(x_raw); windowed split of fft2d(X') into complementary bands
// reconstructed by ifft2d.  high + low = X' up to transform round-off.
FreqSepResult separate_frequencies(const Tensor& x_raw,
                                   const FreqSepWeights& w, MaskMode mode,
                                   float tau = 1.0f);

}  // namespace afenet
