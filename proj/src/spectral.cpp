#include "afenet/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace afenet {

namespace {

using cd = std::complex<double>;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("spectral: " + msg);
}

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

thread_local double g_ifft_residue = 0.0;

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2; sign -1 forward, +1 inverse; unnormalized.
void fft_pow2(cd* a, int64_t n, int sign) {
  for (int64_t i = 1, j = 0; i < n; ++i) {
    int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int64_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    const cd step(std::cos(ang), std::sin(ang));
    for (int64_t i = 0; i < n; i += len) {
      cd w(1.0, 0.0);
      for (int64_t k = 0; k < len / 2; ++k) {
        const cd u = a[i + k];
        const cd v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= step;
      }
    }
  }
}

// Bluestein chirp-z: arbitrary length via a power-of-two convolution.
void fft_bluestein(cd* a, int64_t n, int sign) {
  int64_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  std::vector<cd> w(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) {
    const int64_t jsq = (j * j) % (2 * n);  // chirp phase has period 2n
    const double ang =
        sign * std::numbers::pi * static_cast<double>(jsq) / static_cast<double>(n);
    w[static_cast<size_t>(j)] = cd(std::cos(ang), std::sin(ang));
  }
  std::vector<cd> A(static_cast<size_t>(m), cd(0.0, 0.0));
  std::vector<cd> B(static_cast<size_t>(m), cd(0.0, 0.0));
  for (int64_t j = 0; j < n; ++j)
    A[static_cast<size_t>(j)] = a[j] * w[static_cast<size_t>(j)];
  B[0] = cd(1.0, 0.0);
  for (int64_t j = 1; j < n; ++j)
    B[static_cast<size_t>(j)] = B[static_cast<size_t>(m - j)] =
        std::conj(w[static_cast<size_t>(j)]);
  fft_pow2(A.data(), m, -1);
  fft_pow2(B.data(), m, -1);
  for (int64_t j = 0; j < m; ++j) A[static_cast<size_t>(j)] *= B[static_cast<size_t>(j)];
  fft_pow2(A.data(), m, +1);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (int64_t j = 0; j < n; ++j)
    a[j] = A[static_cast<size_t>(j)] * inv_m * w[static_cast<size_t>(j)];
}

void fft_1d(cd* a, int64_t n, int sign) {
  if (n <= 1) return;
  if (is_pow2(n))
    fft_pow2(a, n, sign);
  else
    fft_bluestein(a, n, sign);
}

// Unnormalized 2D transform of a row-major H x W buffer.
void fft_2d(std::vector<cd>& buf, int64_t h, int64_t w, int sign) {
  for (int64_t r = 0; r < h; ++r) fft_1d(buf.data() + r * w, w, sign);
  std::vector<cd> col(static_cast<size_t>(h));
  for (int64_t c = 0; c < w; ++c) {
    for (int64_t r = 0; r < h; ++r) col[static_cast<size_t>(r)] = buf[static_cast<size_t>(r * w + c)];
    fft_1d(col.data(), h, sign);
    for (int64_t r = 0; r < h; ++r) buf[static_cast<size_t>(r * w + c)] = col[static_cast<size_t>(r)];
  }
}

// fftshift index map: standard bin k -> centered position (k + n/2) % n.
int64_t to_centered(int64_t k, int64_t n) { return (k + n / 2) % n; }

void check_spatial(const Tensor& x, const char* op) {
  check(x.defined() && x.rank() == 4,
        std::string(op) + ": input must be (N,C,H,W)");
  check(x.dim(2) >= 1 && x.dim(3) >= 1,
        std::string(op) + ": spatial dims must be positive");
}

}  // namespace

int64_t compress_dim(int64_t channels) {
  check(channels >= 2, "compress_dim: C must be at least 2");
  const double d = static_cast<double>(channels) / std::log2(static_cast<double>(channels));
  return std::max<int64_t>(2, static_cast<int64_t>(std::floor(d)));
}

Spectrum fft2d(const Tensor& x) {
  check_spatial(x, "fft2d");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t HW = H * W;
  std::vector<float> re(x.vec().size());
  std::vector<float> im(x.vec().size());
  std::vector<cd> buf(static_cast<size_t>(HW));
  const float* px = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    for (int64_t i = 0; i < HW; ++i)
      buf[static_cast<size_t>(i)] = cd(px[nc * HW + i], 0.0);
    fft_2d(buf, H, W, -1);
    for (int64_t kh = 0; kh < H; ++kh)
      for (int64_t kw = 0; kw < W; ++kw) {
        const int64_t dst = nc * HW + to_centered(kh, H) * W + to_centered(kw, W);
        const cd v = buf[static_cast<size_t>(kh * W + kw)];
        re[static_cast<size_t>(dst)] = static_cast<float>(v.real());
        im[static_cast<size_t>(dst)] = static_cast<float>(v.imag());
      }
  }
  // Two output nodes share one forward transform; each adjoint is a single
  // unnormalized inverse of its own centered grad.
  auto adjoint = [N, C, H, W, HW](const Tensor& x_in, const float* g, bool imag_part) {
    std::vector<cd> b(static_cast<size_t>(HW));
    float* gx = x_in.node()->grad_buf();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      for (int64_t kh = 0; kh < H; ++kh)
        for (int64_t kw = 0; kw < W; ++kw) {
          const float gv =
              g[nc * HW + to_centered(kh, H) * W + to_centered(kw, W)];
          b[static_cast<size_t>(kh * W + kw)] =
              imag_part ? cd(0.0, gv) : cd(gv, 0.0);
        }
      fft_2d(b, H, W, +1);
      for (int64_t i = 0; i < HW; ++i)
        gx[nc * HW + i] += static_cast<float>(b[static_cast<size_t>(i)].real());
    }
  };
  Tensor real = make_op("fft2d_re", x.shape(), std::move(re), {x},
                        [x, adjoint](detail::Node& n) {
                          if (!x.requires_grad()) return;
                          adjoint(x, n.grad.data(), false);
                        });
  Tensor imag = make_op("fft2d_im", x.shape(), std::move(im), {x},
                        [x, adjoint](detail::Node& n) {
                          if (!x.requires_grad()) return;
                          adjoint(x, n.grad.data(), true);
                        });
  return {real, imag};
}

Tensor ifft2d(const Spectrum& s) {
  check_spatial(s.real, "ifft2d");
  check(s.imag.defined() && s.imag.shape() == s.real.shape(),
        "ifft2d: real/imag shape mismatch");
  const int64_t N = s.real.dim(0), C = s.real.dim(1);
  const int64_t H = s.real.dim(2), W = s.real.dim(3);
  const int64_t HW = H * W;
  std::vector<float> y(s.real.vec().size());
  std::vector<cd> buf(static_cast<size_t>(HW));
  const float* pr = s.real.data();
  const float* pi = s.imag.data();
  double residue = 0.0;
  const double scale = 1.0 / static_cast<double>(HW);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    for (int64_t kh = 0; kh < H; ++kh)
      for (int64_t kw = 0; kw < W; ++kw) {
        const int64_t src = nc * HW + to_centered(kh, H) * W + to_centered(kw, W);
        buf[static_cast<size_t>(kh * W + kw)] = cd(pr[src], pi[src]);
      }
    fft_2d(buf, H, W, +1);
    for (int64_t i = 0; i < HW; ++i) {
      const cd v = buf[static_cast<size_t>(i)] * scale;
      y[static_cast<size_t>(nc * HW + i)] = static_cast<float>(v.real());
      residue = std::max(residue, std::fabs(v.imag()));
    }
  }
  g_ifft_residue = residue;
  Tensor re = s.real, im = s.imag;
  return make_op(
      "ifft2d", s.real.shape(), std::move(y), {re, im},
      [re, im, N, C, H, W, HW, scale](detail::Node& n) {
        const bool need_re = re.requires_grad();
        const bool need_im = im.requires_grad();
        if (!need_re && !need_im) return;
        float* gr = need_re ? re.node()->grad_buf() : nullptr;
        float* gi = need_im ? im.node()->grad_buf() : nullptr;
        std::vector<cd> b(static_cast<size_t>(HW));
        const float* g = n.grad.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          for (int64_t i = 0; i < HW; ++i)
            b[static_cast<size_t>(i)] = cd(g[nc * HW + i], 0.0);
          fft_2d(b, H, W, -1);
          for (int64_t kh = 0; kh < H; ++kh)
            for (int64_t kw = 0; kw < W; ++kw) {
              const int64_t dst =
                  nc * HW + to_centered(kh, H) * W + to_centered(kw, W);
              const cd v = b[static_cast<size_t>(kh * W + kw)] * scale;
              if (gr) gr[dst] += static_cast<float>(v.real());
              if (gi) gi[dst] += static_cast<float>(v.imag());
            }
        }
      });
}

double last_ifft_imag_residue() { return g_ifft_residue; }

Tensor awm_ratios(const Tensor& x, const AwmWeights& w) {
  check(x.defined() && x.rank() == 4, "awm_ratios: input must be (N,C,H,W)");
  const int64_t C = x.dim(1);
  const int64_t d = compress_dim(C);
  check(w.fc1_w.defined() && w.fc1_w.rank() == 2 && w.fc1_w.dim(0) == d &&
            w.fc1_w.dim(1) == C,
        "awm_ratios: fc1 weight must be (" + std::to_string(d) + "," +
            std::to_string(C) + "), got " +
            (w.fc1_w.defined() ? shape_str(w.fc1_w.shape()) : "undefined"));
  check(w.fc2_w.defined() && w.fc2_w.rank() == 2 && w.fc2_w.dim(0) == 2 &&
            w.fc2_w.dim(1) == d,
        "awm_ratios: fc2 weight must be (2," + std::to_string(d) + ")");
  Tensor gap = reshape(pool(x, PoolKind::global_avg), {x.dim(0), C});
  Tensor hidden = gelu(linear(gap, w.fc1_w, w.fc1_b));
  return sigmoid(linear(hidden, w.fc2_w, w.fc2_b));
}

namespace {

// Integer half-extents of the hard window. A length-1 axis holds only the DC
// bin, which always belongs to the low band.
int64_t hard_extent(int64_t n, float r) {
  const int64_t half = n / 2;
  if (half == 0) return 1;
  int64_t e = static_cast<int64_t>(
      std::floor(static_cast<double>(half) * static_cast<double>(r)));
  return std::min(std::max<int64_t>(e, 1), half);
}

double soft_edge(double u, double center, double half, double tau) {
  const double rise = 1.0 / (1.0 + std::exp(-(u - (center - half)) / tau));
  const double fall = 1.0 / (1.0 + std::exp(-((center + half) - u) / tau));
  return rise * fall;
}

}  // namespace

MaskPair build_masks(int64_t h, int64_t w, WindowRatios r, MaskMode mode,
                     float tau) {
  check(h >= 1 && w >= 1, "build_masks: dims must be positive");
  std::vector<float> low(static_cast<size_t>(h * w), 0.0f);
  std::vector<float> high(static_cast<size_t>(h * w), 0.0f);
  const int64_t ch = h / 2, cw = w / 2;
  if (mode == MaskMode::hard) {
    const int64_t eh = hard_extent(h, r.r_h);
    const int64_t ew = hard_extent(w, r.r_w);
    for (int64_t u = 0; u < h; ++u)
      for (int64_t v = 0; v < w; ++v) {
        const bool in = u >= ch - eh && u < ch + eh && v >= cw - ew && v < cw + ew;
        low[static_cast<size_t>(u * w + v)] = in ? 1.0f : 0.0f;
        high[static_cast<size_t>(u * w + v)] = in ? 0.0f : 1.0f;
      }
  } else {
    check(tau > 0.0f, "build_masks: soft temperature must be positive");
    const double hh = std::min(std::max(0.5 * h * r.r_h, 1.0),
                               double(std::max<int64_t>(h / 2, 1)));
    const double hw = std::min(std::max(0.5 * w * r.r_w, 1.0),
                               double(std::max<int64_t>(w / 2, 1)));
    for (int64_t u = 0; u < h; ++u) {
      const double wu = soft_edge(double(u), double(ch), hh, tau);
      for (int64_t v = 0; v < w; ++v) {
        const double m = wu * soft_edge(double(v), double(cw), hw, tau);
        low[static_cast<size_t>(u * w + v)] = static_cast<float>(m);
        high[static_cast<size_t>(u * w + v)] = static_cast<float>(1.0 - m);
      }
    }
  }
  MaskPair out;
  out.low = Tensor::from_data({h, w}, std::move(low));
  out.high = Tensor::from_data({h, w}, std::move(high));
  out.mode = mode;
  out.tau = tau;
  return out;
}

std::pair<Tensor, Tensor> soft_masks(int64_t h, int64_t w,
                                     const Tensor& ratios, float tau) {
  check(h >= 1 && w >= 1, "soft_masks: dims must be positive");
  check(ratios.defined() && ratios.rank() == 2 && ratios.dim(1) == 2,
        "soft_masks: ratios must be (N,2)");
  check(tau > 0.0f, "soft_masks: temperature must be positive");
  const int64_t n = ratios.dim(0);
  const float ch = static_cast<float>(h / 2), cw = static_cast<float>(w / 2);
  // Continuous half-extents, clamped so the DC bin stays in the low band.
  Tensor hh = clamp(affine(reshape(slice(ratios, 1, 0, 1), {n, 1, 1, 1}),
                           0.5f * static_cast<float>(h), 0.0f),
                    1.0f, static_cast<float>(std::max<int64_t>(h / 2, 1)));
  Tensor hw = clamp(affine(reshape(slice(ratios, 1, 1, 1), {n, 1, 1, 1}),
                           0.5f * static_cast<float>(w), 0.0f),
                    1.0f, static_cast<float>(std::max<int64_t>(w / 2, 1)));
  std::vector<float> uv(static_cast<size_t>(h));
  for (int64_t u = 0; u < h; ++u) uv[static_cast<size_t>(u)] = static_cast<float>(u);
  Tensor urow = Tensor::from_data({1, 1, h, 1}, std::move(uv));
  std::vector<float> vv(static_cast<size_t>(w));
  for (int64_t v = 0; v < w; ++v) vv[static_cast<size_t>(v)] = static_cast<float>(v);
  Tensor vcol = Tensor::from_data({1, 1, 1, w}, std::move(vv));
  const float it = 1.0f / tau;
  // sigmoid((u - (c - e))/tau) * sigmoid(((c + e) - u)/tau) per axis.
  auto axis_window = [it](const Tensor& coord, float center, const Tensor& ext) {
    Tensor rise = sigmoid(add(affine(coord, it, -center * it), affine(ext, it, 0.0f)));
    Tensor fall = sigmoid(add(affine(coord, -it, center * it), affine(ext, it, 0.0f)));
    return mul(rise, fall);
  };
  Tensor wrow = axis_window(urow, ch, hh);   // (N,1,H,1)
  Tensor wcol = axis_window(vcol, cw, hw);   // (N,1,1,W)
  Tensor low = mul(wrow, wcol);              // (N,1,H,W)
  Tensor high = affine(low, -1.0f, 1.0f);
  return {low, high};
}

FreqSepResult separate_frequencies(const Tensor& x_raw,
                                   const FreqSepWeights& w, MaskMode mode,
                                   float tau) {
  check(x_raw.defined() && x_raw.rank() == 4,
        "separate_frequencies: input must be (N,C,H,W)");
  check(w.align_w.defined() && w.align_w.rank() == 4 &&
            w.align_w.dim(1) == x_raw.dim(1) && w.align_w.dim(2) == 3 &&
            w.align_w.dim(3) == 3,
        "separate_frequencies: alignment conv must be (C,in,3,3)");
  Tensor x_aligned = conv2d(x_raw, w.align_w, w.align_b, 1, 1);
  const int64_t N = x_aligned.dim(0), H = x_aligned.dim(2), W = x_aligned.dim(3);
  Tensor ratios = awm_ratios(x_aligned, w.awm);
  Tensor low_mask, high_mask;
  if (mode == MaskMode::soft) {
    std::tie(low_mask, high_mask) = soft_masks(H, W, ratios, tau);
  } else {
    // Hard windows are data-dependent constants; no gradient to the AWM.
    std::vector<float> low(static_cast<size_t>(N * H * W));
    std::vector<float> high(static_cast<size_t>(N * H * W));
    const float* pr = ratios.data();
    for (int64_t i = 0; i < N; ++i) {
      MaskPair mp = build_masks(H, W, {pr[i * 2 + 0], pr[i * 2 + 1]},
                                MaskMode::hard);
      std::copy(mp.low.data(), mp.low.data() + H * W, low.begin() + i * H * W);
      std::copy(mp.high.data(), mp.high.data() + H * W,
                high.begin() + i * H * W);
    }
    low_mask = Tensor::from_data({N, 1, H, W}, std::move(low));
    high_mask = Tensor::from_data({N, 1, H, W}, std::move(high));
  }
  Spectrum f = fft2d(x_aligned);
  FreqSepResult out;
  out.high = ifft2d({mul(f.real, high_mask), mul(f.imag, high_mask)});
  out.low = ifft2d({mul(f.real, low_mask), mul(f.imag, low_mask)});
  out.ratios = ratios;
  return out;
}

}  // namespace afenet
