// Acceptance gate: eight self-contained checks over the shipped library,
// one PASS/FAIL line each. Every check carries its own runtime budget and
// fails when it runs over. Exit status is the number of failed checks.

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "afenet/afsim.hpp"
#include "afenet/data_io.hpp"
#include "afenet/metrics.hpp"
#include "afenet/network.hpp"
#include "afenet/sfm.hpp"
#include "afenet/spectral.hpp"
#include "afenet/tensor.hpp"
#include "afenet/training.hpp"

using namespace afenet;

namespace {

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// Runs one criterion, prints its line, enforces the wall-clock budget.
bool run_criterion(int id, const char* name, double budget_s,
                   const std::function<bool(std::string&)>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string detail;
  bool pass = false;
  try {
    pass = fn(detail);
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
    pass = false;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  if (secs > budget_s) {
    pass = false;
    detail += fmt(", over %.0fs budget", budget_s);
  }
  std::printf("criterion %d %s: %s (%s, %.2fs)\n", id, name,
              pass ? "PASS" : "FAIL", detail.c_str(), secs);
  std::fflush(stdout);
  return pass;
}

double max_abs(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

// ---- shared random-weight factories (match the shipped weight shapes) ----

AttentionWeights random_attention(int64_t c, std::mt19937& rng, float s) {
  AttentionWeights w;
  w.q_pw_w = Tensor::randn({c, c, 1, 1}, rng, s);
  w.q_pw_b = Tensor::randn({c}, rng, 0.05f);
  w.q_dw_w = Tensor::randn({c, 1, 3, 3}, rng, s);
  w.q_dw_b = Tensor::randn({c}, rng, 0.05f);
  w.k_pw_w = Tensor::randn({c, c, 1, 1}, rng, s);
  w.k_pw_b = Tensor::randn({c}, rng, 0.05f);
  w.k_dw_w = Tensor::randn({c, 1, 3, 3}, rng, s);
  w.k_dw_b = Tensor::randn({c}, rng, 0.05f);
  w.v_pw_w = Tensor::randn({c, c, 1, 1}, rng, s);
  w.v_pw_b = Tensor::randn({c}, rng, 0.05f);
  w.v_dw_w = Tensor::randn({c, 1, 3, 3}, rng, s);
  w.v_dw_b = Tensor::randn({c}, rng, 0.05f);
  w.out_w = Tensor::randn({c, c, 1, 1}, rng, s);
  w.out_b = Tensor::randn({c}, rng, 0.05f);
  return w;
}

FreqSepWeights random_freq(int64_t c, std::mt19937& rng) {
  FreqSepWeights f;
  f.align_w = Tensor::randn({c, 3, 3, 3}, rng, 0.2f);
  f.align_b = Tensor::randn({c}, rng, 0.1f);
  const int64_t d = compress_dim(c);
  f.awm.fc1_w = Tensor::randn({d, c}, rng, 0.3f);
  f.awm.fc1_b = Tensor::zeros({d});
  f.awm.fc2_w = Tensor::randn({2, d}, rng, 0.3f);
  f.awm.fc2_b = Tensor::zeros({2});
  return f;
}

AfsimWeights random_afsim(int64_t c, int64_t c_dec, std::mt19937& rng,
                          int heads) {
  AfsimWeights w;
  if (c_dec > 0) {
    w.fuse_w = Tensor::randn({c, c_dec + c, 1, 1}, rng, 0.2f);
    w.fuse_b = Tensor::randn({c}, rng, 0.05f);
  }
  w.dw5_w = Tensor::randn({c, 1, 5, 5}, rng, 0.15f);
  w.dw5_b = Tensor::randn({c}, rng, 0.05f);
  w.dw7_w = Tensor::randn({c, 1, 7, 7}, rng, 0.1f);
  w.dw7_b = Tensor::randn({c}, rng, 0.05f);
  w.high = random_attention(c, rng, 0.25f);
  w.low = random_attention(c, rng, 0.25f);
  w.freq = random_freq(c, rng);
  w.head_count = heads;
  return w;
}

SfmWeights random_sfm(int64_t c, std::mt19937& rng) {
  SfmWeights w;
  w.gate_w = Tensor::randn({2, 2, 7, 7}, rng, 0.2f);
  w.gate_b = Tensor::randn({2}, rng, 0.1f);
  w.out_w = Tensor::randn({c, c, 1, 1}, rng, 0.3f);
  w.out_b = Tensor::randn({c}, rng, 0.1f);
  return w;
}

// ---- straight-line double-precision oracles ----

// O(N^2 * HW) direct DFT, centered like the library output.
void naive_dft2(const std::vector<float>& x, int64_t h, int64_t w,
                std::vector<double>& re, std::vector<double>& im) {
  re.assign(size_t(h * w), 0.0);
  im.assign(size_t(h * w), 0.0);
  for (int64_t kh = 0; kh < h; ++kh)
    for (int64_t kw = 0; kw < w; ++kw) {
      std::complex<double> acc(0.0, 0.0);
      for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
          const double ang = -2.0 * std::numbers::pi *
                             (double(kh * r) / h + double(kw * c) / w);
          acc += double(x[size_t(r * w + c)]) *
                 std::complex<double>(std::cos(ang), std::sin(ang));
        }
      const int64_t u = (kh + h / 2) % h;
      const int64_t v = (kw + w / 2) % w;
      re[size_t(u * w + v)] = acc.real();
      im[size_t(u * w + v)] = acc.imag();
    }
}

// Reference convolution, double accumulation, no shortcuts shared with the
// library kernels.
std::vector<double> ref_conv2d(const float* x, const float* w, const float* b,
                               int64_t N, int64_t Cin, int64_t H, int64_t W,
                               int64_t Cout, int64_t K, int stride, int pad,
                               int groups) {
  const int64_t Cpg = Cin / groups;
  const int64_t Copg = Cout / groups;
  const int64_t Ho = (H + 2 * pad - K) / stride + 1;
  const int64_t Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> y(size_t(N * Cout * Ho * Wo), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < Cout; ++oc)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = b ? b[oc] : 0.0;
          const int64_t g = oc / Copg;
          for (int64_t ci = 0; ci < Cpg; ++ci)
            for (int64_t kh = 0; kh < K; ++kh)
              for (int64_t kw = 0; kw < K; ++kw) {
                const int64_t ih = oh * stride - pad + kh;
                const int64_t iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc +=
                    double(x[((n * Cin + g * Cpg + ci) * H + ih) * W + iw]) *
                    double(w[((oc * Cpg + ci) * K + kh) * K + kw]);
              }
          y[size_t(((n * Cout + oc) * Ho + oh) * Wo + ow)] = acc;
        }
  return y;
}

// 1x1 conv over one batch element, doubles.
void conv1x1_oracle(const std::vector<double>& x, int64_t ci, int64_t h,
                    int64_t w, const Tensor& kw, const Tensor& kb,
                    std::vector<double>& y) {
  const int64_t co = kw.dim(0);
  y.assign(size_t(co * h * w), 0.0);
  for (int64_t o = 0; o < co; ++o)
    for (int64_t p = 0; p < h * w; ++p) {
      double acc = kb.data()[o];
      for (int64_t i = 0; i < ci; ++i)
        acc += double(kw.data()[o * ci + i]) * x[size_t(i * h * w + p)];
      y[size_t(o * h * w + p)] = acc;
    }
}

// Depthwise 3x3 conv over one batch element, padding 1, doubles.
void dw3_oracle(const std::vector<double>& x, int64_t c, int64_t h, int64_t w,
                const Tensor& kw, const Tensor& kb, std::vector<double>& y) {
  y.assign(size_t(c * h * w), 0.0);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t r = 0; r < h; ++r)
      for (int64_t cc = 0; cc < w; ++cc) {
        double acc = kb.data()[ch];
        for (int64_t kr = 0; kr < 3; ++kr)
          for (int64_t kc = 0; kc < 3; ++kc) {
            const int64_t sr = r + kr - 1, sc = cc + kc - 1;
            if (sr < 0 || sr >= h || sc < 0 || sc >= w) continue;
            acc += double(kw.data()[(ch * 9) + kr * 3 + kc]) *
                   x[size_t(ch * h * w + sr * w + sc)];
          }
        y[size_t(ch * h * w + r * w + cc)] = acc;
      }
}

// ---- Welch t-test machinery (regularized incomplete beta via Lentz) ----

double betacf(double a, double b, double x) {
  const double eps = 3e-12, fpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

double betai(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                    a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(ln);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

// Two-sided p for |T| >= t under Student's t with df degrees of freedom.
double student_two_sided(double t, double df) {
  return betai(df / 2.0, 0.5, df / (df + t * t));
}

double welch_p(const std::vector<double>& a, const std::vector<double>& b,
               double& t_out, double& df_out) {
  const double n1 = double(a.size()), n2 = double(b.size());
  double m1 = 0.0, m2 = 0.0;
  for (double v : a) m1 += v;
  for (double v : b) m2 += v;
  m1 /= n1;
  m2 /= n2;
  double v1 = 0.0, v2 = 0.0;
  for (double v : a) v1 += (v - m1) * (v - m1);
  for (double v : b) v2 += (v - m2) * (v - m2);
  v1 /= (n1 - 1.0);
  v2 /= (n2 - 1.0);
  const double se2 = v1 / n1 + v2 / n2;
  t_out = (m1 - m2) / std::sqrt(se2);
  df_out = se2 * se2 / ((v1 / n1) * (v1 / n1) / (n1 - 1.0) +
                        (v2 / n2) * (v2 / n2) / (n2 - 1.0));
  return student_two_sided(std::fabs(t_out), df_out);
}

// ---- shared overfit run (criteria 6 and 8) ----

struct OverfitRun {
  double miou = 0.0;
  std::vector<HistoryRow> hist;
  std::string report;
  std::vector<char> ck_bytes;
};

OverfitRun run_overfit(const std::filesystem::path& ck_path) {
  SynthSpec sp;
  sp.seed = 5;
  sp.count = 2;
  sp.size = 64;
  std::vector<Sample> ds;
  for (auto& s : synth_dataset(sp)) ds.push_back(std::move(s.sample));

  ModelConfig mc = ModelConfig::desk();
  ModelWeights w = init_weights(mc, 11);
  TrainConfig tc;
  tc.learning_rate = 1e-3f;
  tc.batch_size = 4;
  tc.batches_per_epoch = 200;
  tc.epochs = 1;
  tc.augment_flip = false;
  tc.augment_scale = false;

  OverfitRun r;
  r.hist = train(w, mc, ds, tc);

  NoGradGuard ng;
  ConfusionMatrix cm(mc.num_classes);
  for (const Sample& s : ds) {
    Tensor img = reshape(s.image, {1, 3, sp.size, sp.size});
    IntTensor pred = argmax_channels(model_forward(img, w, mc));
    IntTensor flat{s.label.shape, pred.v};
    accumulate(cm, flat, s.label);
  }
  r.miou = mean_iou(cm);
  r.report = metrics_table(cm);

  save_checkpoint(ck_path.string(),
                  pack_model(w, mc, int64_t(r.hist.size())));
  std::ifstream in(ck_path, std::ios::binary);
  r.ck_bytes.assign(std::istreambuf_iterator<char>(in),
                    std::istreambuf_iterator<char>());
  return r;
}

// ---- criterion bodies ----

bool crit_accounting(std::string& detail) {
  const ModelConfig cfg = ModelConfig::full_size();
  const int64_t params = count_params(cfg);
  const int64_t flops = count_flops(cfg, 512, 512);
  const double p_tgt = 20.23e6, f_tgt = 25.59e9;
  const bool ok = std::fabs(double(params) - p_tgt) <= 0.10 * p_tgt &&
                  std::fabs(double(flops) - f_tgt) <= 0.15 * f_tgt;
  detail = fmt("params %lld vs 20.23M +-10%%, flops %lld vs 25.59G +-15%%",
               (long long)params, (long long)flops);
  return ok;
}

bool crit_compression(std::string& detail) {
  const int64_t d512 = compress_dim(512);
  const int64_t d256 = compress_dim(256);
  const int64_t d128 = compress_dim(128);
  detail = fmt("compress_dim 512->%lld 256->%lld 128->%lld",
               (long long)d512, (long long)d256, (long long)d128);
  return d512 == 56 && d256 == 32 && d128 == 18;
}

bool crit_spectral(std::string& detail) {
  std::mt19937 rng(101);

  double round_trip = 0.0, parseval = 0.0;
  const std::pair<int64_t, int64_t> dims[] = {
      {8, 8}, {12, 20}, {5, 7}, {16, 16}, {64, 64}};
  for (auto [h, w] : dims) {
    Tensor x = Tensor::uniform({2, 3, h, w}, rng, -1.0f, 1.0f);
    Spectrum s = fft2d(x);
    round_trip = std::max(round_trip, max_abs(ifft2d(s), x));
    double spatial = 0.0, spectral = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i)
      spatial += double(x.data()[i]) * double(x.data()[i]);
    for (int64_t i = 0; i < x.numel(); ++i)
      spectral += double(s.real.data()[i]) * double(s.real.data()[i]) +
                  double(s.imag.data()[i]) * double(s.imag.data()[i]);
    spectral /= double(h * w);
    parseval = std::max(parseval, std::fabs(spatial - spectral) / spatial);
  }

  double dft = 0.0;
  for (int64_t n : {4, 6, 8, 12}) {
    Tensor x = Tensor::uniform({1, 1, n, n}, rng, -1.0f, 1.0f);
    Spectrum s = fft2d(x);
    std::vector<double> re, im;
    std::vector<float> xv(x.data(), x.data() + x.numel());
    naive_dft2(xv, n, n, re, im);
    for (int64_t i = 0; i < n * n; ++i) {
      dft = std::max(dft, std::fabs(double(s.real.data()[i]) - re[size_t(i)]));
      dft = std::max(dft, std::fabs(double(s.imag.data()[i]) - im[size_t(i)]));
    }
  }

  // Hard masks must be exact 0/1 complements; soft masks complementary to
  // float rounding.
  bool hard_exact = true;
  for (auto [h, w] : {std::pair<int64_t, int64_t>{8, 8}, {9, 7}, {16, 12}})
    for (float r : {0.25f, 0.6f}) {
      MaskPair mp = build_masks(h, w, {r, r}, MaskMode::hard);
      for (int64_t i = 0; i < h * w; ++i) {
        const float lo = mp.low.data()[i], hi = mp.high.data()[i];
        if (!((lo == 0.0f || lo == 1.0f) && lo + hi == 1.0f))
          hard_exact = false;
      }
    }
  double soft_comp = 0.0;
  MaskPair sm = build_masks(16, 12, {0.6f, 0.4f}, MaskMode::soft, 1.0f);
  for (int64_t i = 0; i < sm.low.numel(); ++i)
    soft_comp = std::max(
        soft_comp,
        std::fabs(double(sm.low.data()[i]) + double(sm.high.data()[i]) - 1.0));

  // Band split must reconstruct the aligned features: F_h + F_l = X'.
  double band = 0.0;
  FreqSepWeights fw = random_freq(4, rng);
  Tensor x = Tensor::uniform({2, 3, 12, 12}, rng, 0.0f, 1.0f);
  Tensor aligned = conv2d(x, fw.align_w, fw.align_b, 1, 1);
  for (MaskMode mode : {MaskMode::hard, MaskMode::soft}) {
    FreqSepResult res = separate_frequencies(x, fw, mode);
    band = std::max(band, max_abs(add(res.high, res.low), aligned));
  }

  detail = fmt("round_trip %.2g, parseval %.2g, dft %.2g, hard complement %s, "
               "soft complement %.2g, band %.2g",
               round_trip, parseval, dft, hard_exact ? "exact" : "BROKEN",
               soft_comp, band);
  return round_trip < 1e-6 && parseval < 1e-4 && dft < 1e-5 && hard_exact &&
         soft_comp < 1e-6 && band < 1e-5;
}

Tensor fd_head(const Tensor& y, uint32_t seed) {
  std::mt19937 rng(seed);
  Tensor w = Tensor::uniform(y.shape(), rng, -1.0f, 1.0f);
  return mean(mul(y, w));
}

// Uniform values pushed away from zero so kinked ops see no boundary noise.
Tensor rand_away_from_zero(Shape s, std::mt19937& rng, float margin = 0.3f) {
  Tensor t = Tensor::uniform(std::move(s), rng, -1.0f, 1.0f);
  float* d = t.mutable_data();
  for (int64_t i = 0; i < t.numel(); ++i)
    d[i] += d[i] >= 0.0f ? margin : -margin;
  return t;
}

// Max FD error over the primitive op set, each probed with a fixed random
// linear head.
double primitive_grad_errors() {
  std::mt19937 rng(47);
  double worst = 0.0;
  auto up = [&](double e) { worst = std::max(worst, e); };

  Tensor a = Tensor::uniform({2, 3, 4}, rng, -1.0f, 1.0f);
  Tensor b = rand_away_from_zero({3, 1}, rng, 0.5f);
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(add(in[0], in[1]), 1);
     }, {a, b}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(mul(in[0], in[1]), 2);
     }, {a, b}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(divide(in[0], in[1]), 3);
     }, {a, b}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(sub(in[0], in[1]), 4);
     }, {a, b}));

  Tensor xa = Tensor::uniform({3, 7}, rng, -2.0f, 2.0f);
  Tensor xr = rand_away_from_zero({3, 7}, rng);
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(gelu(in[0]), 5);
     }, {xa}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(sigmoid(in[0]), 6);
     }, {xa}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(relu(in[0]), 7);
     }, {xr}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(clamp(in[0], -0.85f, 0.85f), 8);
     }, {xr}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(affine(in[0], 1.7f, -0.3f), 9);
     }, {xa}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(softmax(in[0], 1), 10);
     }, {Tensor::uniform({2, 4, 3}, rng, -2.0f, 2.0f)}));

  Tensor lx = Tensor::uniform({3, 5}, rng, -1.0f, 1.0f);
  Tensor lw = Tensor::uniform({4, 5}, rng, -1.0f, 1.0f);
  Tensor lb = Tensor::uniform({4}, rng, -1.0f, 1.0f);
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(linear(in[0], in[1], in[2]), 11);
     }, {lx, lw, lb}));
  Tensor ma = Tensor::uniform({2, 3, 4}, rng, -1.0f, 1.0f);
  Tensor mb = Tensor::uniform({2, 4, 2}, rng, -1.0f, 1.0f);
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(matmul(in[0], in[1]), 12);
     }, {ma, mb}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(transpose_last2(in[0]), 13);
     }, {ma}));

  struct Cfg {
    int64_t Cin, Cout, K;
    int stride, pad, groups;
  };
  const Cfg cfgs[] = {
      {3, 4, 3, 1, 1, 1}, {4, 4, 3, 2, 1, 2}, {4, 4, 5, 1, 2, 4}};
  uint32_t seed = 14;
  for (const Cfg& c : cfgs) {
    Tensor cx = Tensor::uniform({2, c.Cin, 6, 6}, rng, -1.0f, 1.0f);
    Tensor cw = Tensor::uniform({c.Cout, c.Cin / c.groups, c.K, c.K}, rng,
                                -1.0f, 1.0f);
    Tensor cb = Tensor::uniform({c.Cout}, rng, -1.0f, 1.0f);
    up(grad_check([&](const std::vector<Tensor>& in) {
         return fd_head(conv2d(in[0], in[1], in[2], c.stride, c.pad, c.groups),
                        seed);
       }, {cx, cw, cb}));
    ++seed;
  }

  Tensor px = Tensor::uniform({2, 3, 4, 4}, rng, -1.0f, 1.0f);
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(pool(in[0], PoolKind::global_avg), 20);
     }, {px}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(pool(in[0], PoolKind::channel_avg), 21);
     }, {px}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(pool(in[0], PoolKind::channel_max), 22);
     }, {px}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(avg_pool2d(in[0], 2), 23);
     }, {px}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(max_pool2d(in[0], 3, 2, 1), 24);
     }, {px}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(upsample(in[0], 2, UpsampleMode::nearest), 25);
     }, {px}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(upsample(in[0], 2, UpsampleMode::bilinear), 26);
     }, {px}));

  Tensor sa = Tensor::uniform({2, 2, 3}, rng, -1.0f, 1.0f);
  Tensor sb = Tensor::uniform({2, 3, 3}, rng, -1.0f, 1.0f);
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(concat({in[0], in[1]}, 1), 27);
     }, {sa, sb}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(slice(in[0], 2, 1, 2), 28);
     }, {sa}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(reshape(in[0], {4, 3}), 29);
     }, {sa}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(flip(in[0], 1), 30);
     }, {sa}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(sum_axes(in[0], {0, 2}, false), 31);
     }, {sa}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       return mean(mul(in[0], in[0]));
     }, {sa}));

  Tensor nx = Tensor::uniform({2, 3, 4, 4}, rng, -1.0f, 1.0f);
  Tensor ng = Tensor::uniform({3}, rng, 0.5f, 1.5f);
  Tensor nb = Tensor::uniform({3}, rng, -0.5f, 0.5f);
  up(grad_check([&](const std::vector<Tensor>& in) {
       return fd_head(channel_norm(in[0], in[1], in[2]), 32);
     }, {nx, ng, nb}));

  // Transform pair and the differentiable soft-mask builder.
  Tensor fx = Tensor::uniform({1, 2, 6, 6}, rng, -1.0f, 1.0f);
  up(grad_check([&](const std::vector<Tensor>& in) {
       Spectrum s = fft2d(in[0]);
       return fd_head(ifft2d(s), 33);
     }, {fx}));
  up(grad_check([&](const std::vector<Tensor>& in) {
       auto [lo, hi] = soft_masks(12, 10, in[0], 1.0f);
       return add(fd_head(lo, 34), fd_head(hi, 35));
     }, {Tensor::from_data({2, 2}, {0.55f, 0.42f, 0.31f, 0.77f})}));

  return worst;
}

double afsim_grad_error() {
  std::mt19937 rng(33);
  const int64_t c = 4;
  AfsimWeights w = random_afsim(c, 2, rng, 2);
  Tensor x_raw = Tensor::uniform({1, 3, 8, 8}, rng, 0.0f, 1.0f);
  Tensor x_enc = Tensor::uniform({1, c, 8, 8}, rng, -0.5f, 0.5f);
  Tensor x_dec = Tensor::uniform({1, 2, 4, 4}, rng, -0.5f, 0.5f);
  return grad_check(
      [&](const std::vector<Tensor>& in) {
        AfsimWeights wc = w;
        wc.fuse_w = in[2];
        wc.dw5_w = in[3];
        wc.high.q_pw_w = in[4];
        wc.low.v_pw_w = in[5];
        wc.freq.awm.fc2_w = in[6];
        wc.freq.align_w = in[7];
        auto [fh, fl] =
            afsim_forward(in[0], in[1], x_dec, wc, MaskMode::soft, 1.0f);
        std::mt19937 r2(34);
        Tensor wh = Tensor::uniform(fh.shape(), r2, -1.0f, 1.0f);
        Tensor wl = Tensor::uniform(fl.shape(), r2, -1.0f, 1.0f);
        return add(mean(mul(fh, wh)), mean(mul(fl, wl)));
      },
      {x_raw, x_enc, w.fuse_w, w.dw5_w, w.high.q_pw_w, w.low.v_pw_w,
       w.freq.awm.fc2_w, w.freq.align_w});
}

double sfm_grad_error() {
  std::mt19937 rng(49);
  const int64_t c = 4;
  SfmWeights w = random_sfm(c, rng);
  Tensor f_h = Tensor::uniform({1, c, 4, 4}, rng, -0.8f, 0.8f);
  Tensor f_l = Tensor::uniform({1, c, 4, 4}, rng, -0.8f, 0.8f);
  Tensor x_in = Tensor::uniform({1, c, 4, 4}, rng, -0.8f, 0.8f);
  return grad_check(
      [&](const std::vector<Tensor>& in) {
        SfmWeights wc;
        wc.gate_w = in[3];
        wc.gate_b = in[4];
        wc.out_w = in[5];
        wc.out_b = in[6];
        Tensor out = sfm_fuse(in[0], in[1], in[2], wc);
        std::mt19937 r2(50);
        Tensor wt = Tensor::uniform(out.shape(), r2, -1.0f, 1.0f);
        return mean(mul(out, wt));
      },
      {f_h, f_l, x_in, w.gate_w, w.gate_b, w.out_w, w.out_b});
}

double tb_grad_error() {
  std::mt19937 rng(54);
  TransformerBlockWeights t4;
  t4.norm1_g = Tensor::full({4}, 1.0f);
  t4.norm1_b = Tensor::zeros({4});
  t4.qkv_pw_w = Tensor::randn({12, 4, 1, 1}, rng, 0.4f);
  t4.qkv_pw_b = Tensor::zeros({12});
  t4.qkv_dw_w = Tensor::randn({12, 1, 3, 3}, rng, 0.3f);
  t4.qkv_dw_b = Tensor::zeros({12});
  t4.attn_out_w = Tensor::randn({4, 4, 1, 1}, rng, 0.3f);
  t4.attn_out_b = Tensor::zeros({4});
  t4.norm2_g = Tensor::full({4}, 1.0f);
  t4.norm2_b = Tensor::zeros({4});
  t4.ffn_pw1_w = Tensor::randn({16, 4, 1, 1}, rng, 0.4f);
  t4.ffn_pw1_b = Tensor::zeros({16});
  t4.ffn_dw_w = Tensor::randn({16, 1, 3, 3}, rng, 0.3f);
  t4.ffn_dw_b = Tensor::zeros({16});
  t4.ffn_pw2_w = Tensor::randn({4, 8, 1, 1}, rng, 0.3f);
  t4.ffn_pw2_b = Tensor::zeros({4});
  Tensor x4 = Tensor::uniform({1, 4, 4, 4}, rng, -0.8f, 0.8f);
  return grad_check(
      [&](const std::vector<Tensor>& in) {
        TransformerBlockWeights tc = t4;
        tc.qkv_pw_w = in[1];
        tc.ffn_pw1_w = in[2];
        tc.norm1_g = in[3];
        Tensor out = transformer_block(in[0], tc, 2);
        std::mt19937 r3(55);
        Tensor wt = Tensor::uniform(out.shape(), r3, -1.0f, 1.0f);
        return mean(mul(out, wt));
      },
      {x4, t4.qkv_pw_w, t4.ffn_pw1_w, t4.norm1_g});
}

// Full-pipeline check at 1/8 width. Central differences are only meaningful
// where the loss is locally smooth in the probed coordinate, and routing ops
// (relu, max pooling, channel max, clamped mask extents) make encoder-side
// coordinates structurally unmeasurable. Each probe is therefore evaluated
// at three step sizes and a slope is trusted only where two window widths
// agree; self-consistent slopes must then match the tape.
struct ModelGradResult {
  int total = 0;
  int validated = 0;
  double max_err = 0.0;
  bool pinned_awm_zero = true;
};

ModelGradResult model_grad_check() {
  ModelConfig cfg = ModelConfig::desk();
  ModelWeights w = init_weights(cfg, 21);
  std::mt19937 rng(59);
  Tensor img = Tensor::uniform({1, 3, 32, 32}, rng, 0.0f, 1.0f);

  struct Probe {
    const char* name;
    Tensor t;
  };
  std::vector<Probe> probes = {
      {"dec3.high.v_pw_w", w.decoder[3].afsim.high.v_pw_w},
      {"dec3.awm.fc2_w", w.decoder[3].afsim.freq.awm.fc2_w},
      {"dec3.sfm.out_w", w.decoder[3].sfm.out_w},
      {"dec2.fuse_w", w.decoder[2].afsim.fuse_w},
      {"dec2.dw7_w", w.decoder[2].afsim.dw7_w},
      {"dec2.tb0.ffn_pw2_w", w.decoder[2].tbs[0].ffn_pw2_w},
      {"dec1.low.k_dw_w", w.decoder[1].afsim.low.k_dw_w},
      {"dec1.align_w", w.decoder[1].afsim.freq.align_w},
      {"dec1.sfm.gate_b", w.decoder[1].sfm.gate_b},
      {"dec1.tb0.norm1_g", w.decoder[1].tbs[0].norm1_g},
      {"dec0.dw5_w", w.decoder[0].afsim.dw5_w},
      {"dec0.high.q_pw_w", w.decoder[0].afsim.high.q_pw_w},
      {"dec0.awm.fc1_w", w.decoder[0].afsim.freq.awm.fc1_w},
      {"dec0.sfm.out_w", w.decoder[0].sfm.out_w},
      {"head_w", w.head_w},
      {"head_b", w.head_b},
  };

  auto loss_of = [&]() {
    Tensor logits = model_forward(img, w, cfg);
    std::mt19937 r2(60);
    Tensor wt = Tensor::uniform(logits.shape(), r2, -1.0f, 1.0f);
    return mean(mul(logits, wt));
  };

  for (auto& p : probes) {
    p.t.set_requires_grad(true);
    p.t.zero_grad();
  }
  backward(loss_of());
  std::vector<std::vector<double>> analytic;
  for (auto& p : probes) {
    const float* g = p.t.grad_data();
    std::vector<double> v(size_t(p.t.numel()), 0.0);
    if (g)
      for (int64_t j = 0; j < p.t.numel(); ++j) v[size_t(j)] = g[j];
    analytic.push_back(std::move(v));
    p.t.set_requires_grad(false);
  }

  ModelGradResult res;
  // The deepest level runs at 1x1 spatial extent where both mask extents are
  // pinned by their clamps, so its AWM head has an exactly zero gradient.
  for (double g : analytic[1])
    if (g != 0.0) res.pinned_awm_zero = false;

  NoGradGuard ng;
  auto relerr = [](double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
  };
  auto fd_slope = [&](Tensor& t, int64_t j, double eps) {
    float* d = t.node()->data.data();
    const float orig = d[j];
    d[j] = float(orig + eps);
    const double xp = d[j];
    const double lp = loss_of().item_hi();
    d[j] = float(orig - eps);
    const double xm = d[j];
    const double lm = loss_of().item_hi();
    d[j] = orig;
    return (lp - lm) / (xp - xm);
  };

  const double eps_pairs[3][2] = {{1e-4, 2e-4}, {3e-4, 6e-4}, {1e-3, 2e-3}};
  for (size_t pi = 0; pi < probes.size(); ++pi) {
    Tensor& t = probes[pi].t;
    const int64_t n = t.numel();
    const int64_t take = std::min<int64_t>(n, 12);
    for (int64_t k = 0; k < take; ++k) {
      const int64_t j = k * n / take;
      ++res.total;
      double best_dis = 1e300;
      double best_slope = 0.0;
      for (const auto& pr : eps_pairs) {
        const double f1 = fd_slope(t, j, pr[0]);
        const double f2 = fd_slope(t, j, pr[1]);
        const double dis = relerr(f1, f2);
        if (dis < best_dis) {
          best_dis = dis;
          best_slope = f1;
        }
      }
      if (best_dis < 5e-4) {
        ++res.validated;
        res.max_err =
            std::max(res.max_err, relerr(analytic[pi][size_t(j)], best_slope));
      }
    }
  }
  return res;
}

bool crit_gradients(std::string& detail) {
  const double prim = primitive_grad_errors();
  const double afsim = afsim_grad_error();
  const double sfm = sfm_grad_error();
  const double tb = tb_grad_error();
  const ModelGradResult m = model_grad_check();
  detail = fmt("primitives %.2g, afsim %.2g, sfm %.2g, tb %.2g, "
               "model %d/%d validated err %.2g",
               prim, afsim, sfm, tb, m.validated, m.total, m.max_err);
  return prim < 1e-4 && afsim < 1e-3 && sfm < 1e-3 && tb < 1e-3 &&
         m.pinned_awm_zero && m.validated >= 100 &&
         double(m.validated) >= 0.7 * double(m.total) && m.max_err < 1e-3;
}

bool crit_oracles(std::string& detail) {
  std::mt19937 rng(1001);
  const int trials = 100;

  // Convolution against the double-precision reference loops.
  double conv_err = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int groups = 1 + int(rng() % 2);
    const int64_t cin = groups * (1 + int64_t(rng() % 3));
    const int64_t cout = groups * (1 + int64_t(rng() % 3));
    const int64_t k = 1 + 2 * int64_t(rng() % 3);
    const int stride = 1 + int(rng() % 2);
    const int pad = int(rng() % 3);
    const int64_t n = 1 + int64_t(rng() % 2);
    const int64_t h = k + int64_t(rng() % 4);
    const int64_t wd = k + int64_t(rng() % 4);
    const bool bias = rng() % 2 == 0;
    Tensor x = Tensor::uniform({n, cin, h, wd}, rng, -1.0f, 1.0f);
    Tensor kw = Tensor::uniform({cout, cin / groups, k, k}, rng, -1.0f, 1.0f);
    Tensor kb = bias ? Tensor::uniform({cout}, rng, -1.0f, 1.0f) : Tensor();
    Tensor y = conv2d(x, kw, kb, stride, pad, groups);
    const std::vector<double> ref =
        ref_conv2d(x.data(), kw.data(), bias ? kb.data() : nullptr, n, cin, h,
                   wd, cout, k, stride, pad, groups);
    for (int64_t i = 0; i < y.numel(); ++i)
      conv_err =
          std::max(conv_err, std::fabs(double(y.data()[i]) - ref[size_t(i)]));
  }

  // Multi-head channel-token attention against a straight-line oracle.
  double attn_err = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int64_t cs[] = {2, 3, 4, 6};
    const int64_t c = cs[rng() % 4];
    std::vector<int> divs;
    for (int d = 1; d <= c; ++d)
      if (c % d == 0) divs.push_back(d);
    const int heads = divs[rng() % divs.size()];
    const int64_t per_head = c / heads;
    const int64_t h = 2 + int64_t(rng() % 3);
    const int64_t wd = 2 + int64_t(rng() % 3);
    const int64_t hw = h * wd;
    const int64_t n = 1 + int64_t(rng() % 2);
    AttentionWeights aw = random_attention(c, rng, 0.4f);
    Tensor f_fre = Tensor::uniform({n, c, h, wd}, rng, -1.0f, 1.0f);
    Tensor f_spa = Tensor::uniform({n, c, h, wd}, rng, -1.0f, 1.0f);
    Tensor out = cross_attention(f_fre, f_spa, aw, heads);

    for (int64_t bi = 0; bi < n; ++bi) {
      auto project = [&](const Tensor& src, const Tensor& pw, const Tensor& pb,
                         const Tensor& dw, const Tensor& db,
                         std::vector<double>& y) {
        std::vector<double> xin(size_t(c * hw));
        for (int64_t i = 0; i < c * hw; ++i)
          xin[size_t(i)] = double(src.data()[bi * c * hw + i]);
        std::vector<double> mid;
        conv1x1_oracle(xin, c, h, wd, pw, pb, mid);
        dw3_oracle(mid, c, h, wd, dw, db, y);
      };
      std::vector<double> q, k, v;
      project(f_fre, aw.q_pw_w, aw.q_pw_b, aw.q_dw_w, aw.q_dw_b, q);
      project(f_spa, aw.k_pw_w, aw.k_pw_b, aw.k_dw_w, aw.k_dw_b, k);
      project(f_spa, aw.v_pw_w, aw.v_pw_b, aw.v_dw_w, aw.v_dw_b, v);

      // Channel tokens per head; softmax over key tokens, scale 1/sqrt(HW).
      std::vector<double> att(size_t(c * hw), 0.0);
      for (int hd = 0; hd < heads; ++hd)
        for (int64_t qi = 0; qi < per_head; ++qi) {
          std::vector<double> sc(static_cast<size_t>(per_head));
          double mx = -1e300;
          for (int64_t ki = 0; ki < per_head; ++ki) {
            double acc = 0.0;
            for (int64_t p = 0; p < hw; ++p)
              acc += q[size_t((hd * per_head + qi) * hw + p)] *
                     k[size_t((hd * per_head + ki) * hw + p)];
            sc[size_t(ki)] = acc / std::sqrt(double(hw));
            mx = std::max(mx, sc[size_t(ki)]);
          }
          double z = 0.0;
          for (int64_t ki = 0; ki < per_head; ++ki) {
            sc[size_t(ki)] = std::exp(sc[size_t(ki)] - mx);
            z += sc[size_t(ki)];
          }
          for (int64_t ki = 0; ki < per_head; ++ki)
            for (int64_t p = 0; p < hw; ++p)
              att[size_t((hd * per_head + qi) * hw + p)] +=
                  sc[size_t(ki)] / z * v[size_t((hd * per_head + ki) * hw + p)];
        }
      std::vector<double> ref;
      conv1x1_oracle(att, c, h, wd, aw.out_w, aw.out_b, ref);
      for (int64_t i = 0; i < c * hw; ++i)
        attn_err = std::max(attn_err, std::fabs(double(out.data()[bi * c * hw +
                                                                  i]) -
                                                ref[size_t(i)]));
    }
  }

  // SFM fusion against the straight-line gate/mix/residual oracle.
  double sfm_err = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int64_t c = 1 + int64_t(rng() % 4);
    const int64_t h = 3 + int64_t(rng() % 4);
    const int64_t wd = 3 + int64_t(rng() % 4);
    const int64_t hw = h * wd;
    const int64_t n = 1 + int64_t(rng() % 2);
    SfmWeights w = random_sfm(c, rng);
    Tensor f_h = Tensor::uniform({n, c, h, wd}, rng, -1.0f, 1.0f);
    Tensor f_l = Tensor::uniform({n, c, h, wd}, rng, -1.0f, 1.0f);
    Tensor x_in = Tensor::uniform({n, c, h, wd}, rng, -1.0f, 1.0f);
    Tensor out = sfm_fuse(f_h, f_l, x_in, w);
    for (int64_t bi = 0; bi < n; ++bi) {
      const float* fh = f_h.data() + bi * c * hw;
      const float* fl = f_l.data() + bi * c * hw;
      const float* xi = x_in.data() + bi * c * hw;
      std::vector<double> u_avg(static_cast<size_t>(hw));
      std::vector<double> u_max(static_cast<size_t>(hw));
      for (int64_t p = 0; p < hw; ++p) {
        double acc = 0.0, mx = -1e30;
        for (int64_t ch = 0; ch < c; ++ch) {
          for (const float* src : {fh, fl}) {
            const double v = src[ch * hw + p];
            acc += v;
            mx = std::max(mx, v);
          }
        }
        u_avg[size_t(p)] = acc / double(2 * c);
        u_max[size_t(p)] = mx;
      }
      std::vector<double> gates(size_t(2 * hw));
      for (int o = 0; o < 2; ++o)
        for (int64_t r = 0; r < h; ++r)
          for (int64_t cc = 0; cc < wd; ++cc) {
            double acc = w.gate_b.data()[o];
            for (int i = 0; i < 2; ++i)
              for (int kr = 0; kr < 7; ++kr)
                for (int kc = 0; kc < 7; ++kc) {
                  const int64_t sr = r + kr - 3, sc = cc + kc - 3;
                  if (sr < 0 || sr >= h || sc < 0 || sc >= wd) continue;
                  const double src = i == 0 ? u_avg[size_t(sr * wd + sc)]
                                            : u_max[size_t(sr * wd + sc)];
                  acc += double(w.gate_w.data()[((o * 2 + i) * 7 + kr) * 7 +
                                                kc]) *
                         src;
                }
            gates[size_t(o * hw + r * wd + cc)] = 1.0 / (1.0 + std::exp(-acc));
          }
      std::vector<double> mixed(size_t(c * hw));
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < hw; ++p)
          mixed[size_t(ch * hw + p)] = gates[size_t(p)] * double(fh[ch * hw + p]) +
                                       gates[size_t(hw + p)] *
                                           double(fl[ch * hw + p]);
      for (int64_t o = 0; o < c; ++o)
        for (int64_t p = 0; p < hw; ++p) {
          double acc = w.out_b.data()[o];
          for (int64_t i = 0; i < c; ++i)
            acc += double(w.out_w.data()[o * c + i]) * mixed[size_t(i * hw + p)];
          const double ref = acc * double(xi[o * hw + p]);
          sfm_err = std::max(
              sfm_err,
              std::fabs(ref - double(out.data()[(bi * c + o) * hw + p])));
        }
    }
  }

  // Losses against per-pixel / per-class double recomputation.
  double ce_err = 0.0, dice_err = 0.0, total_err = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int64_t n = 1 + int64_t(rng() % 2);
    const int kk = 2 + int(rng() % 4);
    const int64_t h = 2 + int64_t(rng() % 4);
    const int64_t wd = 2 + int64_t(rng() % 4);
    const int64_t hw = h * wd;
    Tensor logits = Tensor::uniform({n, kk, h, wd}, rng, -3.0f, 3.0f);
    const bool use_ign = rng() % 2 == 0;
    const int ig = kk;  // sentinel outside the class range
    IntTensor labels{{n, h, wd}, std::vector<int32_t>(size_t(n * hw))};
    for (auto& v : labels.v) v = int32_t(rng() % uint32_t(kk));
    if (use_ign)
      for (size_t i = 1; i < labels.v.size(); i += 3) labels.v[i] = ig;

    Tensor ce = use_ign ? ce_loss(logits, labels, ig) : ce_loss(logits, labels);
    double acc = 0.0;
    int64_t counted = 0;
    for (int64_t bi = 0; bi < n; ++bi)
      for (int64_t p = 0; p < hw; ++p) {
        const int32_t lab = labels.v[size_t(bi * hw + p)];
        if (use_ign && lab == ig) continue;
        double mx = -1e300;
        for (int c = 0; c < kk; ++c)
          mx = std::max(mx, double(logits.data()[(bi * kk + c) * hw + p]));
        double z = 0.0;
        for (int c = 0; c < kk; ++c)
          z += std::exp(double(logits.data()[(bi * kk + c) * hw + p]) - mx);
        acc += mx + std::log(z) -
               double(logits.data()[(bi * kk + lab) * hw + p]);
        ++counted;
      }
    ce_err = std::max(ce_err, std::fabs(ce.item_hi() - acc / double(counted)));

    // Dice uses all-valid labels: batch-global per-class soft sums.
    IntTensor vlabels = labels;
    for (auto& v : vlabels.v)
      if (v == ig) v = int32_t(rng() % uint32_t(kk));
    Tensor dice = dice_loss(logits, vlabels, 1.0f);
    double dsum = 0.0;
    for (int c = 0; c < kk; ++c) {
      double inter = 0.0, pred = 0.0, truth = 0.0;
      for (int64_t bi = 0; bi < n; ++bi)
        for (int64_t p = 0; p < hw; ++p) {
          double mx = -1e300;
          for (int c2 = 0; c2 < kk; ++c2)
            mx = std::max(mx, double(logits.data()[(bi * kk + c2) * hw + p]));
          double z = 0.0;
          for (int c2 = 0; c2 < kk; ++c2)
            z += std::exp(double(logits.data()[(bi * kk + c2) * hw + p]) - mx);
          const double pc =
              std::exp(double(logits.data()[(bi * kk + c) * hw + p]) - mx) / z;
          pred += pc;
          if (vlabels.v[size_t(bi * hw + p)] == c) {
            inter += pc;
            truth += 1.0;
          }
        }
      dsum += (2.0 * inter + 1.0) / (pred + truth + 1.0);
    }
    dice_err = std::max(
        dice_err, std::fabs(double(dice.data()[0]) - (1.0 - dsum / kk)));

    // Composite must equal the dyadic-weighted sum of its own parts.
    Tensor tot = total_loss(logits, vlabels, 0.75f, 0.25f, 1.0f);
    const double want = 0.75 * ce_loss(logits, vlabels).item_hi() +
                        0.25 * dice_loss(logits, vlabels, 1.0f).item_hi();
    total_err = std::max(total_err, std::fabs(tot.item_hi() - want));
  }

  // Metrics against a brute-force recount.
  bool counts_exact = true;
  double metric_err = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int k = 2 + int(rng() % 5);
    const bool use_ign = rng() % 2 == 0;
    const int ig = use_ign ? int(rng() % uint32_t(k)) : -1;
    IntTensor label{{8, 8}, std::vector<int32_t>(64)};
    IntTensor pred{{8, 8}, std::vector<int32_t>(64)};
    for (auto& v : label.v) v = int32_t(rng() % uint32_t(k));
    for (auto& v : pred.v) v = int32_t(rng() % uint32_t(k));
    ConfusionMatrix cm(k);
    accumulate(cm, pred, label, ig);

    std::vector<uint64_t> counts(size_t(k) * size_t(k), 0);
    uint64_t ignored = 0;
    for (size_t i = 0; i < label.v.size(); ++i) {
      if (use_ign && label.v[i] == ig) {
        ++ignored;
        continue;
      }
      counts[size_t(label.v[i]) * size_t(k) + size_t(pred.v[i])] += 1;
    }
    uint64_t diag = 0, total = 0;
    for (int tt = 0; tt < k; ++tt)
      for (int p = 0; p < k; ++p) {
        if (cm.at(tt, p) != counts[size_t(tt) * size_t(k) + size_t(p)])
          counts_exact = false;
        total += counts[size_t(tt) * size_t(k) + size_t(p)];
        if (tt == p) diag += counts[size_t(tt) * size_t(k) + size_t(p)];
      }
    if (cm.ignored() != ignored) counts_exact = false;
    metric_err = std::max(
        metric_err,
        std::fabs(overall_accuracy(cm) - double(diag) / double(total)));

    double sum_iou = 0.0, sum_f1 = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
      const uint64_t tp = counts[size_t(c) * size_t(k) + size_t(c)];
      uint64_t fp = 0, fn = 0;
      for (int j = 0; j < k; ++j) {
        if (j == c) continue;
        fp += counts[size_t(j) * size_t(k) + size_t(c)];
        fn += counts[size_t(c) * size_t(k) + size_t(j)];
      }
      if (tp + fp + fn == 0) continue;
      ++present;
      sum_iou += double(tp) / double(tp + fp + fn);
      const double p = (tp + fp) ? double(tp) / double(tp + fp) : 0.0;
      const double r = (tp + fn) ? double(tp) / double(tp + fn) : 0.0;
      sum_f1 += (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    metric_err = std::max(metric_err,
                          std::fabs(mean_iou(cm) - sum_iou / present));
    metric_err =
        std::max(metric_err, std::fabs(mean_f1(cm) - sum_f1 / present));
  }

  detail = fmt("conv %.2g, attention %.2g, sfm %.2g, ce %.2g, dice %.2g, "
               "total %.2g, counts %s, metrics %.2g",
               conv_err, attn_err, sfm_err, ce_err, dice_err, total_err,
               counts_exact ? "exact" : "BROKEN", metric_err);
  return conv_err < 1e-5 && attn_err < 1e-5 && sfm_err < 1e-5 &&
         ce_err < 1e-5 && dice_err < 1e-5 && total_err < 1e-5 &&
         counts_exact && metric_err < 1e-9;
}

bool crit_overfit(std::string& detail) {
  const auto tmp = std::filesystem::temp_directory_path();
  const auto ck = tmp / "afenet_acceptance_c6.ckpt";
  const OverfitRun run = run_overfit(ck);
  std::error_code ec;
  std::filesystem::remove(ck, ec);

  // Window-5 moving average over the first 50 steps must strictly decrease.
  int violations = 0;
  for (int j = 1; j + 4 <= 49; ++j) {
    double prev = 0.0, cur = 0.0;
    for (int i = 0; i < 5; ++i) {
      prev += run.hist[size_t(j - 1 + i)].loss_total;
      cur += run.hist[size_t(j + i)].loss_total;
    }
    if (!(cur < prev)) ++violations;
  }

  detail = fmt("train mIoU %.3f, smoothed-loss violations %d of 45, "
               "final loss %.3f",
               run.miou, violations, run.hist.back().loss_total);
  return run.hist.size() == 200 && run.miou > 0.90 && violations == 0;
}

bool crit_adaptivity(std::string& detail) {
  // Self-validate the p-value machinery before trusting it: two-sided p for
  // t = 2.0 at 30 degrees of freedom is 0.05464.
  const double p_ref = student_two_sided(2.0, 30.0);
  if (std::fabs(p_ref - 0.054645) > 5e-4) {
    detail = fmt("t-distribution self-check failed: p(2.0, 30) = %.6f", p_ref);
    return false;
  }

  SynthSpec tr;
  tr.seed = 101;
  tr.count = 32;
  tr.size = 64;
  tr.urban_frac = 0.5f;
  std::vector<Sample> ds;
  for (auto& s : synth_dataset(tr)) ds.push_back(std::move(s.sample));

  ModelConfig mc = ModelConfig::desk();  // soft masks by default
  ModelWeights w = init_weights(mc, 11);
  TrainConfig tc;
  tc.learning_rate = 1e-3f;
  tc.batch_size = 4;
  tc.batches_per_epoch = 500;
  tc.epochs = 1;
  tc.augment_flip = true;
  tc.augment_scale = false;
  train(w, mc, ds, tc);

  NoGradGuard ng;
  auto low_window_area = [&](const Sample& s) {
    std::array<Tensor, 4> ratios;
    Tensor img = reshape(s.image, {1, 3, tr.size, tr.size});
    model_forward(img, w, mc, &ratios);
    double a = 0.0;
    for (int li = 0; li < 4; ++li)
      a += double(ratios[size_t(li)].data()[0]) *
           double(ratios[size_t(li)].data()[1]);
    return a / 4.0;
  };

  SynthSpec us = tr;
  us.seed = 202;
  us.count = 16;
  us.urban_frac = 1.0f;
  SynthSpec rs = tr;
  rs.seed = 303;
  rs.count = 16;
  rs.urban_frac = 0.0f;
  std::vector<double> urban, rural;
  for (auto& s : synth_dataset(us)) urban.push_back(low_window_area(s.sample));
  for (auto& s : synth_dataset(rs)) rural.push_back(low_window_area(s.sample));

  double m_u = 0.0, m_r = 0.0;
  for (double v : urban) m_u += v;
  for (double v : rural) m_r += v;
  m_u /= double(urban.size());
  m_r /= double(rural.size());

  double t_stat = 0.0, df = 0.0;
  const double p = welch_p(urban, rural, t_stat, df);
  detail = fmt("urban mean %.4f, rural mean %.4f, t %.2f, df %.1f, p %.2g",
               m_u, m_r, t_stat, df, p);
  return std::isfinite(t_stat) && p < 0.05;
}

bool crit_determinism(std::string& detail) {
  const auto tmp = std::filesystem::temp_directory_path();
  const auto ck_a = tmp / "afenet_acceptance_c8_a.ckpt";
  const auto ck_b = tmp / "afenet_acceptance_c8_b.ckpt";
  const OverfitRun a = run_overfit(ck_a);
  const OverfitRun b = run_overfit(ck_b);
  std::error_code ec;
  std::filesystem::remove(ck_a, ec);
  std::filesystem::remove(ck_b, ec);

  const bool bytes_ok = !a.ck_bytes.empty() && a.ck_bytes == b.ck_bytes;
  const bool report_ok = a.report == b.report;
  const bool hist_ok = history_csv(a.hist) == history_csv(b.hist);
  detail = fmt("checkpoints %zu bytes %s, metric reports %s, histories %s",
               a.ck_bytes.size(), bytes_ok ? "identical" : "DIFFER",
               report_ok ? "identical" : "DIFFER",
               hist_ok ? "identical" : "DIFFER");
  return bytes_ok && report_ok && hist_ok;
}

}  // namespace

int main() {
  int failed = 0;
  failed += !run_criterion(1, "accounting", 1.0, crit_accounting);
  failed += !run_criterion(2, "compression", 1.0, crit_compression);
  failed += !run_criterion(3, "spectral", 10.0, crit_spectral);
  failed += !run_criterion(4, "gradients", 120.0, crit_gradients);
  failed += !run_criterion(5, "oracles", 60.0, crit_oracles);
  failed += !run_criterion(6, "overfit", 300.0, crit_overfit);
  failed += !run_criterion(7, "adaptivity", 900.0, crit_adaptivity);
  failed += !run_criterion(8, "determinism", 600.0, crit_determinism);
  if (failed == 0)
    std::printf("all 8 criteria passed\n");
  else
    std::printf("%d of 8 criteria FAILED\n", failed);
  return failed;
}
