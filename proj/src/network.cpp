#include "afenet/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <utility>

namespace afenet {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

int ModelConfig::channels(int level) const {
  require(level >= 1 && level <= 4, "ModelConfig::channels: level out of range");
  return static_cast<int>(
      std::lround(double(stage_channels[level - 1]) * double(width_multiplier)));
}

void ModelConfig::validate() const {
  require(num_classes >= 2, "config: num_classes must be at least 2");
  require(input_channels >= 1, "config: input_channels must be positive");
  require(ffn_expansion >= 1, "config: ffn_expansion must be at least 1");
  require(mask_tau > 0.0f, "config: mask_tau must be positive");
  for (int i = 0; i < 3; ++i)
    require(stage_channels[i + 1] == 2 * stage_channels[i],
            "config: stage_channels must double at each stage");
  for (int i = 1; i <= 4; ++i) {
    require(channels(i) >= 2, "config: level " + std::to_string(i) +
                                  " has fewer than 2 channels after width "
                                  "scaling");
    require(channels(i) % heads[i - 1] == 0,
            "config: heads must divide channels at level " + std::to_string(i));
    require(encoder_blocks[i - 1] >= 1, "config: each stage needs a block");
    require(tb_depth[i - 1] >= 0, "config: tb_depth must be non-negative");
  }
}

ModelConfig ModelConfig::desk() {
  return ModelConfig{};  // defaults are the desk preset: channels 8/16/32/64
}

ModelConfig ModelConfig::full_size() {
  ModelConfig cfg;
  cfg.num_classes = 6;
  cfg.width_multiplier = 1.0f;
  cfg.tb_depth = {0, 0, 0, 2};
  cfg.heads = {4, 4, 8, 16};
  return cfg;
}

namespace {

Tensor he_conv(std::mt19937& rng, int64_t co, int64_t ci_per_group, int64_t k,
               float scale = 1.0f) {
  const float stddev =
      scale * std::sqrt(2.0f / static_cast<float>(ci_per_group * k * k));
  return Tensor::randn({co, ci_per_group, k, k}, rng, stddev);
}

// Variance-preserving scaling for projection convs on linear paths (no
// rectifier follows); the He gain would compound across the decoder's
// norm-free chains.
Tensor lin_conv(std::mt19937& rng, int64_t co, int64_t ci_per_group, int64_t k,
                float scale = 1.0f) {
  const float stddev =
      scale * std::sqrt(1.0f / static_cast<float>(ci_per_group * k * k));
  return Tensor::randn({co, ci_per_group, k, k}, rng, stddev);
}

Tensor he_linear(std::mt19937& rng, int64_t out, int64_t in) {
  return Tensor::randn({out, in}, rng, std::sqrt(2.0f / float(in)));
}

ConvNorm make_conv_norm(std::mt19937& rng, int64_t co, int64_t ci, int64_t k) {
  ConvNorm cn;
  cn.conv_w = he_conv(rng, co, ci, k);
  cn.norm_g = Tensor::full({co}, 1.0f);
  cn.norm_b = Tensor::zeros({co});
  return cn;
}

AttentionWeights make_attention(std::mt19937& rng, int64_t c) {
  AttentionWeights a;
  a.q_pw_w = lin_conv(rng, c, c, 1);
  a.q_pw_b = Tensor::zeros({c});
  a.q_dw_w = lin_conv(rng, c, 1, 3);
  a.q_dw_b = Tensor::zeros({c});
  a.k_pw_w = lin_conv(rng, c, c, 1);
  a.k_pw_b = Tensor::zeros({c});
  a.k_dw_w = lin_conv(rng, c, 1, 3);
  a.k_dw_b = Tensor::zeros({c});
  a.v_pw_w = lin_conv(rng, c, c, 1);
  a.v_pw_b = Tensor::zeros({c});
  a.v_dw_w = lin_conv(rng, c, 1, 3);
  a.v_dw_b = Tensor::zeros({c});
  a.out_w = lin_conv(rng, c, c, 1);
  a.out_b = Tensor::zeros({c});
  return a;
}

TransformerBlockWeights make_tb(std::mt19937& rng, int64_t c, int64_t e) {
  TransformerBlockWeights t;
  t.norm1_g = Tensor::full({c}, 1.0f);
  t.norm1_b = Tensor::zeros({c});
  t.qkv_pw_w = lin_conv(rng, 3 * c, c, 1);
  t.qkv_pw_b = Tensor::zeros({3 * c});
  t.qkv_dw_w = lin_conv(rng, 3 * c, 1, 3);
  t.qkv_dw_b = Tensor::zeros({3 * c});
  t.attn_out_w = lin_conv(rng, c, c, 1);
  t.attn_out_b = Tensor::zeros({c});
  t.norm2_g = Tensor::full({c}, 1.0f);
  t.norm2_b = Tensor::zeros({c});
  t.ffn_pw1_w = lin_conv(rng, 2 * e * c, c, 1);
  t.ffn_pw1_b = Tensor::zeros({2 * e * c});
  t.ffn_dw_w = lin_conv(rng, 2 * e * c, 1, 3);
  t.ffn_dw_b = Tensor::zeros({2 * e * c});
  t.ffn_pw2_w = lin_conv(rng, c, e * c, 1);
  t.ffn_pw2_b = Tensor::zeros({c});
  return t;
}

}  // namespace

ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937 rng(static_cast<uint32_t>(seed ^ (seed >> 32)));
  ModelWeights w;

  const int c1 = cfg.channels(1);
  w.encoder.stem = make_conv_norm(rng, c1, cfg.input_channels, 7);
  int prev = c1;
  for (int s = 0; s < 4; ++s) {
    const int cs = cfg.channels(s + 1);
    for (int b = 0; b < cfg.encoder_blocks[s]; ++b) {
      BasicBlock blk;
      blk.stride = (s > 0 && b == 0) ? 2 : 1;
      const int cin = b == 0 ? prev : cs;
      blk.c1 = make_conv_norm(rng, cs, cin, 3);
      blk.c2 = make_conv_norm(rng, cs, cs, 3);
      if (cin != cs || blk.stride != 1)
        blk.down = make_conv_norm(rng, cs, cin, 1);
      w.encoder.stages[s].push_back(std::move(blk));
    }
    prev = cs;
  }

  for (int li = 0; li < 4; ++li) {
    DecoderLevelWeights d;
    const int c = cfg.channels(li + 1);
    AfsimWeights& a = d.afsim;
    if (li < 3) {
      a.fuse_w = lin_conv(rng, c, cfg.channels(li + 2) + c, 1);
      a.fuse_b = Tensor::zeros({c});
    }
    a.dw5_w = lin_conv(rng, c, 1, 5);
    a.dw5_b = Tensor::zeros({c});
    a.dw7_w = lin_conv(rng, c, 1, 7);
    a.dw7_b = Tensor::zeros({c});
    a.high = make_attention(rng, c);
    a.low = make_attention(rng, c);
    a.freq.align_w = lin_conv(rng, c, cfg.input_channels, 3);
    a.freq.align_b = Tensor::zeros({c});
    const int64_t cd = compress_dim(c);
    a.freq.awm.fc1_w = he_linear(rng, cd, c);
    a.freq.awm.fc1_b = Tensor::zeros({cd});
    a.freq.awm.fc2_w = he_linear(rng, 2, cd);
    a.freq.awm.fc2_b = Tensor::zeros({2});
    a.head_count = cfg.heads[li];
    d.sfm.gate_w = lin_conv(rng, 2, 2, 7);
    d.sfm.gate_b = Tensor::zeros({2});
    if (cfg.identity_init) {
      // F-hat = 1 + small mix at init: the multiplicative gate neither
      // explodes activations level over level nor starves any branch.
      d.sfm.out_w = lin_conv(rng, c, c, 1, 0.1f);
      d.sfm.out_b = Tensor::full({c}, 1.0f);
    } else {
      d.sfm.out_w = lin_conv(rng, c, c, 1);
      d.sfm.out_b = Tensor::zeros({c});
    }
    for (int j = 0; j < cfg.tb_depth[li]; ++j)
      d.tbs.push_back(make_tb(rng, c, cfg.ffn_expansion));
    w.decoder[li] = std::move(d);
  }

  w.head_w = lin_conv(rng, cfg.num_classes, c1, 1);
  w.head_b = Tensor::zeros({cfg.num_classes});
  visit_params(w, [](const std::string&, Tensor& t) {
    t.set_requires_grad(true);
  });
  return w;
}

namespace {

template <typename W, typename Fn>
void visit_impl(W& w, const Fn& fn) {
  auto cn = [&](const std::string& p, auto& c) {
    fn(p + ".conv_w", c.conv_w);
    fn(p + ".norm_g", c.norm_g);
    fn(p + ".norm_b", c.norm_b);
  };
  cn("encoder.stem", w.encoder.stem);
  for (int s = 0; s < 4; ++s)
    for (size_t b = 0; b < w.encoder.stages[s].size(); ++b) {
      auto& blk = w.encoder.stages[s][b];
      const std::string p =
          "encoder.s" + std::to_string(s + 1) + ".b" + std::to_string(b);
      cn(p + ".c1", blk.c1);
      cn(p + ".c2", blk.c2);
      if (blk.down.conv_w.defined()) cn(p + ".down", blk.down);
    }
  for (int li = 0; li < 4; ++li) {
    auto& d = w.decoder[li];
    const std::string p = "decoder.l" + std::to_string(li + 1);
    auto& a = d.afsim;
    if (a.fuse_w.defined()) {
      fn(p + ".afsim.fuse_w", a.fuse_w);
      fn(p + ".afsim.fuse_b", a.fuse_b);
    }
    fn(p + ".afsim.dw5_w", a.dw5_w);
    fn(p + ".afsim.dw5_b", a.dw5_b);
    fn(p + ".afsim.dw7_w", a.dw7_w);
    fn(p + ".afsim.dw7_b", a.dw7_b);
    auto attn = [&](const std::string& bp, auto& aw) {
      fn(bp + ".q_pw_w", aw.q_pw_w);
      fn(bp + ".q_pw_b", aw.q_pw_b);
      fn(bp + ".q_dw_w", aw.q_dw_w);
      fn(bp + ".q_dw_b", aw.q_dw_b);
      fn(bp + ".k_pw_w", aw.k_pw_w);
      fn(bp + ".k_pw_b", aw.k_pw_b);
      fn(bp + ".k_dw_w", aw.k_dw_w);
      fn(bp + ".k_dw_b", aw.k_dw_b);
      fn(bp + ".v_pw_w", aw.v_pw_w);
      fn(bp + ".v_pw_b", aw.v_pw_b);
      fn(bp + ".v_dw_w", aw.v_dw_w);
      fn(bp + ".v_dw_b", aw.v_dw_b);
      fn(bp + ".out_w", aw.out_w);
      fn(bp + ".out_b", aw.out_b);
    };
    attn(p + ".afsim.high", a.high);
    attn(p + ".afsim.low", a.low);
    fn(p + ".afsim.freq.align_w", a.freq.align_w);
    fn(p + ".afsim.freq.align_b", a.freq.align_b);
    fn(p + ".afsim.freq.awm.fc1_w", a.freq.awm.fc1_w);
    fn(p + ".afsim.freq.awm.fc1_b", a.freq.awm.fc1_b);
    fn(p + ".afsim.freq.awm.fc2_w", a.freq.awm.fc2_w);
    fn(p + ".afsim.freq.awm.fc2_b", a.freq.awm.fc2_b);
    fn(p + ".sfm.gate_w", d.sfm.gate_w);
    fn(p + ".sfm.gate_b", d.sfm.gate_b);
    fn(p + ".sfm.out_w", d.sfm.out_w);
    fn(p + ".sfm.out_b", d.sfm.out_b);
    for (size_t j = 0; j < d.tbs.size(); ++j) {
      auto& t = d.tbs[j];
      const std::string tp = p + ".tb" + std::to_string(j);
      fn(tp + ".norm1_g", t.norm1_g);
      fn(tp + ".norm1_b", t.norm1_b);
      fn(tp + ".qkv_pw_w", t.qkv_pw_w);
      fn(tp + ".qkv_pw_b", t.qkv_pw_b);
      fn(tp + ".qkv_dw_w", t.qkv_dw_w);
      fn(tp + ".qkv_dw_b", t.qkv_dw_b);
      fn(tp + ".attn_out_w", t.attn_out_w);
      fn(tp + ".attn_out_b", t.attn_out_b);
      fn(tp + ".norm2_g", t.norm2_g);
      fn(tp + ".norm2_b", t.norm2_b);
      fn(tp + ".ffn_pw1_w", t.ffn_pw1_w);
      fn(tp + ".ffn_pw1_b", t.ffn_pw1_b);
      fn(tp + ".ffn_dw_w", t.ffn_dw_w);
      fn(tp + ".ffn_dw_b", t.ffn_dw_b);
      fn(tp + ".ffn_pw2_w", t.ffn_pw2_w);
      fn(tp + ".ffn_pw2_b", t.ffn_pw2_b);
    }
  }
  fn("head.w", w.head_w);
  fn("head.b", w.head_b);
}

}  // namespace

void visit_params(ModelWeights& w,
                  const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_impl(w, fn);
}

void visit_params(
    const ModelWeights& w,
    const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit_impl(w, fn);
}

namespace {

Tensor conv_norm(const Tensor& x, const ConvNorm& cn, int stride, int pad) {
  return channel_norm(conv2d(x, cn.conv_w, Tensor{}, stride, pad), cn.norm_g,
                      cn.norm_b);
}

Tensor basic_block(const Tensor& x, const BasicBlock& b) {
  Tensor y = relu(conv_norm(x, b.c1, b.stride, 1));
  y = conv_norm(y, b.c2, 1, 1);
  Tensor shortcut =
      b.down.conv_w.defined() ? conv_norm(x, b.down, b.stride, 0) : x;
  return relu(add(y, shortcut));
}

}  // namespace

EncoderFeatures encoder_forward(const Tensor& image, const EncoderWeights& w) {
  if (image.rank() != 4)
    throw std::invalid_argument("encoder_forward: image must be (N,C,H,W)");
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
    throw std::invalid_argument(
        "encoder_forward: spatial dims must be divisible by 32, got " +
        std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)));
  Tensor x = relu(conv_norm(image, w.stem, 2, 3));
  x = max_pool2d(x, 3, 2, 1);
  EncoderFeatures out;
  for (int s = 0; s < 4; ++s) {
    for (const BasicBlock& b : w.stages[s]) x = basic_block(x, b);
    out.level[s] = x;
  }
  return out;
}

Tensor transformer_block(const Tensor& x, const TransformerBlockWeights& w,
                         int heads) {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (heads <= 0 || c % heads != 0)
    throw std::invalid_argument("transformer_block: heads must divide C");
  const int64_t hw = h * wd, per_head = c / heads;

  Tensor a = channel_norm(x, w.norm1_g, w.norm1_b);
  Tensor qkv = conv2d(conv2d(a, w.qkv_pw_w, w.qkv_pw_b), w.qkv_dw_w,
                      w.qkv_dw_b, 1, 1, 3 * c);
  Tensor q = reshape(slice(qkv, 1, 0, c), {n, heads, per_head, hw});
  Tensor k = reshape(slice(qkv, 1, c, c), {n, heads, per_head, hw});
  Tensor v = reshape(slice(qkv, 1, 2 * c, c), {n, heads, per_head, hw});
  Tensor scores = affine(matmul(q, transpose_last2(k)),
                         float(1.0 / std::sqrt(double(hw))), 0.0f);
  Tensor attn = reshape(matmul(softmax(scores, -1), v), {n, c, h, wd});
  Tensor y = add(x, conv2d(attn, w.attn_out_w, w.attn_out_b));

  Tensor b = channel_norm(y, w.norm2_g, w.norm2_b);
  const int64_t ec = w.ffn_pw1_w.dim(0) / 2;
  Tensor f = conv2d(conv2d(b, w.ffn_pw1_w, w.ffn_pw1_b), w.ffn_dw_w,
                    w.ffn_dw_b, 1, 1, 2 * ec);
  Tensor gated = mul(gelu(slice(f, 1, 0, ec)), slice(f, 1, ec, ec));
  return add(y, conv2d(gated, w.ffn_pw2_w, w.ffn_pw2_b));
}

Tensor model_forward(const Tensor& image, const ModelWeights& w,
                     const ModelConfig& cfg,
                     std::array<Tensor, 4>* ratios_out) {
  if (image.dim(1) != cfg.input_channels)
    throw std::invalid_argument("model_forward: expected " +
                                std::to_string(cfg.input_channels) +
                                " input channels, got " +
                                std::to_string(image.dim(1)));
  EncoderFeatures enc = encoder_forward(image, w.encoder);

  std::array<Tensor, 4> raw;  // image pyramid at decoder resolutions
  raw[0] = avg_pool2d(image, 4);
  for (int i = 1; i < 4; ++i) raw[i] = avg_pool2d(raw[i - 1], 2);

  Tensor dec;  // undefined at the deepest level (the i=4 rule)
  for (int li = 3; li >= 0; --li) {
    const DecoderLevelWeights& lw = w.decoder[li];
    Tensor x_in, ratios;
    auto [fh, fl] = afsim_forward(raw[li], enc.level[li], dec, lw.afsim,
                                  cfg.mask_mode, cfg.mask_tau, &x_in, &ratios);
    Tensor x = sfm_fuse(fh, fl, x_in, lw.sfm);
    for (const TransformerBlockWeights& tb : lw.tbs)
      x = transformer_block(x, tb, cfg.heads[li]);
    if (ratios_out) (*ratios_out)[li] = ratios;
    dec = x;
  }
  Tensor logits = conv2d(dec, w.head_w, w.head_b);
  return upsample(logits, 4, UpsampleMode::bilinear);
}

namespace {

int64_t conv_params(int64_t cin_per_group, int64_t cout, int64_t k,
                    bool bias) {
  return cin_per_group * cout * k * k + (bias ? cout : 0);
}

int64_t attention_params(int64_t c) {
  // q/k/v: pointwise + depthwise pairs, then the output projection.
  return 3 * (conv_params(c, c, 1, true) + conv_params(1, c, 3, true)) +
         conv_params(c, c, 1, true);
}

int64_t tb_params(int64_t c, int64_t e) {
  return 2 * c                           // norm1
         + conv_params(c, 3 * c, 1, true) + conv_params(1, 3 * c, 3, true) +
         conv_params(c, c, 1, true)      // attention projections
         + 2 * c                         // norm2
         + conv_params(c, 2 * e * c, 1, true) +
         conv_params(1, 2 * e * c, 3, true) + conv_params(e * c, c, 1, true);
}

}  // namespace

int64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  int64_t total = 0;
  const int c1 = cfg.channels(1);
  total += conv_params(cfg.input_channels, c1, 7, false) + 2 * c1;  // stem
  int prev = c1;
  for (int s = 0; s < 4; ++s) {
    const int cs = cfg.channels(s + 1);
    for (int b = 0; b < cfg.encoder_blocks[s]; ++b) {
      const int cin = b == 0 ? prev : cs;
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      total += conv_params(cin, cs, 3, false) + 2 * cs;
      total += conv_params(cs, cs, 3, false) + 2 * cs;
      if (cin != cs || stride != 1) total += conv_params(cin, cs, 1, false) + 2 * cs;
    }
    prev = cs;
  }
  for (int li = 0; li < 4; ++li) {
    const int64_t c = cfg.channels(li + 1);
    if (li < 3) total += conv_params(cfg.channels(li + 2) + c, c, 1, true);
    total += conv_params(1, c, 5, true) + conv_params(1, c, 7, true);
    total += 2 * attention_params(c);
    total += conv_params(cfg.input_channels, c, 3, true);  // spectrum align
    const int64_t d = compress_dim(c);
    total += d * c + d + 2 * d + 2;  // adaptive window MLP
    total += conv_params(2, 2, 7, true) + conv_params(c, c, 1, true);  // SFM
    total += cfg.tb_depth[li] * tb_params(c, cfg.ffn_expansion);
  }
  total += conv_params(c1, cfg.num_classes, 1, true);  // head
  return total;
}

int64_t count_flops(const ModelConfig& cfg, int64_t height, int64_t width) {
  cfg.validate();
  require(height % 32 == 0 && width % 32 == 0,
          "count_flops: dims must be divisible by 32");
  auto conv_fl = [](int64_t cin_pg, int64_t cout, int64_t k, int64_t hw) {
    return 2 * cin_pg * cout * k * k * hw;
  };
  int64_t total = 0;
  const int64_t c1 = cfg.channels(1);
  total += conv_fl(cfg.input_channels, c1, 7, (height / 2) * (width / 2));
  int64_t prev = c1;
  for (int s = 0; s < 4; ++s) {
    const int64_t cs = cfg.channels(s + 1);
    const int64_t hw = (height >> (2 + s)) * (width >> (2 + s));
    for (int b = 0; b < cfg.encoder_blocks[s]; ++b) {
      const int64_t cin = b == 0 ? prev : cs;
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      total += conv_fl(cin, cs, 3, hw) + conv_fl(cs, cs, 3, hw);
      if (cin != cs || stride != 1) total += conv_fl(cin, cs, 1, hw);
    }
    prev = cs;
  }
  for (int li = 0; li < 4; ++li) {
    const int64_t c = cfg.channels(li + 1);
    const int64_t h = height >> (2 + li), w = width >> (2 + li);
    const int64_t hw = h * w;
    if (li < 3) total += conv_fl(cfg.channels(li + 2) + c, c, 1, hw);
    total += conv_fl(cfg.input_channels, c, 3, hw);  // spectrum align
    const int64_t d = compress_dim(c);
    total += 2 * (d * c + 2 * d);  // adaptive window MLP
    // One forward and two inverse 2D transforms over C channels.
    total += static_cast<int64_t>(3.0 * double(c) * 5.0 * double(hw) *
                                  std::log2(double(hw)));
    total += conv_fl(1, c, 5, hw) + conv_fl(1, c, 7, hw);
    const int64_t heads = cfg.heads[li];
    // Two cross-attention branches: projections plus channel-token matmuls.
    total += 2 * (3 * (conv_fl(c, c, 1, hw) + conv_fl(1, c, 3, hw)) +
                  2 * (2 * c * c * hw / heads) + conv_fl(c, c, 1, hw));
    total += conv_fl(2, 2, 7, hw) + conv_fl(c, c, 1, hw);  // SFM
    const int64_t e = cfg.ffn_expansion;
    total += cfg.tb_depth[li] *
             (conv_fl(c, 3 * c, 1, hw) + conv_fl(1, 3 * c, 3, hw) +
              2 * (2 * c * c * hw / heads) + conv_fl(c, c, 1, hw) +
              conv_fl(c, 2 * e * c, 1, hw) + conv_fl(1, 2 * e * c, 3, hw) +
              conv_fl(e * c, c, 1, hw));
  }
  total += conv_fl(c1, cfg.num_classes, 1, (height / 4) * (width / 4));
  return total;
}

namespace {

constexpr uint32_t kCheckpointVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  buf.push_back(char(v & 0xff));
  buf.push_back(char((v >> 8) & 0xff));
  buf.push_back(char((v >> 16) & 0xff));
  buf.push_back(char((v >> 24) & 0xff));
}

void put_f32(std::string& buf, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(buf, v);
}

class Reader {
 public:
  Reader(std::string data, std::string path)
      : data_(std::move(data)), path_(std::move(path)) {}
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | uint8_t(data_[pos_ + size_t(i)]);
    pos_ += 4;
    return v;
  }
  float f32() {
    const uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string str(size_t len) {
    need(len);
    std::string s = data_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  void floats(float* dst, size_t count) {
    need(count * 4);
    for (size_t i = 0; i < count; ++i) {
      uint32_t v = 0;
      for (int b = 3; b >= 0; --b)
        v = (v << 8) | uint8_t(data_[pos_ + i * 4 + size_t(b)]);
      std::memcpy(dst + i, &v, 4);
    }
    pos_ += count * 4;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > data_.size())
      throw std::runtime_error("checkpoint " + path_ +
                               ": truncated file (needed " + std::to_string(n) +
                               " more bytes at offset " + std::to_string(pos_) +
                               ")");
  }
  std::string data_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string buf;
  buf += "AFEN";
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<uint32_t>(ck.entries.size()));
  for (const auto& [name, t] : ck.entries) {
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf += name;
    put_u32(buf, static_cast<uint32_t>(t.rank()));
    for (int64_t i = 0; i < t.rank(); ++i)
      put_u32(buf, static_cast<uint32_t>(t.dim(i)));
    for (int64_t i = 0; i < t.numel(); ++i) put_f32(buf, t.data()[i]);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint " + path + ": cannot open for writing");
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out) throw std::runtime_error("checkpoint " + path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint " + path + ": cannot open");
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  Reader r(std::move(data), path);
  if (r.str(4) != "AFEN")
    throw std::runtime_error("checkpoint " + path + ": bad magic bytes");
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path + ": unsupported version " +
                             std::to_string(version));
  const uint32_t count = r.u32();
  Checkpoint ck;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const uint32_t rank = r.u32();
    Shape shape;
    int64_t numel = 1;
    for (uint32_t k = 0; k < rank; ++k) {
      shape.push_back(int64_t(r.u32()));
      numel *= shape.back();
    }
    std::vector<float> vals(static_cast<size_t>(numel));
    r.floats(vals.data(), static_cast<size_t>(numel));
    if (!ck.entries.emplace(name, Tensor::from_data(shape, std::move(vals)))
             .second)
      throw std::runtime_error("checkpoint " + path + ": duplicate entry '" +
                               name + "'");
  }
  if (!r.at_end())
    throw std::runtime_error("checkpoint " + path +
                             ": trailing bytes after last entry");
  return ck;
}

namespace {

Tensor scalar_entry(float v) { return Tensor::from_data({1}, {v}); }

Tensor quad_entry(const std::array<int, 4>& a) {
  return Tensor::from_data(
      {4}, {float(a[0]), float(a[1]), float(a[2]), float(a[3])});
}

float get_scalar(const Checkpoint& ck, const std::string& name) {
  auto it = ck.entries.find(name);
  if (it == ck.entries.end())
    throw std::runtime_error("checkpoint: missing entry '" + name + "'");
  if (it->second.numel() != 1)
    throw std::runtime_error("checkpoint: entry '" + name +
                             "' is not a scalar");
  return it->second.data()[0];
}

std::array<int, 4> get_quad(const Checkpoint& ck, const std::string& name) {
  auto it = ck.entries.find(name);
  if (it == ck.entries.end())
    throw std::runtime_error("checkpoint: missing entry '" + name + "'");
  if (it->second.numel() != 4)
    throw std::runtime_error("checkpoint: entry '" + name +
                             "' must hold 4 values");
  std::array<int, 4> a;
  for (int i = 0; i < 4; ++i)
    a[size_t(i)] = int(std::lround(double(it->second.data()[i])));
  return a;
}

}  // namespace

Checkpoint pack_model(const ModelWeights& w, const ModelConfig& cfg,
                      int64_t step) {
  Checkpoint ck;
  ck.entries["__config__.num_classes"] = scalar_entry(float(cfg.num_classes));
  ck.entries["__config__.stage_channels"] = quad_entry(cfg.stage_channels);
  ck.entries["__config__.width_multiplier"] =
      scalar_entry(cfg.width_multiplier);
  ck.entries["__config__.encoder_blocks"] = quad_entry(cfg.encoder_blocks);
  ck.entries["__config__.tb_depth"] = quad_entry(cfg.tb_depth);
  ck.entries["__config__.heads"] = quad_entry(cfg.heads);
  ck.entries["__config__.ffn_expansion"] = scalar_entry(float(cfg.ffn_expansion));
  ck.entries["__config__.mask_mode"] =
      scalar_entry(cfg.mask_mode == MaskMode::soft ? 1.0f : 0.0f);
  ck.entries["__config__.mask_tau"] = scalar_entry(cfg.mask_tau);
  ck.entries["__config__.input_channels"] =
      scalar_entry(float(cfg.input_channels));
  ck.entries["__config__.identity_init"] =
      scalar_entry(cfg.identity_init ? 1.0f : 0.0f);
  ck.entries["__step__"] = scalar_entry(float(step));
  visit_params(w, [&](const std::string& name, const Tensor& t) {
    ck.entries[name] = t;
  });
  return ck;
}

void unpack_model(const Checkpoint& ck, ModelWeights& w, ModelConfig& cfg,
                  int64_t& step) {
  ModelConfig c;
  c.num_classes = int(std::lround(get_scalar(ck, "__config__.num_classes")));
  c.stage_channels = get_quad(ck, "__config__.stage_channels");
  c.width_multiplier = get_scalar(ck, "__config__.width_multiplier");
  c.encoder_blocks = get_quad(ck, "__config__.encoder_blocks");
  c.tb_depth = get_quad(ck, "__config__.tb_depth");
  c.heads = get_quad(ck, "__config__.heads");
  c.ffn_expansion = int(std::lround(get_scalar(ck, "__config__.ffn_expansion")));
  c.mask_mode = get_scalar(ck, "__config__.mask_mode") > 0.5f ? MaskMode::soft
                                                              : MaskMode::hard;
  c.mask_tau = get_scalar(ck, "__config__.mask_tau");
  c.input_channels =
      int(std::lround(get_scalar(ck, "__config__.input_channels")));
  c.identity_init = get_scalar(ck, "__config__.identity_init") > 0.5f;
  c.validate();

  ModelWeights fresh = init_weights(c, 0);
  visit_params(fresh, [&](const std::string& name, Tensor& t) {
    auto it = ck.entries.find(name);
    if (it == ck.entries.end())
      throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
    if (it->second.shape() != t.shape())
      throw std::runtime_error("checkpoint: parameter '" + name +
                               "' has unexpected shape");
    // Own a fresh trainable copy; aliasing the table would let later
    // optimizer updates mutate the caller's checkpoint.
    t = Tensor::from_data(it->second.shape(), it->second.vec());
    t.set_requires_grad(true);
  });
  step = int64_t(std::llround(double(get_scalar(ck, "__step__"))));
  w = std::move(fresh);
  cfg = c;
}

}  // namespace afenet
