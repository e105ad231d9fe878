#include "afenet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace afenet {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Uniform double in [0, 1) from the top 53 bits; layout locked so seeded
// runs reproduce across standard libraries.
double u01(std::mt19937_64& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Unbiased integer in [0, n) by rejection.
uint64_t uniform_int(std::mt19937_64& eng, uint64_t n) {
  const uint64_t span = std::numeric_limits<uint64_t>::max();
  const uint64_t limit = span - span % n;
  uint64_t r = eng();
  while (r >= limit) r = eng();
  return r % n;
}

Tensor deep_copy(const Tensor& t) {
  return Tensor::from_data(t.shape(), t.vec());
}

// Sampling walks shuffled passes over the dataset: pass p is a Fisher-Yates
// permutation seeded by (seed, pass), so every n consecutive draws cover the
// dataset exactly once and any slot's index is computable independently.
std::vector<size_t> pass_permutation(uint64_t seed, uint64_t pass, size_t n) {
  std::vector<size_t> p(n);
  for (size_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 eng(mix_seed(seed, (1ULL << 32) + pass));
  for (size_t i = n - 1; i > 0; --i) {
    const size_t j = static_cast<size_t>(uniform_int(eng, i + 1));
    std::swap(p[i], p[j]);
  }
  return p;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace

void TrainConfig::validate() const {
  check(learning_rate >= 0.0f, "train config: learning_rate must be >= 0");
  check(weight_decay >= 0.0f, "train config: weight_decay must be >= 0");
  check(beta1 >= 0.0f && beta1 < 1.0f, "train config: beta1 must be in [0, 1)");
  check(beta2 >= 0.0f && beta2 < 1.0f, "train config: beta2 must be in [0, 1)");
  check(adam_epsilon > 0.0f, "train config: adam_epsilon must be positive");
  check(batch_size >= 1, "train config: batch_size must be >= 1");
  check(batches_per_epoch >= 1,
        "train config: batches_per_epoch must be >= 1");
  check(epochs >= 0, "train config: epochs must be >= 0");
  check(ce_weight >= 0.0f && dice_weight >= 0.0f,
        "train config: loss weights must be >= 0");
  check(dice_smooth > 0.0f, "train config: dice_smooth must be positive");
  check(checkpoint_every >= 0, "train config: checkpoint_every must be >= 0");
  check(log_every >= 0, "train config: log_every must be >= 0");
}

Tensor ce_loss(const Tensor& logits, const IntTensor& labels,
               int ignore_index) {
  check(logits.defined() && logits.rank() == 4,
        "ce_loss: logits must be (N,K,H,W)");
  const int64_t N = logits.dim(0), K = logits.dim(1);
  const int64_t H = logits.dim(2), W = logits.dim(3);
  check(labels.shape == Shape({N, H, W}),
        "ce_loss: labels " + shape_str(labels.shape) + " do not match logits " +
            shape_str(logits.shape()));
  const int64_t plane = H * W;
  const float* x = logits.data();
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t p = 0; p < plane; ++p) {
      const int32_t lab = labels.v[static_cast<size_t>(n * plane + p)];
      if (lab == ignore_index) continue;
      if (lab < 0 || lab >= K)
        throw std::invalid_argument(
            "ce_loss: label " + std::to_string(lab) + " out of range [0, " +
            std::to_string(K) + ") at pixel (n=" + std::to_string(n) +
            ", y=" + std::to_string(p / W) + ", x=" + std::to_string(p % W) +
            ")");
      const float* px = x + n * K * plane + p;
      double mx = px[0];
      for (int64_t k = 1; k < K; ++k)
        mx = std::max(mx, static_cast<double>(px[k * plane]));
      double se = 0.0;
      for (int64_t k = 0; k < K; ++k)
        se += std::exp(static_cast<double>(px[k * plane]) - mx);
      acc += mx + std::log(se) - static_cast<double>(px[lab * plane]);
      ++count;
    }
  }
  if (count == 0) throw std::runtime_error("ce_loss: every pixel is ignored");
  const double value = acc / static_cast<double>(count);
  const double inv = 1.0 / static_cast<double>(count);
  IntTensor labs = labels;
  Tensor result = make_op(
      "ce_loss", {1}, {static_cast<float>(value)}, {logits},
      [logits, labs = std::move(labs), ignore_index, K, plane, inv](
          detail::Node& node) {
        if (!logits.requires_grad()) return;
        const double g = static_cast<double>(node.grad[0]) * inv;
        float* gx = logits.node()->grad_buf();
        const float* x = logits.data();
        const int64_t N = logits.dim(0);
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t p = 0; p < plane; ++p) {
            const int32_t lab = labs.v[static_cast<size_t>(n * plane + p)];
            if (lab == ignore_index) continue;
            const float* px = x + n * K * plane + p;
            float* gp = gx + n * K * plane + p;
            double mx = px[0];
            for (int64_t k = 1; k < K; ++k)
              mx = std::max(mx, static_cast<double>(px[k * plane]));
            double se = 0.0;
            for (int64_t k = 0; k < K; ++k)
              se += std::exp(static_cast<double>(px[k * plane]) - mx);
            for (int64_t k = 0; k < K; ++k) {
              double soft =
                  std::exp(static_cast<double>(px[k * plane]) - mx) / se;
              if (k == lab) soft -= 1.0;
              gp[k * plane] += static_cast<float>(g * soft);
            }
          }
        }
      });
  result.node()->hi_scalar = value;
  return result;
}

Tensor dice_loss(const Tensor& logits, const IntTensor& labels, float smooth) {
  check(logits.defined() && logits.rank() == 4,
        "dice_loss: logits must be (N,K,H,W)");
  check(smooth > 0.0f, "dice_loss: smooth must be positive");
  const int64_t N = logits.dim(0), K = logits.dim(1);
  const int64_t H = logits.dim(2), W = logits.dim(3);
  check(labels.shape == Shape({N, H, W}),
        "dice_loss: labels " + shape_str(labels.shape) +
            " do not match logits " + shape_str(logits.shape()));
  Tensor p = softmax(logits, 1);
  Tensor y = one_hot(labels, static_cast<int>(K));
  Tensor inter = sum_axes(mul(p, y), {0, 2, 3}, false);  // (K)
  Tensor psum = sum_axes(p, {0, 2, 3}, false);
  Tensor ysum = sum_axes(y, {0, 2, 3}, false);
  Tensor dice = divide(affine(inter, 2.0f, smooth),
                       affine(add(psum, ysum), 1.0f, smooth));
  return affine(mean(dice), -1.0f, 1.0f);
}

Tensor total_loss(const Tensor& logits, const IntTensor& labels,
                  float ce_weight, float dice_weight, float smooth,
                  int ignore_index) {
  Tensor ce = ce_loss(logits, labels, ignore_index);
  Tensor dc = dice_loss(logits, labels, smooth);
  return add(affine(ce, ce_weight, 0.0f), affine(dc, dice_weight, 0.0f));
}

std::vector<std::pair<std::string, Tensor>> named_params(ModelWeights& w) {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_params(w, [&out](const std::string& name, Tensor& t) {
    out.emplace_back(name, t);
  });
  return out;
}

void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
               AdamState& state, const TrainConfig& cfg) {
  cfg.validate();
  state.step += 1;
  const double lr = cfg.learning_rate;
  const double wd = cfg.weight_decay;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double eps = cfg.adam_epsilon;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    Tensor& m = state.m[name];
    Tensor& v = state.v[name];
    if (!m.defined()) m = Tensor::zeros(p.shape());
    if (!v.defined()) v = Tensor::zeros(p.shape());
    if (m.shape() != p.shape() || v.shape() != p.shape())
      throw std::runtime_error("adam_step: moment shape mismatch for '" +
                               name + "'");
    const float* g = p.grad_data();
    float* pd = p.mutable_data();
    float* md = m.mutable_data();
    float* vd = v.mutable_data();
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      double gi = g ? static_cast<double>(g[i]) : 0.0;
      double base = pd[i];
      if (cfg.coupled_weight_decay) {
        gi += wd * base;
      } else {
        base -= lr * wd * base;
      }
      const double mi = b1 * md[i] + (1.0 - b1) * gi;
      const double vi = b2 * vd[i] + (1.0 - b2) * gi * gi;
      md[i] = static_cast<float>(mi);
      vd[i] = static_cast<float>(vi);
      const double delta = -lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      pd[i] = static_cast<float>(base + delta);
    }
  }
}

Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w) {
  check(image.defined() && image.rank() == 3,
        "resize_bilinear: image must be (C,H,W)");
  check(out_h >= 1 && out_w >= 1, "resize_bilinear: output must be non-empty");
  const int64_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  std::vector<float> out(static_cast<size_t>(C * out_h * out_w));
  const float* src = image.data();
  // Half-pixel centers: source position of output pixel center i is
  // (i + 0.5) * in/out - 0.5, clamped to the valid sample range.
  for (int64_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp(
        (static_cast<double>(y) + 0.5) * static_cast<double>(H) /
                static_cast<double>(out_h) -
            0.5,
        0.0, static_cast<double>(H - 1));
    const int64_t y0 = static_cast<int64_t>(fy);
    const int64_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp(
          (static_cast<double>(x) + 0.5) * static_cast<double>(W) /
                  static_cast<double>(out_w) -
              0.5,
          0.0, static_cast<double>(W - 1));
      const int64_t x0 = static_cast<int64_t>(fx);
      const int64_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - static_cast<double>(x0);
      for (int64_t c = 0; c < C; ++c) {
        const float* pc = src + c * H * W;
        const double top = (1.0 - wx) * pc[y0 * W + x0] + wx * pc[y0 * W + x1];
        const double bot = (1.0 - wx) * pc[y1 * W + x0] + wx * pc[y1 * W + x1];
        out[static_cast<size_t>((c * out_h + y) * out_w + x)] =
            static_cast<float>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return Tensor::from_data({C, out_h, out_w}, std::move(out));
}

IntTensor resize_nearest(const IntTensor& label, int64_t out_h, int64_t out_w) {
  check(label.shape.size() == 2, "resize_nearest: label must be (H,W)");
  check(out_h >= 1 && out_w >= 1, "resize_nearest: output must be non-empty");
  const int64_t H = label.shape[0], W = label.shape[1];
  IntTensor out;
  out.shape = {out_h, out_w};
  out.v.resize(static_cast<size_t>(out_h * out_w));
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t sy = std::clamp(
        static_cast<int64_t>((static_cast<double>(y) + 0.5) *
                             static_cast<double>(H) /
                             static_cast<double>(out_h)),
        static_cast<int64_t>(0), H - 1);
    for (int64_t x = 0; x < out_w; ++x) {
      const int64_t sx = std::clamp(
          static_cast<int64_t>((static_cast<double>(x) + 0.5) *
                               static_cast<double>(W) /
                               static_cast<double>(out_w)),
          static_cast<int64_t>(0), W - 1);
      out.v[static_cast<size_t>(y * out_w + x)] =
          label.v[static_cast<size_t>(sy * W + sx)];
    }
  }
  return out;
}

IntTensor flip_label(const IntTensor& label, bool horizontal) {
  check(label.shape.size() == 2, "flip_label: label must be (H,W)");
  const int64_t H = label.shape[0], W = label.shape[1];
  IntTensor out;
  out.shape = label.shape;
  out.v.resize(label.v.size());
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const int64_t sy = horizontal ? y : H - 1 - y;
      const int64_t sx = horizontal ? W - 1 - x : x;
      out.v[static_cast<size_t>(y * W + x)] =
          label.v[static_cast<size_t>(sy * W + sx)];
    }
  return out;
}

namespace {

// Maps output row/col to source row/col for one axis of the size-restoring
// step: crop at a random offset when the scaled image is larger, place at a
// random offset with edge replication when smaller.
struct AxisMap {
  int64_t src_extent = 0;
  int64_t offset = 0;  // crop start (>=0) or placement start (<=0 as -start)
  bool crop = false;

  int64_t operator()(int64_t i) const {
    if (crop) return i + offset;
    return std::clamp(i - offset, static_cast<int64_t>(0), src_extent - 1);
  }
};

AxisMap make_axis_map(std::mt19937_64& rng, int64_t src, int64_t dst) {
  AxisMap map;
  map.src_extent = src;
  if (src >= dst) {
    map.crop = true;
    map.offset = static_cast<int64_t>(
        uniform_int(rng, static_cast<uint64_t>(src - dst + 1)));
  } else {
    map.crop = false;
    map.offset = static_cast<int64_t>(
        uniform_int(rng, static_cast<uint64_t>(dst - src + 1)));
  }
  return map;
}

}  // namespace

void augment(Tensor& image, IntTensor& label, std::mt19937_64& rng,
             bool flips, bool scaling) {
  check(image.defined() && image.rank() == 3, "augment: image must be (C,H,W)");
  check(label.shape.size() == 2 && label.shape[0] == image.dim(1) &&
            label.shape[1] == image.dim(2),
        "augment: label " + shape_str(label.shape) + " does not match image " +
            shape_str(image.shape()));
  const int64_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (flips) {
    if (u01(rng) < 0.5) {
      image = flip(image, 2);
      label = flip_label(label, true);
    }
    if (u01(rng) < 0.5) {
      image = flip(image, 1);
      label = flip_label(label, false);
    }
  }
  if (!scaling) return;
  const double s = 0.75 + 0.5 * u01(rng);
  const int64_t nh = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(static_cast<double>(H) * s)));
  const int64_t nw = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(static_cast<double>(W) * s)));
  if (nh == H && nw == W) return;
  const Tensor scaled = resize_bilinear(image, nh, nw);
  const IntTensor scaled_label = resize_nearest(label, nh, nw);
  const AxisMap ym = make_axis_map(rng, nh, H);
  const AxisMap xm = make_axis_map(rng, nw, W);
  std::vector<float> img(static_cast<size_t>(C * H * W));
  IntTensor lab;
  lab.shape = {H, W};
  lab.v.resize(static_cast<size_t>(H * W));
  const float* sp = scaled.data();
  for (int64_t y = 0; y < H; ++y) {
    const int64_t sy = ym(y);
    for (int64_t x = 0; x < W; ++x) {
      const int64_t sx = xm(x);
      for (int64_t c = 0; c < C; ++c)
        img[static_cast<size_t>((c * H + y) * W + x)] =
            sp[(c * nh + sy) * nw + sx];
      lab.v[static_cast<size_t>(y * W + x)] =
          scaled_label.v[static_cast<size_t>(sy * nw + sx)];
    }
  }
  image = Tensor::from_data({C, H, W}, std::move(img));
  label = std::move(lab);
}

std::vector<HistoryRow> train(ModelWeights& w, const ModelConfig& mcfg,
                              const std::vector<Sample>& dataset,
                              const TrainConfig& cfg, AdamState* state) {
  cfg.validate();
  mcfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  const Shape img_shape = dataset[0].image.shape();
  check(img_shape.size() == 3 &&
            img_shape[0] == static_cast<int64_t>(mcfg.input_channels),
        "train: samples must be (" + std::to_string(mcfg.input_channels) +
            ",H,W) images, got " + shape_str(img_shape));
  for (size_t i = 0; i < dataset.size(); ++i) {
    check(dataset[i].image.shape() == img_shape,
          "train: sample " + std::to_string(i) + " shape " +
              shape_str(dataset[i].image.shape()) + " differs from " +
              shape_str(img_shape));
    check(dataset[i].label.shape == Shape({img_shape[1], img_shape[2]}),
          "train: sample " + std::to_string(i) + " label does not match image");
  }
  AdamState local;
  AdamState& st = state ? *state : local;
  auto params = named_params(w);
  const int64_t total = cfg.total_steps();
  const int64_t B = cfg.batch_size;
  const int64_t C = img_shape[0], H = img_shape[1], W = img_shape[2];
  std::vector<HistoryRow> history;
  std::vector<size_t> perm;
  uint64_t perm_pass = ~0ULL;
  for (int64_t step = st.step; step < total; ++step) {
    std::vector<float> img_buf(static_cast<size_t>(B * C * H * W));
    IntTensor lab_batch;
    lab_batch.shape = {B, H, W};
    lab_batch.v.resize(static_cast<size_t>(B * H * W));
    for (int64_t slot = 0; slot < B; ++slot) {
      const uint64_t g = static_cast<uint64_t>(step) *
                             static_cast<uint64_t>(B) +
                         static_cast<uint64_t>(slot);
      const uint64_t pass = g / dataset.size();
      if (pass != perm_pass) {
        perm = pass_permutation(cfg.seed, pass, dataset.size());
        perm_pass = pass;
      }
      std::mt19937_64 eng(mix_seed(cfg.seed, g));
      const size_t idx = perm[static_cast<size_t>(g % dataset.size())];
      Tensor im = dataset[idx].image;
      IntTensor lb = dataset[idx].label;
      augment(im, lb, eng, cfg.augment_flip, cfg.augment_scale);
      std::copy(im.data(), im.data() + C * H * W,
                img_buf.begin() + static_cast<int64_t>(slot * C * H * W));
      std::copy(lb.v.begin(), lb.v.end(),
                lab_batch.v.begin() + static_cast<int64_t>(slot * H * W));
    }
    Tensor x = Tensor::from_data({B, C, H, W}, std::move(img_buf));
    for (auto& [name, p] : params) p.zero_grad();
    Tensor logits = model_forward(x, w, mcfg);
    Tensor ce = ce_loss(logits, lab_batch, cfg.ignore_index);
    Tensor dc = dice_loss(logits, lab_batch, cfg.dice_smooth);
    Tensor lt = add(affine(ce, cfg.ce_weight, 0.0f),
                    affine(dc, cfg.dice_weight, 0.0f));
    const double lt_v = lt.item_hi();
    if (!std::isfinite(lt_v))
      throw std::runtime_error("train: loss diverged to non-finite at step " +
                               std::to_string(step + 1));
    backward(lt);
    adam_step(params, st, cfg);
    history.push_back({st.step, lt_v, ce.item_hi(), dc.item_hi(),
                       static_cast<double>(cfg.learning_rate)});
    if (cfg.log_every > 0 && st.step % cfg.log_every == 0)
      std::fprintf(stderr, "step %lld/%lld  loss %.6f  ce %.6f  dice %.6f\n",
                   static_cast<long long>(st.step),
                   static_cast<long long>(total), lt_v, ce.item_hi(),
                   dc.item_hi());
    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
        st.step % cfg.checkpoint_every == 0 && st.step < total)
      save_checkpoint(cfg.checkpoint_path, pack_training(w, mcfg, st));
  }
  if (!cfg.checkpoint_path.empty())
    save_checkpoint(cfg.checkpoint_path, pack_training(w, mcfg, st));
  if (!cfg.history_path.empty()) write_text(cfg.history_path, history_csv(history));
  return history;
}

Checkpoint pack_training(const ModelWeights& w, const ModelConfig& cfg,
                         const AdamState& state) {
  Checkpoint ck = pack_model(w, cfg, state.step);
  for (const auto& [name, t] : state.m)
    ck.entries["__opt__.m." + name] = deep_copy(t);
  for (const auto& [name, t] : state.v)
    ck.entries["__opt__.v." + name] = deep_copy(t);
  return ck;
}

AdamState load_opt_state(const Checkpoint& ck) {
  AdamState st;
  const std::string mp = "__opt__.m.", vp = "__opt__.v.";
  for (const auto& [name, t] : ck.entries) {
    if (name.rfind(mp, 0) == 0)
      st.m[name.substr(mp.size())] = deep_copy(t);
    else if (name.rfind(vp, 0) == 0)
      st.v[name.substr(vp.size())] = deep_copy(t);
  }
  auto it = ck.entries.find("__step__");
  if (it != ck.entries.end())
    st.step = static_cast<int64_t>(std::llround(it->second.data()[0]));
  return st;
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "step,loss_total,loss_ce,loss_dice\n";
  char line[160];
  for (const HistoryRow& r : rows) {
    std::snprintf(line, sizeof(line), "%lld,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(r.step), r.loss_total, r.loss_ce,
                  r.loss_dice);
    out += line;
  }
  return out;
}

Tensor tta_infer(const Tensor& image, const ModelWeights& w,
                 const ModelConfig& cfg) {
  check(image.defined() && image.rank() == 4,
        "tta_infer: image must be (N,C,H,W)");
  NoGradGuard guard;
  const Tensor a = model_forward(image, w, cfg);
  const Tensor b = flip(model_forward(flip(image, 3), w, cfg), 3);
  const Tensor c = flip(model_forward(flip(image, 2), w, cfg), 2);
  const Tensor d =
      flip(flip(model_forward(flip(flip(image, 2), 3), w, cfg), 3), 2);
  return affine(add(add(a, b), add(c, d)), 0.25f, 0.0f);
}

}  // namespace afenet
