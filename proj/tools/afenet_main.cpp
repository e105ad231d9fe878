// afenet command-line interface: dataset synthesis, training, inference,
// frequency separation, evaluation, and model accounting.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "afenet/data_io.hpp"
#include "afenet/metrics.hpp"
#include "afenet/network.hpp"
#include "afenet/spectral.hpp"
#include "afenet/tensor.hpp"
#include "afenet/training.hpp"

using namespace afenet;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// AFENET_THREADS caps worker parallelism; unset or empty means 1 so runs
// are reproducible by default.
int env_threads() {
  const char* s = std::getenv("AFENET_THREADS");
  if (!s || !*s) return 1;
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (*end != '\0' || v < 1)
    throw UsageError("AFENET_THREADS must be a positive integer, got '" +
                     std::string(s) + "'");
  return static_cast<int>(v);
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

// ---- flat key=value config files -----------------------------------------

double parse_number(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw UsageError("config: key '" + key + "' has non-numeric value '" +
                     value + "'");
  }
}

int64_t parse_int(const std::string& key, const std::string& value) {
  const double v = parse_number(key, value);
  const int64_t i = static_cast<int64_t>(v);
  if (static_cast<double>(i) != v)
    throw UsageError("config: key '" + key + "' must be an integer, got '" +
                     value + "'");
  return i;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "no") return false;
  throw UsageError("config: key '" + key + "' must be a boolean, got '" +
                   value + "'");
}

MaskMode parse_mask_mode(const std::string& value) {
  if (value == "soft") return MaskMode::soft;
  if (value == "hard") return MaskMode::hard;
  throw UsageError("mask mode must be 'soft' or 'hard', got '" + value + "'");
}

struct RunConfig {
  std::string preset = "desk";
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
};

std::vector<std::pair<std::string, std::string>> read_kv_file(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open config file");
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  auto trim = [](std::string s) {
    const char* ws = " \t\r\n";
    const size_t a = s.find_first_not_of(ws);
    if (a == std::string::npos) return std::string();
    return s.substr(a, s.find_last_not_of(ws) - a + 1);
  };
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(lineno) +
                       ": expected key=value, got '" + line + "'");
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

// The preset key picks the base ModelConfig regardless of its position;
// every other key then overrides one field. Unknown keys are rejected.
RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  auto kv = read_kv_file(path);
  for (const auto& [key, value] : kv) {
    if (key != "preset") continue;
    if (value == "desk") {
      rc.model = ModelConfig::desk();
    } else if (value == "full") {
      rc.model = ModelConfig::full_size();
    } else {
      throw UsageError("config: preset must be 'desk' or 'full', got '" +
                       value + "'");
    }
    rc.preset = value;
  }
  for (const auto& [key, value] : kv) {
    if (key == "preset") {
    } else if (key == "num_classes") {
      rc.model.num_classes = static_cast<int>(parse_int(key, value));
    } else if (key == "width_mult") {
      rc.model.width_multiplier = static_cast<float>(parse_number(key, value));
    } else if (key == "mask_mode") {
      rc.model.mask_mode = parse_mask_mode(value);
    } else if (key == "mask_tau") {
      rc.model.mask_tau = static_cast<float>(parse_number(key, value));
    } else if (key == "ffn_expansion") {
      rc.model.ffn_expansion = static_cast<int>(parse_int(key, value));
    } else if (key == "lr") {
      rc.train.learning_rate = static_cast<float>(parse_number(key, value));
    } else if (key == "weight_decay") {
      rc.train.weight_decay = static_cast<float>(parse_number(key, value));
    } else if (key == "coupled_weight_decay") {
      rc.train.coupled_weight_decay = parse_bool(key, value);
    } else if (key == "beta1") {
      rc.train.beta1 = static_cast<float>(parse_number(key, value));
    } else if (key == "beta2") {
      rc.train.beta2 = static_cast<float>(parse_number(key, value));
    } else if (key == "adam_epsilon") {
      rc.train.adam_epsilon = static_cast<float>(parse_number(key, value));
    } else if (key == "batch_size") {
      rc.train.batch_size = static_cast<int>(parse_int(key, value));
    } else if (key == "batches_per_epoch") {
      rc.train.batches_per_epoch = static_cast<int>(parse_int(key, value));
    } else if (key == "epochs") {
      rc.train.epochs = static_cast<int>(parse_int(key, value));
    } else if (key == "seed") {
      rc.train.seed = static_cast<uint64_t>(parse_int(key, value));
    } else if (key == "ce_weight") {
      rc.train.ce_weight = static_cast<float>(parse_number(key, value));
    } else if (key == "dice_weight") {
      rc.train.dice_weight = static_cast<float>(parse_number(key, value));
    } else if (key == "dice_smooth") {
      rc.train.dice_smooth = static_cast<float>(parse_number(key, value));
    } else if (key == "augment_flip") {
      rc.train.augment_flip = parse_bool(key, value);
    } else if (key == "augment_scale") {
      rc.train.augment_scale = parse_bool(key, value);
    } else if (key == "ignore_index") {
      rc.train.ignore_index = static_cast<int>(parse_int(key, value));
    } else if (key == "checkpoint_every") {
      rc.train.checkpoint_every = static_cast<int>(parse_int(key, value));
    } else if (key == "log_every") {
      rc.train.log_every = static_cast<int>(parse_int(key, value));
    } else if (key == "history_path") {
      rc.train.history_path = value;
    } else {
      throw UsageError("config: unknown key '" + key + "'");
    }
  }
  return rc;
}

using KvList = std::vector<std::pair<std::string, std::string>>;

void print_config(const KvList& kv) {
  std::printf("resolved config:\n");
  for (const auto& [k, v] : kv) std::printf("  %s=%s\n", k.c_str(), v.c_str());
}

KvList model_kv(const std::string& preset, const ModelConfig& m) {
  return {
      {"preset", preset},
      {"num_classes", std::to_string(m.num_classes)},
      {"width_mult", fmt_g(m.width_multiplier)},
      {"mask_mode", m.mask_mode == MaskMode::soft ? "soft" : "hard"},
      {"mask_tau", fmt_g(m.mask_tau)},
      {"ffn_expansion", std::to_string(m.ffn_expansion)},
  };
}

KvList train_kv(const TrainConfig& t) {
  return {
      {"lr", fmt_g(t.learning_rate)},
      {"weight_decay", fmt_g(t.weight_decay)},
      {"coupled_weight_decay", t.coupled_weight_decay ? "1" : "0"},
      {"beta1", fmt_g(t.beta1)},
      {"beta2", fmt_g(t.beta2)},
      {"adam_epsilon", fmt_g(t.adam_epsilon)},
      {"batch_size", std::to_string(t.batch_size)},
      {"batches_per_epoch", std::to_string(t.batches_per_epoch)},
      {"epochs", std::to_string(t.epochs)},
      {"seed", std::to_string(t.seed)},
      {"ce_weight", fmt_g(t.ce_weight)},
      {"dice_weight", fmt_g(t.dice_weight)},
      {"dice_smooth", fmt_g(t.dice_smooth)},
      {"augment_flip", t.augment_flip ? "1" : "0"},
      {"augment_scale", t.augment_scale ? "1" : "0"},
      {"ignore_index", std::to_string(t.ignore_index)},
      {"checkpoint_every", std::to_string(t.checkpoint_every)},
      {"history_path", t.history_path},
      {"log_every", std::to_string(t.log_every)},
  };
}

// ---- shared pipeline helpers ----------------------------------------------

void require_div32(const Tensor& image, const std::string& what) {
  const int64_t h = image.dim(1), w = image.dim(2);
  if (h % 32 != 0 || w % 32 != 0)
    throw std::runtime_error(what + ": image dimensions " + std::to_string(h) +
                             "x" + std::to_string(w) +
                             " must be multiples of 32");
}

Tensor to_batch(const Tensor& image) {
  return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
}

void check_finite(const Tensor& t, const std::string& what) {
  for (float v : t.vec())
    if (!std::isfinite(v))
      throw NumericError(what + ": output contains non-finite values");
}

struct LoadedModel {
  ModelWeights weights;
  ModelConfig config;
  int64_t step = 0;
};

LoadedModel load_model(const std::string& path) {
  LoadedModel m;
  Checkpoint ck = load_checkpoint(path);
  unpack_model(ck, m.weights, m.config, m.step);
  return m;
}

IntTensor plane(const IntTensor& batch_labels) {
  IntTensor out = batch_labels;
  out.shape = {batch_labels.shape[1], batch_labels.shape[2]};
  return out;
}

// ---- subcommands -----------------------------------------------------------

int run_synth(const std::string& out, int count, int size, uint64_t seed,
              float urban_frac) {
  if (count < 0) throw UsageError("synth: --count must be >= 0");
  if (size < 8) throw UsageError("synth: --size must be >= 8");
  if (urban_frac < 0.0f || urban_frac > 1.0f)
    throw UsageError("synth: --urban-frac must be in [0, 1]");
  SynthSpec spec;
  spec.seed = seed;
  spec.count = count;
  spec.size = size;
  spec.urban_frac = urban_frac;
  print_config({{"out", out},
                {"count", std::to_string(count)},
                {"size", std::to_string(size)},
                {"seed", std::to_string(seed)},
                {"urban_frac", fmt_g(urban_frac)},
                {"threads", std::to_string(env_threads())}});
  auto samples = synth_dataset(spec, env_threads());
  write_dataset(out, samples);
  std::printf("wrote %zu samples to %s\n", samples.size(), out.c_str());
  return 0;
}

int run_train(const std::string& data, const std::string& config_path,
              const std::string& out, const std::string& resume,
              const float* lr_flag, const std::string* mask_flag,
              const float* width_flag) {
  RunConfig rc = load_run_config(config_path);
  if (lr_flag) rc.train.learning_rate = *lr_flag;
  if (mask_flag) rc.model.mask_mode = parse_mask_mode(*mask_flag);
  if (width_flag) rc.model.width_multiplier = *width_flag;
  rc.train.checkpoint_path = out;
  if (rc.train.history_path.empty())
    rc.train.history_path = out + ".history.csv";

  ModelWeights weights;
  ModelConfig mcfg;
  AdamState state;
  if (!resume.empty()) {
    if (mask_flag || width_flag)
      throw UsageError(
          "train: --mask-mode/--width-mult conflict with --resume (the "
          "checkpoint fixes the architecture)");
    LoadedModel m = load_model(resume);
    weights = std::move(m.weights);
    mcfg = m.config;
    state = load_opt_state(load_checkpoint(resume));
  } else {
    mcfg = rc.model;
    mcfg.validate();
    weights = init_weights(mcfg, rc.train.seed);
  }
  rc.train.validate();

  KvList kv = model_kv(resume.empty() ? rc.preset : "checkpoint", mcfg);
  KvList tkv = train_kv(rc.train);
  kv.insert(kv.end(), tkv.begin(), tkv.end());
  kv.emplace_back("data", data);
  kv.emplace_back("out", out);
  kv.emplace_back("resume", resume);
  print_config(kv);

  std::vector<Sample> samples;
  for (auto& s : load_dataset(data)) samples.push_back(std::move(s.sample));
  auto history = train(weights, mcfg, samples, rc.train, &state);
  if (!history.empty())
    std::printf("trained %zu steps (through step %lld), final loss %.6f\n",
                history.size(), static_cast<long long>(state.step),
                history.back().loss_total);
  else
    std::printf("nothing to do: checkpoint already at step %lld\n",
                static_cast<long long>(state.step));
  std::printf("wrote checkpoint %s\n", out.c_str());
  std::printf("wrote history %s\n", rc.train.history_path.c_str());
  return 0;
}

int run_infer(const std::string& ckpt, const std::string& image_path,
              const std::string& out, bool tta, const std::string& color) {
  print_config({{"ckpt", ckpt},
                {"image", image_path},
                {"out", out},
                {"tta", tta ? "1" : "0"},
                {"color", color}});
  LoadedModel m = load_model(ckpt);
  Tensor image = load_image(image_path);
  require_div32(image, "infer");
  NoGradGuard guard;
  Tensor batch = to_batch(image);
  Tensor logits = tta ? tta_infer(batch, m.weights, m.config)
                      : model_forward(batch, m.weights, m.config);
  check_finite(logits, "infer");
  IntTensor pred = plane(argmax_channels(logits));
  save_label(out, pred);
  std::printf("wrote %s\n", out.c_str());
  if (!color.empty()) {
    save_image(color, colorize(pred, default_palette(m.config.num_classes)));
    std::printf("wrote %s\n", color.c_str());
  }
  return 0;
}

int run_freqsep(const std::string& image_path, const std::string& out_dir,
                const float* rh, const float* rw, const std::string& ckpt,
                int level, const float* soft_tau) {
  const bool manual = rh != nullptr || rw != nullptr;
  const bool from_ckpt = !ckpt.empty();
  if (manual == from_ckpt)
    throw UsageError(
        "freqsep: give either manual ratios (--rh and --rw) or a trained "
        "window (--ckpt with --level), not both and not neither");
  if (manual && (rh == nullptr || rw == nullptr))
    throw UsageError("freqsep: --rh and --rw must be given together");
  if (level < 1 || level > 4)
    throw UsageError("freqsep: --level must be in [1, 4]");

  Tensor image = load_image(image_path);
  NoGradGuard guard;
  WindowRatios r{};
  if (manual) {
    if (*rh <= 0.0f || *rh >= 1.0f || *rw <= 0.0f || *rw >= 1.0f)
      throw UsageError("freqsep: ratios must lie strictly inside (0, 1)");
    r = {*rh, *rw};
  } else {
    LoadedModel m = load_model(ckpt);
    require_div32(image, "freqsep");
    std::array<Tensor, 4> ratios;
    model_forward(to_batch(image), m.weights, m.config, &ratios);
    const Tensor& lvl = ratios[level - 1];
    check_finite(lvl, "freqsep");
    r = {lvl.data()[0], lvl.data()[1]};
  }

  const MaskMode mode = soft_tau ? MaskMode::soft : MaskMode::hard;
  const float tau = soft_tau ? *soft_tau : 1.0f;
  if (soft_tau && tau <= 0.0f)
    throw UsageError("freqsep: --soft tau must be positive");

  const int64_t H = image.dim(1), W = image.dim(2);
  Tensor batch = to_batch(image);
  Spectrum spec = fft2d(batch);
  MaskPair masks = build_masks(H, W, r, mode, tau);
  Tensor band_low =
      ifft2d({mul(spec.real, masks.low), mul(spec.imag, masks.low)});
  Tensor band_high =
      ifft2d({mul(spec.real, masks.high), mul(spec.imag, masks.high)});

  // Pass-through mode: the bands partition the image spectrum, so their sum
  // must reproduce the input up to transform round-off.
  double recon_err = 0.0;
  for (int64_t i = 0; i < batch.numel(); ++i)
    recon_err = std::max(
        recon_err, std::fabs(static_cast<double>(band_low.data()[i]) +
                             static_cast<double>(band_high.data()[i]) -
                             static_cast<double>(batch.data()[i])));

  std::filesystem::create_directories(out_dir);
  auto path = [&out_dir](const char* name) { return out_dir + "/" + name; };

  // Log-magnitude spectrum, one global scale across channels.
  {
    std::vector<float> mag(static_cast<size_t>(batch.numel()));
    double peak = 0.0;
    for (size_t i = 0; i < mag.size(); ++i) {
      const double re = spec.real.data()[i], im = spec.imag.data()[i];
      mag[i] = static_cast<float>(std::log1p(std::sqrt(re * re + im * im)));
      peak = std::max(peak, static_cast<double>(mag[i]));
    }
    const float scale = peak > 0.0 ? static_cast<float>(1.0 / peak) : 0.0f;
    for (float& v : mag) v *= scale;
    save_image(path("spectrum.ppm"),
               Tensor::from_data({3, H, W}, std::move(mag)));
  }
  auto save_mask = [&](const char* name, const Tensor& m8) {
    IntTensor q;
    q.shape = {H, W};
    q.v.resize(static_cast<size_t>(H * W));
    for (int64_t i = 0; i < m8.numel(); ++i)
      q.v[static_cast<size_t>(i)] =
          static_cast<int32_t>(std::llround(m8.data()[i] * 255.0f));
    save_label(path(name), q);
  };
  save_mask("mask_low.pgm", masks.low);
  save_mask("mask_high.pgm", masks.high);
  save_image(path("band_low.ppm"),
             reshape(clamp(band_low, 0.0f, 1.0f), {3, H, W}));
  save_image(path("band_high.ppm"),
             reshape(clamp(band_high, 0.0f, 1.0f), {3, H, W}));

  print_config({{"image", image_path},
                {"out_dir", out_dir},
                {"mode", mode == MaskMode::soft ? "soft" : "hard"},
                {"tau", fmt_g(tau)},
                {"source", manual ? "manual" : "ckpt level " +
                                                   std::to_string(level)},
                {"r_h", fmt_g(r.r_h)},
                {"r_w", fmt_g(r.r_w)}});
  std::printf("reconstruction_max_abs_error=%.3g\n", recon_err);
  std::printf("wrote spectrum.ppm mask_low.pgm mask_high.pgm band_low.ppm "
              "band_high.ppm in %s\n",
              out_dir.c_str());
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data,
             int ignore_class) {
  print_config({{"ckpt", ckpt},
                {"data", data},
                {"ignore_class", std::to_string(ignore_class)},
                {"threads", std::to_string(env_threads())}});
  LoadedModel m = load_model(ckpt);
  std::vector<Sample> samples;
  for (auto& s : load_dataset(data)) samples.push_back(std::move(s.sample));
  if (samples.empty()) throw std::runtime_error("eval: dataset is empty");
  for (const Sample& s : samples) require_div32(s.image, "eval");

  const int n = static_cast<int>(samples.size());
  const int threads = std::min(env_threads(), n);
  std::vector<ConfusionMatrix> shards(static_cast<size_t>(threads),
                                      ConfusionMatrix(m.config.num_classes));
  std::atomic<bool> nonfinite{false};
  auto worker = [&](int t) {
    NoGradGuard guard;
    for (int i = t; i < n; i += threads) {
      Tensor logits = model_forward(to_batch(samples[static_cast<size_t>(i)]
                                                 .image),
                                    m.weights, m.config);
      for (float v : logits.vec())
        if (!std::isfinite(v)) {
          nonfinite = true;
          return;
        }
      accumulate(shards[static_cast<size_t>(t)],
                 plane(argmax_channels(logits)),
                 samples[static_cast<size_t>(i)].label, ignore_class);
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  if (nonfinite) throw NumericError("eval: output contains non-finite values");
  ConfusionMatrix cm = shards[0];
  for (int t = 1; t < threads; ++t) cm.merge(shards[static_cast<size_t>(t)]);
  std::printf("evaluated %d samples at step %lld\n", n,
              static_cast<long long>(m.step));
  std::fputs(metrics_table(cm).c_str(), stdout);
  return 0;
}

int run_stats(const std::string& config_path) {
  RunConfig rc = load_run_config(config_path);
  rc.model.validate();
  print_config(model_kv(rc.preset, rc.model));
  const int64_t params = count_params(rc.model);
  const int64_t flops = count_flops(rc.model, 512, 512);
  std::printf("params %lld (%.2fM)\n", static_cast<long long>(params),
              static_cast<double>(params) / 1e6);
  std::printf("flops 512x512 %lld (%.2fG)\n", static_cast<long long>(flops),
              static_cast<double>(flops) / 1e9);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"afenet: adaptive frequency-enhancement segmentation toolkit"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string sy_out;
  int sy_count = 64, sy_size = 64;
  uint64_t sy_seed = 0;
  float sy_urban = 0.5f;
  synth->add_option("--out", sy_out, "Output dataset directory")->required();
  synth->add_option("--count", sy_count, "Number of samples");
  synth->add_option("--size", sy_size, "Square image size in pixels");
  synth->add_option("--seed", sy_seed, "Generator seed");
  synth->add_option("--urban-frac", sy_urban, "Fraction of urban-like scenes");

  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_data, tr_config, tr_out, tr_resume, tr_mask;
  float tr_lr = 0.0f, tr_width = 0.0f;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--config", tr_config, "key=value config file")->required();
  tr->add_option("--out", tr_out, "Checkpoint output path")->required();
  tr->add_option("--resume", tr_resume, "Checkpoint to continue from");
  auto* tr_mask_opt =
      tr->add_option("--mask-mode", tr_mask, "soft or hard window masks");
  auto* tr_width_opt =
      tr->add_option("--width-mult", tr_width, "Channel width multiplier");
  auto* tr_lr_opt = tr->add_option("--lr", tr_lr, "Learning rate override");

  auto* inf = app.add_subcommand("infer", "Predict a segmentation mask");
  std::string in_ckpt, in_image, in_out, in_color;
  bool in_tta = false;
  inf->add_option("--ckpt", in_ckpt, "Checkpoint path")->required();
  inf->add_option("--image", in_image, "Input PPM image")->required();
  inf->add_option("--out", in_out, "Output PGM label map")->required();
  inf->add_flag("--tta", in_tta, "Average over flip augmentations");
  inf->add_option("--color", in_color, "Also write a colorized PPM");

  auto* fs = app.add_subcommand("freqsep", "Visualize frequency separation");
  std::string fs_image, fs_dir, fs_ckpt;
  float fs_rh = 0.0f, fs_rw = 0.0f, fs_tau = 1.0f;
  int fs_level = 1;
  fs->add_option("--image", fs_image, "Input PPM image")->required();
  fs->add_option("--out-dir", fs_dir, "Output directory")->required();
  auto* fs_rh_opt = fs->add_option("--rh", fs_rh, "Manual height ratio");
  auto* fs_rw_opt = fs->add_option("--rw", fs_rw, "Manual width ratio");
  fs->add_option("--ckpt", fs_ckpt, "Checkpoint providing the trained AWM");
  fs->add_option("--level", fs_level, "Decoder level for --ckpt mode");
  auto* fs_tau_opt =
      fs->add_option("--soft", fs_tau, "Soft masks with this temperature");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data;
  int ev_ignore = -1;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--ignore-class", ev_ignore, "Ground-truth class to skip");

  auto* st = app.add_subcommand("stats", "Report parameters and FLOPs");
  std::string st_config;
  st->add_option("--config", st_config, "key=value config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(synth))
      return run_synth(sy_out, sy_count, sy_size, sy_seed, sy_urban);
    if (app.got_subcommand(tr))
      return run_train(tr_data, tr_config, tr_out, tr_resume,
                       tr_lr_opt->count() ? &tr_lr : nullptr,
                       tr_mask_opt->count() ? &tr_mask : nullptr,
                       tr_width_opt->count() ? &tr_width : nullptr);
    if (app.got_subcommand(inf))
      return run_infer(in_ckpt, in_image, in_out, in_tta, in_color);
    if (app.got_subcommand(fs))
      return run_freqsep(fs_image, fs_dir,
                         fs_rh_opt->count() ? &fs_rh : nullptr,
                         fs_rw_opt->count() ? &fs_rw : nullptr, fs_ckpt,
                         fs_level, fs_tau_opt->count() ? &fs_tau : nullptr);
    if (app.got_subcommand(ev)) return run_eval(ev_ckpt, ev_data, ev_ignore);
    if (app.got_subcommand(st)) return run_stats(st_config);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return std::strstr(e.what(), "non-finite") ? 3 : 2;
  }
  return 0;
}
