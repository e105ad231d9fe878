#include "afenet/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace afenet {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

std::string read_file_or_fail(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_file_or_fail(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) fail(path, "write failed");
}

// Binary netpbm header scanner: whitespace- and #-comment-tolerant integer
// tokens, then a single separator byte before the raster.
class PnmParser {
 public:
  PnmParser(const std::string& bytes, const std::string& path)
      : b_(bytes), path_(path) {}

  void expect_magic(const char* magic) {
    if (b_.size() < 2) fail(path_, "truncated file");
    if (b_[0] != magic[0] || b_[1] != magic[1])
      fail(path_, std::string("bad magic (expected ") + magic + ")");
    pos_ = 2;
  }

  int64_t int_token() {
    skip_space_and_comments();
    if (pos_ >= b_.size()) fail(path_, "malformed header (unexpected end)");
    if (!std::isdigit(static_cast<unsigned char>(b_[pos_])))
      fail(path_, "malformed header");
    int64_t v = 0;
    while (pos_ < b_.size() &&
           std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > int64_t(1) << 40) fail(path_, "dims overflow");
      ++pos_;
    }
    return v;
  }

  const uint8_t* raster(size_t need) {
    if (pos_ >= b_.size() ||
        !std::isspace(static_cast<unsigned char>(b_[pos_])))
      fail(path_, "malformed header (missing raster separator)");
    ++pos_;
    if (b_.size() - pos_ < need) fail(path_, "truncated raster");
    return reinterpret_cast<const uint8_t*>(b_.data()) + pos_;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& b_;
  const std::string& path_;
  size_t pos_ = 0;
};

struct PnmDims {
  int64_t w = 0, h = 0;
};

PnmDims checked_dims(PnmParser& p, const std::string& path) {
  PnmDims d;
  d.w = p.int_token();
  d.h = p.int_token();
  if (d.w <= 0 || d.h <= 0) fail(path, "malformed header (zero dimension)");
  if (d.w > 32768 || d.h > 32768 || d.w * d.h > (int64_t(1) << 26))
    fail(path, "dims overflow");
  const int64_t maxval = p.int_token();
  if (maxval != 255) fail(path, "unsupported maxval (8-bit only)");
  return d;
}

uint8_t quantize(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return uint8_t(std::lround(c * 255.0f));
}

// Locked-down uniform helpers so generated corpora never depend on standard
// library distribution internals.
double u01(std::mt19937_64& eng) {
  return double(eng() >> 11) * (1.0 / 9007199254740992.0);
}

int64_t uniform_int(std::mt19937_64& eng, int64_t lo, int64_t hi) {
  const uint64_t span = uint64_t(hi - lo + 1);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t r = eng();
  while (r >= limit) r = eng();
  return lo + int64_t(r % span);
}

struct SmoothField {
  std::array<double, 4> amp, fx, fy, phase;
};

SmoothField draw_field(std::mt19937_64& eng) {
  SmoothField f;
  for (int j = 0; j < 4; ++j) {
    f.amp[j] = 0.5 + 0.5 * u01(eng);
    f.fx[j] = 0.5 + 2.0 * u01(eng);
    f.fy[j] = 0.5 + 2.0 * u01(eng);
    f.phase[j] = 2.0 * 3.14159265358979323846 * u01(eng);
  }
  return f;
}

std::vector<float> eval_field(const SmoothField& f, int size) {
  std::vector<float> out(size_t(size) * size_t(size));
  const double tau = 2.0 * 3.14159265358979323846;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      for (int j = 0; j < 4; ++j)
        v += f.amp[j] * std::cos(tau * (f.fx[j] * x + f.fy[j] * y) / size +
                                 f.phase[j]);
      out[size_t(y) * size_t(size) + size_t(x)] = float(v);
    }
  return out;
}

float quantile_threshold(std::vector<float> values, double keep_frac) {
  // Threshold above which `keep_frac` of the values lie.
  const size_t idx = size_t(double(values.size()) * (1.0 - keep_frac));
  std::nth_element(values.begin(),
                   values.begin() + std::min(idx, values.size() - 1),
                   values.end());
  return values[std::min(idx, values.size() - 1)];
}

void box_blur3(std::vector<float>& img, int size) {
  // One 3x3 replicate-edge pass per call, per channel plane.
  std::vector<float> src = img;
  auto at = [&](int c, int y, int x) {
    y = std::min(size - 1, std::max(0, y));
    x = std::min(size - 1, std::max(0, x));
    return src[(size_t(c) * size_t(size) + size_t(y)) * size_t(size) +
               size_t(x)];
  };
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        float acc = 0.0f;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) acc += at(c, y + dy, x + dx);
        img[(size_t(c) * size_t(size) + size_t(y)) * size_t(size) +
            size_t(x)] = acc / 9.0f;
      }
}

SynthSample make_sample(const SynthSpec& spec, int index) {
  const int s = spec.size;
  const uint64_t sample_seed = mix_seed(spec.seed, uint64_t(index));
  std::mt19937_64 eng(sample_seed);

  // Deciding the scene kind by fractional accumulation keeps any urban_frac
  // exact over the corpus; the per-sample stream stays untouched by it.
  const double before = double(index) * double(spec.urban_frac);
  const double after = double(index + 1) * double(spec.urban_frac);
  const bool urban = std::floor(after) > std::floor(before);

  // Draw order is part of the format: class jitters, geometry, then noise.
  std::array<float, 5> jitter;
  for (int c = 0; c < 5; ++c) jitter[size_t(c)] = float((u01(eng) - 0.5) * 0.1);

  std::vector<int32_t> label(size_t(s) * size_t(s), 0);
  std::vector<float> shade(size_t(s) * size_t(s), 0.0f);

  if (urban) {
    const int64_t nrect = uniform_int(eng, 6, 12);
    for (int64_t r = 0; r < nrect; ++r) {
      const int64_t w = uniform_int(eng, s / 8, s / 3);
      const int64_t h = uniform_int(eng, s / 8, s / 3);
      const int64_t x0 = uniform_int(eng, 0, s - w);
      const int64_t y0 = uniform_int(eng, 0, s - h);
      const float sh = float((u01(eng) - 0.5) * 0.16);
      for (int64_t y = y0; y < y0 + h; ++y)
        for (int64_t x = x0; x < x0 + w; ++x) {
          label[size_t(y) * size_t(s) + size_t(x)] = 1;
          shade[size_t(y) * size_t(s) + size_t(x)] = sh;
        }
    }
    const int64_t nline = uniform_int(eng, 3, 6);
    for (int64_t l = 0; l < nline; ++l) {
      const bool vertical = (eng() & 1u) != 0;
      // Lines stay >= 3px: any thinner stroke lands, at some phases, strictly
      // between the interpolation knots of a stride-4 head under bilinear
      // upsampling, where no logit field can carve it out.
      const int64_t thick = uniform_int(eng, 3, 4);
      const int64_t pos = uniform_int(eng, 0, s - thick);
      const float sh = float((u01(eng) - 0.5) * 0.16);
      for (int64_t t = 0; t < thick; ++t)
        for (int64_t u = 0; u < s; ++u) {
          const int64_t y = vertical ? u : pos + t;
          const int64_t x = vertical ? pos + t : u;
          label[size_t(y) * size_t(s) + size_t(x)] = 2;
          shade[size_t(y) * size_t(s) + size_t(x)] = sh;
        }
    }
  } else {
    const SmoothField fw = draw_field(eng);
    const SmoothField fv = draw_field(eng);
    const SmoothField fs = draw_field(eng);
    const double water_frac = 0.15 + 0.15 * u01(eng);
    const double veg_frac = 0.2 + 0.2 * u01(eng);
    const std::vector<float> water = eval_field(fw, s);
    const std::vector<float> veg = eval_field(fv, s);
    const std::vector<float> sh = eval_field(fs, s);
    const float tw = quantile_threshold(water, water_frac);
    const float tv = quantile_threshold(veg, veg_frac);
    for (size_t i = 0; i < label.size(); ++i) {
      if (water[i] >= tw)
        label[i] = 3;
      else if (veg[i] >= tv)
        label[i] = 4;
      shade[i] = 0.04f * sh[i];  // gentle smooth illumination
    }
  }

  std::vector<float> img(3 * size_t(s) * size_t(s));
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const size_t i = size_t(y) * size_t(s) + size_t(x);
      const int32_t k = label[i];
      for (int c = 0; c < 3; ++c) {
        const float base =
            float(spec.palette[size_t(k)][size_t(c)]) / 255.0f;
        img[(size_t(c) * size_t(s) + size_t(y)) * size_t(s) + size_t(x)] =
            base + jitter[size_t(k)] + shade[i];
      }
    }

  // Rural scenes are smoothed (images only; labels keep the exact geometry)
  // so their spectra stay low-frequency dominated.
  if (!urban) {
    box_blur3(img, s);
    box_blur3(img, s);
  }

  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c) {
        const size_t i =
            (size_t(c) * size_t(s) + size_t(y)) * size_t(s) + size_t(x);
        img[i] = std::min(
            1.0f, std::max(0.0f, img[i] + float((u01(eng) - 0.5) * 0.03)));
      }

  SynthSample out;
  out.sample.image = Tensor::from_data({3, s, s}, std::move(img));
  out.sample.label.shape = {s, s};
  out.sample.label.v = std::move(label);
  out.kind = urban ? SceneKind::urban : SceneKind::rural;
  out.sample_seed = sample_seed;
  return out;
}

}  // namespace

Tensor load_image(const std::string& path) {
  const std::string bytes = read_file_or_fail(path);
  PnmParser p(bytes, path);
  p.expect_magic("P6");
  const PnmDims d = checked_dims(p, path);
  const size_t n = size_t(d.w) * size_t(d.h);
  const uint8_t* raw = p.raster(3 * n);
  std::vector<float> v(3 * n);
  for (int64_t y = 0; y < d.h; ++y)
    for (int64_t x = 0; x < d.w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        v[(size_t(c) * size_t(d.h) + size_t(y)) * size_t(d.w) + size_t(x)] =
            float(raw[(size_t(y) * size_t(d.w) + size_t(x)) * 3 +
                      size_t(c)]) /
            255.0f;
  return Tensor::from_data({3, d.h, d.w}, std::move(v));
}

void save_image(const std::string& path, const Tensor& image) {
  if (!image.defined() || image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("save_image: expected a (3, H, W) tensor");
  const int64_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) +
                    "\n255\n";
  out.reserve(out.size() + size_t(3 * h * w));
  const float* d = image.data();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        out.push_back(char(quantize(
            d[(size_t(c) * size_t(h) + size_t(y)) * size_t(w) + size_t(x)])));
  write_file_or_fail(path, out);
}

IntTensor load_label(const std::string& path) {
  const std::string bytes = read_file_or_fail(path);
  PnmParser p(bytes, path);
  p.expect_magic("P5");
  const PnmDims d = checked_dims(p, path);
  const size_t n = size_t(d.w) * size_t(d.h);
  const uint8_t* raw = p.raster(n);
  IntTensor out;
  out.shape = {d.h, d.w};
  out.v.assign(raw, raw + n);
  return out;
}

void save_label(const std::string& path, const IntTensor& label) {
  if (label.shape.size() != 2)
    throw std::invalid_argument("save_label: expected an (H, W) raster");
  std::string out = "P5\n" + std::to_string(label.shape[1]) + " " +
                    std::to_string(label.shape[0]) + "\n255\n";
  out.reserve(out.size() + label.v.size());
  for (int32_t v : label.v) {
    if (v < 0 || v > 255)
      throw std::invalid_argument("save_label: value " + std::to_string(v) +
                                  " does not fit 8 bits");
    out.push_back(char(uint8_t(v)));
  }
  write_file_or_fail(path, out);
}

Palette default_palette(int num_classes) {
  static const Palette base = {
      {{110, 110, 110}},  // ground
      {{219, 61, 50}},    // building
      {{240, 240, 240}},  // road
      {{48, 93, 204}},    // water
      {{60, 180, 75}},    // vegetation
      {{255, 196, 0}},
      {{145, 30, 180}},
      {{70, 240, 240}},
  };
  if (num_classes < 1)
    throw std::invalid_argument("default_palette: need at least one class");
  Palette out;
  out.reserve(size_t(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    std::array<uint8_t, 3> col = base[size_t(c) % base.size()];
    // Wrapped entries are dimmed so every class stays distinguishable.
    if (size_t(c) >= base.size())
      for (auto& ch : col) ch = uint8_t(ch / 2);
    out.push_back(col);
  }
  return out;
}

Tensor colorize(const IntTensor& label, const Palette& palette) {
  if (label.shape.size() != 2)
    throw std::invalid_argument("colorize: expected an (H, W) raster");
  const int64_t h = label.shape[0], w = label.shape[1];
  std::vector<float> v(3 * size_t(h) * size_t(w));
  for (int64_t i = 0; i < label.numel(); ++i) {
    const int32_t k = label.v[size_t(i)];
    if (k < 0 || size_t(k) >= palette.size())
      throw std::invalid_argument("colorize: label " + std::to_string(k) +
                                  " outside the palette");
    for (int64_t c = 0; c < 3; ++c)
      v[size_t(c) * size_t(h) * size_t(w) + size_t(i)] =
          float(palette[size_t(k)][size_t(c)]) / 255.0f;
  }
  return Tensor::from_data({3, h, w}, std::move(v));
}

std::vector<Sample> tile(const Tensor& image, const IntTensor& label,
                         int patch, int stride) {
  if (!image.defined() || image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("tile: expected a (3, H, W) image");
  const int64_t h = image.dim(1), w = image.dim(2);
  if (label.shape.size() != 2 || label.shape[0] != h || label.shape[1] != w)
    throw std::invalid_argument("tile: label raster does not match image");
  if (patch < 1 || patch > h || patch > w)
    throw std::invalid_argument("tile: patch must fit inside the image");
  if (stride < 1) throw std::invalid_argument("tile: stride must be >= 1");

  auto positions = [&](int64_t extent) {
    std::vector<int64_t> pos;
    for (int64_t p = 0; p + patch <= extent; p += stride) pos.push_back(p);
    if (pos.back() + patch < extent) pos.push_back(extent - patch);
    return pos;
  };
  const std::vector<int64_t> ys = positions(h);
  const std::vector<int64_t> xs = positions(w);

  std::vector<Sample> out;
  out.reserve(ys.size() * xs.size());
  const float* src = image.data();
  for (int64_t y0 : ys)
    for (int64_t x0 : xs) {
      Sample s;
      std::vector<float> iv(3 * size_t(patch) * size_t(patch));
      s.label.shape = {patch, patch};
      s.label.v.resize(size_t(patch) * size_t(patch));
      for (int64_t y = 0; y < patch; ++y)
        for (int64_t x = 0; x < patch; ++x) {
          for (int64_t c = 0; c < 3; ++c)
            iv[(size_t(c) * size_t(patch) + size_t(y)) * size_t(patch) +
               size_t(x)] =
                src[(size_t(c) * size_t(h) + size_t(y0 + y)) * size_t(w) +
                    size_t(x0 + x)];
          s.label.v[size_t(y) * size_t(patch) + size_t(x)] =
              label.v[size_t(y0 + y) * size_t(w) + size_t(x0 + x)];
        }
      s.image = Tensor::from_data({3, patch, patch}, std::move(iv));
      out.push_back(std::move(s));
    }
  return out;
}

std::vector<SynthSample> synth_dataset(const SynthSpec& spec, int threads) {
  if (spec.count < 0) throw std::invalid_argument("synth_dataset: count < 0");
  if (spec.size < 16)
    throw std::invalid_argument("synth_dataset: size must be >= 16");
  if (spec.num_classes != 5)
    throw std::invalid_argument(
        "synth_dataset: the generator draws exactly 5 classes");
  if (spec.palette.size() < 5)
    throw std::invalid_argument("synth_dataset: palette needs 5 entries");
  if (!(spec.urban_frac >= 0.0f && spec.urban_frac <= 1.0f))
    throw std::invalid_argument("synth_dataset: urban_frac outside [0, 1]");

  std::vector<SynthSample> out(size_t(spec.count));
  const int workers =
      std::max(1, std::min(threads, spec.count > 0 ? spec.count : 1));
  if (workers == 1) {
    for (int i = 0; i < spec.count; ++i) out[size_t(i)] = make_sample(spec, i);
    return out;
  }
  std::vector<std::thread> pool;
  pool.reserve(size_t(workers));
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&, t]() {
      for (int i = t; i < spec.count; i += workers)
        out[size_t(i)] = make_sample(spec, i);
    });
  for (auto& th : pool) th.join();
  return out;
}

void write_dataset(const std::string& dir,
                   const std::vector<SynthSample>& samples) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir + "/images", ec);
  fs::create_directories(dir + "/labels", ec);
  if (ec) fail(dir, "cannot create dataset directories");
  std::string manifest;
  char name[16];
  for (size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof name, "%04zu", i);
    save_image(dir + "/images/" + name + ".ppm", samples[i].sample.image);
    save_label(dir + "/labels/" + name + ".pgm", samples[i].sample.label);
    manifest += std::string(name) + " " +
                (samples[i].kind == SceneKind::urban ? "urban" : "rural") +
                " " + std::to_string(samples[i].sample_seed) + "\n";
  }
  write_file_or_fail(dir + "/manifest.txt", manifest);
}

std::vector<SynthSample> load_dataset(const std::string& dir) {
  const std::string manifest = read_file_or_fail(dir + "/manifest.txt");
  std::vector<SynthSample> out;
  std::istringstream lines(manifest);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, kind;
    uint64_t seed = 0;
    if (!(ls >> id >> kind >> seed) || (kind != "urban" && kind != "rural"))
      fail(dir + "/manifest.txt", "malformed manifest line '" + line + "'");
    SynthSample s;
    s.sample.image = load_image(dir + "/images/" + id + ".ppm");
    s.sample.label = load_label(dir + "/labels/" + id + ".pgm");
    s.kind = kind == "urban" ? SceneKind::urban : SceneKind::rural;
    s.sample_seed = seed;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace afenet
