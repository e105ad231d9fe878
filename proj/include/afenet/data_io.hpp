#pragma once

// PPM/PGM image and label file handling, patch tiling, and the procedural
// synthetic segmentation corpus: urban-like scenes (dense rectangles and
// thin lines, rich in high-frequency content) and rural-like scenes (large
// smooth blobs, dominated by low frequencies).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "afenet/tensor.hpp"

namespace afenet {

struct Sample {
  Tensor image;     // (3, H, W), values in [0, 1]
  IntTensor label;  // (H, W), values in [0, K)
};

// 8-bit binary netpbm only: PPM (P6) for color images, PGM (P5) for labels.
// Loaders validate before allocating and raise distinct diagnostics for a
// missing file, a wrong magic, a malformed header, oversized dimensions, an
// unsupported max value, and a truncated raster.
Tensor load_image(const std::string& path);
void save_image(const std::string& path, const Tensor& image);
IntTensor load_label(const std::string& path);
void save_label(const std::string& path, const IntTensor& label);

using Palette = std::vector<std::array<uint8_t, 3>>;
Palette default_palette(int num_classes);
Tensor colorize(const IntTensor& label, const Palette& palette);

// Raster-order patches of size patch x patch sampled every `stride` pixels;
// the final row/column of patches is anchored to the image edge, so every
// source pixel is covered (border patches may overlap their neighbours).
std::vector<Sample> tile(const Tensor& image, const IntTensor& label,
                         int patch, int stride);

enum class SceneKind { urban, rural };

// Five fixed classes: 0 ground, 1 building, 2 road, 3 water, 4 vegetation.
struct SynthSpec {
  uint64_t seed = 0;
  int count = 64;
  int size = 64;
  int num_classes = 5;
  float urban_frac = 0.5f;
  Palette palette = default_palette(5);
};

struct SynthSample {
  Sample sample;
  SceneKind kind = SceneKind::rural;
  uint64_t sample_seed = 0;
};

// Deterministic for a given spec; every sample is derived from its own
// mix_seed(spec.seed, index) stream, so `threads` never changes the output.
std::vector<SynthSample> synth_dataset(const SynthSpec& spec,
                                       int threads = 1);

// Directory layout: images/NNNN.ppm, labels/NNNN.pgm, and manifest.txt with
// one "NNNN kind seed" line per sample.
void write_dataset(const std::string& dir,
                   const std::vector<SynthSample>& samples);
std::vector<SynthSample> load_dataset(const std::string& dir);

}  // namespace afenet
