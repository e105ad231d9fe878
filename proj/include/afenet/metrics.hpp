#pragma once

// Confusion-matrix accumulation and segmentation metrics: overall accuracy,
// per-class precision/recall/F1/IoU, and their means, reported as an aligned
// text table or CSV.

#include <cstdint>
#include <string>
#include <vector>

#include "afenet/tensor.hpp"

namespace afenet {

// K x K count table; rows index the ground-truth class, columns the
// prediction.  Accumulation is pure addition, so shards built in parallel
// can be merged exactly.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return k_; }
  uint64_t at(int truth, int pred) const;
  uint64_t& at(int truth, int pred);
  uint64_t ignored() const { return ignored_; }
  uint64_t& ignored() { return ignored_; }
  uint64_t total() const;  // sum of all counts, ignored excluded

  void merge(const ConfusionMatrix& other);

 private:
  int k_;
  std::vector<uint64_t> counts_;
  uint64_t ignored_ = 0;
};

// Tallies counts[label, pred] per pixel.  Pixels whose ground-truth label is
// ignore_class are skipped and counted in ignored().  Out-of-range values
// raise a diagnostic naming the offending pixel.
void accumulate(ConfusionMatrix& cm, const IntTensor& pred,
                const IntTensor& label, int ignore_class = -1);

struct ClassMetrics {
  bool present = false;  // has ground-truth or predicted pixels
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  uint64_t support = 0;  // ground-truth pixel count
};

// All metric functions reject an empty matrix (no accumulated pixels).
double overall_accuracy(const ConfusionMatrix& cm);
std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm);

// Mean F1 over present classes.  The macro-harmonic variant instead takes
// the harmonic mean of macro precision and macro recall.
double mean_f1(const ConfusionMatrix& cm, bool macro_harmonic = false);
double mean_iou(const ConfusionMatrix& cm);

// Aligned per-class table followed by mF1 / mIoU / OA summary lines.
std::string metrics_table(const ConfusionMatrix& cm);
// CSV with a header row, one row per class, then summary rows.
std::string metrics_csv(const ConfusionMatrix& cm);

}  // namespace afenet
