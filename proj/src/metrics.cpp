#include "afenet/metrics.hpp"

#include <cstdio>
#include <stdexcept>
#include <string>

namespace afenet {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

struct Tally {
  uint64_t tp = 0, fp = 0, fn = 0;
};

Tally tally_class(const ConfusionMatrix& cm, int c) {
  Tally t;
  t.tp = cm.at(c, c);
  for (int j = 0; j < cm.num_classes(); ++j) {
    if (j == c) continue;
    t.fp += cm.at(j, c);
    t.fn += cm.at(c, j);
  }
  return t;
}

void require_nonempty(const ConfusionMatrix& cm) {
  if (cm.total() == 0)
    throw std::runtime_error("metrics: empty confusion matrix");
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  check(num_classes >= 2, "ConfusionMatrix: need at least 2 classes");
  counts_.assign(size_t(k_) * size_t(k_), 0);
}

uint64_t ConfusionMatrix::at(int truth, int pred) const {
  check(truth >= 0 && truth < k_ && pred >= 0 && pred < k_,
        "ConfusionMatrix::at: class out of range");
  return counts_[size_t(truth) * size_t(k_) + size_t(pred)];
}

uint64_t& ConfusionMatrix::at(int truth, int pred) {
  check(truth >= 0 && truth < k_ && pred >= 0 && pred < k_,
        "ConfusionMatrix::at: class out of range");
  return counts_[size_t(truth) * size_t(k_) + size_t(pred)];
}

uint64_t ConfusionMatrix::total() const {
  uint64_t s = 0;
  for (uint64_t c : counts_) s += c;
  return s;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  check(other.k_ == k_, "ConfusionMatrix::merge: class count mismatch");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  ignored_ += other.ignored_;
}

void accumulate(ConfusionMatrix& cm, const IntTensor& pred,
                const IntTensor& label, int ignore_class) {
  check(pred.shape == label.shape,
        "accumulate: prediction and label shapes differ");
  const int k = cm.num_classes();
  for (int64_t i = 0; i < label.numel(); ++i) {
    const int32_t t = label.v[size_t(i)];
    if (t == ignore_class) {
      cm.ignored() += 1;
      continue;
    }
    const int32_t p = pred.v[size_t(i)];
    if (t < 0 || t >= k)
      throw std::invalid_argument("accumulate: label " + std::to_string(t) +
                                  " out of range [0, " + std::to_string(k) +
                                  ") at pixel " + std::to_string(i));
    if (p < 0 || p >= k)
      throw std::invalid_argument("accumulate: prediction " +
                                  std::to_string(p) + " out of range [0, " +
                                  std::to_string(k) + ") at pixel " +
                                  std::to_string(i));
    cm.at(t, p) += 1;
  }
}

double overall_accuracy(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  uint64_t diag = 0;
  for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  return double(diag) / double(cm.total());
}

std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  std::vector<ClassMetrics> out(size_t(cm.num_classes()));
  for (int c = 0; c < cm.num_classes(); ++c) {
    const Tally t = tally_class(cm, c);
    ClassMetrics& m = out[size_t(c)];
    m.support = t.tp + t.fn;
    m.present = (t.tp + t.fp + t.fn) > 0;
    m.precision = (t.tp + t.fp) > 0 ? double(t.tp) / double(t.tp + t.fp) : 0.0;
    m.recall = (t.tp + t.fn) > 0 ? double(t.tp) / double(t.tp + t.fn) : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    m.iou = (t.tp + t.fp + t.fn) > 0
                ? double(t.tp) / double(t.tp + t.fp + t.fn)
                : 0.0;
  }
  return out;
}

double mean_f1(const ConfusionMatrix& cm, bool macro_harmonic) {
  const std::vector<ClassMetrics> per = per_class_metrics(cm);
  double acc_f1 = 0.0, acc_p = 0.0, acc_r = 0.0;
  int n = 0;
  for (const ClassMetrics& m : per) {
    if (!m.present) continue;
    acc_f1 += m.f1;
    acc_p += m.precision;
    acc_r += m.recall;
    ++n;
  }
  check(n > 0, "mean_f1: no present classes");
  if (!macro_harmonic) return acc_f1 / n;
  const double mp = acc_p / n, mr = acc_r / n;
  return (mp + mr) > 0.0 ? 2.0 * mp * mr / (mp + mr) : 0.0;
}

double mean_iou(const ConfusionMatrix& cm) {
  const std::vector<ClassMetrics> per = per_class_metrics(cm);
  double acc = 0.0;
  int n = 0;
  for (const ClassMetrics& m : per) {
    if (!m.present) continue;
    acc += m.iou;
    ++n;
  }
  check(n > 0, "mean_iou: no present classes");
  return acc / n;
}

std::string metrics_table(const ConfusionMatrix& cm) {
  const std::vector<ClassMetrics> per = per_class_metrics(cm);
  char buf[160];
  std::string out =
      "class  precision     recall         f1        iou     support\n";
  for (int c = 0; c < cm.num_classes(); ++c) {
    const ClassMetrics& m = per[size_t(c)];
    if (!m.present) {
      std::snprintf(buf, sizeof buf, "%5d %54s\n", c, "absent");
      out += buf;
      continue;
    }
    std::snprintf(buf, sizeof buf, "%5d   %8.4f   %8.4f   %8.4f   %8.4f  %10llu\n",
                  c, m.precision, m.recall, m.f1, m.iou,
                  static_cast<unsigned long long>(m.support));
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mF1  %.4f\nmIoU %.4f\nOA   %.4f\n",
                mean_f1(cm), mean_iou(cm), overall_accuracy(cm));
  out += buf;
  return out;
}

std::string metrics_csv(const ConfusionMatrix& cm) {
  const std::vector<ClassMetrics> per = per_class_metrics(cm);
  char buf[160];
  std::string out = "class,precision,recall,f1,iou,support\n";
  for (int c = 0; c < cm.num_classes(); ++c) {
    const ClassMetrics& m = per[size_t(c)];
    if (!m.present) {
      std::snprintf(buf, sizeof buf, "%d,absent,,,,\n", c);
      out += buf;
      continue;
    }
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%llu\n", c,
                  m.precision, m.recall, m.f1, m.iou,
                  static_cast<unsigned long long>(m.support));
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mF1,%.6f\nmIoU,%.6f\nOA,%.6f\n", mean_f1(cm),
                mean_iou(cm), overall_accuracy(cm));
  out += buf;
  return out;
}

}  // namespace afenet
