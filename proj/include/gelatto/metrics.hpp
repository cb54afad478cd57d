#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gelatto/common.hpp"

namespace gelatto {

/// C x C counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes)
      : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return counts_[truth * classes_ + pred];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  void add(int truth, int pred, std::uint64_t count = 1) {
    if (truth < 0 || pred < 0 || static_cast<std::size_t>(truth) >= classes_ ||
        static_cast<std::size_t>(pred) >= classes_)
      throw IndexError("confusion: label out of range");
    counts_[static_cast<std::size_t>(truth) * classes_ + static_cast<std::size_t>(pred)] += count;
  }

  void update(std::span<const int> truth, std::span<const int> pred) {
    if (truth.size() != pred.size()) throw DimensionError("confusion: size mismatch");
    for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], pred[i]);
  }

  /// Elementwise merge for parallel evaluation.
  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw DimensionError("confusion: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  struct Metrics {
    double oa = 0.0;
    double macc = 0.0;
    double miou = 0.0;
    std::vector<double> class_acc;   // -1 where the class has no truth points
    std::vector<double> class_iou;   // -1 where the class is absent entirely
  };

  /// OA = trace/total. Per-class accuracy over classes with truth points;
  /// per-class IoU over classes present in truth or prediction (present but
  /// never correct contributes 0). Absent classes are excluded from means.
  Metrics compute() const {
    if (total() == 0) throw ContractError("confusion: empty matrix");
    Metrics m;
    m.class_acc.assign(classes_, -1.0);
    m.class_iou.assign(classes_, -1.0);
    std::uint64_t trace = 0;
    double acc_sum = 0, iou_sum = 0;
    std::size_t acc_n = 0, iou_n = 0;
    for (std::size_t c = 0; c < classes_; ++c) {
      std::uint64_t row = 0, col = 0;
      for (std::size_t j = 0; j < classes_; ++j) {
        row += at(c, j);
        col += at(j, c);
      }
      const std::uint64_t diag = at(c, c);
      trace += diag;
      if (row > 0) {
        m.class_acc[c] = static_cast<double>(diag) / static_cast<double>(row);
        acc_sum += m.class_acc[c];
        ++acc_n;
      }
      if (row + col > 0) {
        m.class_iou[c] = static_cast<double>(diag) / static_cast<double>(row + col - diag);
        iou_sum += m.class_iou[c];
        ++iou_n;
      }
    }
    m.oa = static_cast<double>(trace) / static_cast<double>(total());
    m.macc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
    m.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
    return m;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

}  // namespace gelatto
