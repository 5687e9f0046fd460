#pragma once

#include <cstdint>
#include <vector>

#include "ecenet/losses.hpp"

namespace ecenet {

/// N x N pixel counts; rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t n) : n_(n), counts_(n * n, 0) {
    if (n == 0) throw ContractError("confusion matrix needs at least one class");
  }

  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }

  /// Adds one map pair. Ground-truth pixels equal to kIgnoreLabel are skipped.
  void add(const std::vector<std::uint8_t>& gt, const std::vector<std::uint8_t>& pred) {
    if (gt.size() != pred.size()) {
      throw DimensionError("confusion: " + std::to_string(gt.size()) + " labels vs " + std::to_string(pred.size()) +
                           " predictions");
    }
    for (std::size_t p = 0; p < gt.size(); ++p) {
      if (gt[p] == kIgnoreLabel) continue;
      if (gt[p] >= n_ || pred[p] >= n_) {
        throw DataError("confusion: class index outside [0, " + std::to_string(n_) + ")");
      }
    }
    for (std::size_t p = 0; p < gt.size(); ++p) {
      if (gt[p] != kIgnoreLabel) ++counts_[gt[p] * n_ + pred[p]];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.n_ != n_) throw ContractError("confusion: merging matrices of different size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t row_sum(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < n_; ++j) s += at(c, j);
    return s;
  }

  std::uint64_t col_sum(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < n_; ++i) s += at(i, c);
    return s;
  }

  bool present(std::size_t c) const { return row_sum(c) > 0; }

  /// M[c,c] / (row_c + col_c - M[c,c]); 0 when the class never occurs.
  double iou(std::size_t c) const {
    const std::uint64_t tp = at(c, c);
    const std::uint64_t uni = row_sum(c) + col_sum(c) - tp;
    return uni ? static_cast<double>(tp) / static_cast<double>(uni) : 0.0;
  }

  /// Mean IoU over classes present in the ground truth.
  double miou() const {
    double sum = 0;
    std::size_t k = 0;
    for (std::size_t c = 0; c < n_; ++c) {
      if (!present(c)) continue;
      sum += iou(c);
      ++k;
    }
    if (k == 0) throw ContractError("miou: no labeled pixels");
    return sum / static_cast<double>(k);
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> counts_;
};

struct EvalResult {
  double miou = 0;
  std::vector<double> iou;     ///< per class
  std::vector<bool> present;   ///< class occurs in the ground truth
  ConfusionMatrix confusion;
};

inline EvalResult summarize(const ConfusionMatrix& cm) {
  EvalResult r;
  r.confusion = cm;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    r.iou.push_back(cm.iou(c));
    r.present.push_back(cm.present(c));
  }
  r.miou = cm.miou();
  return r;
}

}  // namespace ecenet
