#pragma once

#include "tumorseg/error.hpp"
#include "tumorseg/tensor.hpp"

#include "json.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace tumorseg {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }

struct MetricValues {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double iou_fg = 0;
  double iou_bg = 0;
  double mean_iou = 0;
};

enum class Aggregation { kMicro, kMacro };

std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view s);

struct MetricReport {
  std::string model;
  std::string split;
  double threshold = 0.5;
  Aggregation aggregation = Aggregation::kMicro;
  ConfusionCounts counts;
  MetricValues values;
  /// Mean over images of the per-image two-class IoU average.
  std::optional<double> mean_iou_per_image;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

inline void check_threshold(double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorCode::kBadThreshold, "threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
}

/// 1 where prob >= threshold. Throws BadThreshold.
template <typename Derived>
auto binarize(const Eigen::DenseBase<Derived>& prob, double threshold) {
  check_threshold(threshold);
  using Scalar = typename Derived::Scalar;
  return (prob.derived().array() >= static_cast<Scalar>(threshold)).template cast<std::uint8_t>().eval();
}

/// Pixel-wise counts over two binary masks of equal shape; nonzero is
/// foreground. Throws ShapeMismatch.
template <typename A, typename B>
ConfusionCounts confusion_counts(const Eigen::DenseBase<A>& pred, const Eigen::DenseBase<B>& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "prediction is " + std::to_string(pred.rows()) + "x" +
                                               std::to_string(pred.cols()) + ", ground truth is " +
                                               std::to_string(gt.rows()) + "x" + std::to_string(gt.cols()));
  }
  const auto p = pred.derived().array() != typename A::Scalar(0);
  const auto g = gt.derived().array() != typename B::Scalar(0);
  ConfusionCounts c;
  c.tp = (p && g).count();
  c.fp = (p && !g).count();
  c.fn = (!p && g).count();
  c.tn = static_cast<std::int64_t>(pred.size()) - c.tp - c.fp - c.fn;
  return c;
}

/// Precision, recall, F1 and IoU with 0/0 taken as 0; mean IoU averages the
/// foreground and background IoU.
MetricValues compute_metrics(const ConfusionCounts& c);

/// Per-image counts of thresholded probabilities against binary masks, both
/// (N, 1, H, W). Throws ShapeMismatch or BadThreshold.
std::vector<ConfusionCounts> per_image_counts(const TensorF& probs, const TensorF& masks, double threshold);

/// Aggregates per-image counts. Micro sums counts before computing metrics;
/// macro averages per-image metrics. Throws EmptySplit on no images.
MetricReport aggregate(const std::vector<ConfusionCounts>& per_image, Aggregation aggregation);

/// Arithmetic mean of per-image mean IoU. Throws EmptySplit.
double mean_iou_per_image(const std::vector<ConfusionCounts>& per_image);

}  // namespace tumorseg
