#include "tumorseg/metrics.hpp"

#include <sstream>

namespace tumorseg {

namespace {

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::string_view to_string(Aggregation a) { return a == Aggregation::kMicro ? "micro" : "macro"; }

Aggregation parse_aggregation(std::string_view s) {
  if (s == "micro") return Aggregation::kMicro;
  if (s == "macro") return Aggregation::kMacro;
  throw Error(ErrorCode::kInvalidConfig, "unknown aggregation '" + std::string(s) + "'");
}

MetricValues compute_metrics(const ConfusionCounts& c) {
  MetricValues m;
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  m.iou_fg = ratio(c.tp, c.tp + c.fp + c.fn);
  m.iou_bg = ratio(c.tn, c.tn + c.fp + c.fn);
  m.mean_iou = (m.iou_fg + m.iou_bg) / 2.0;
  return m;
}

std::vector<ConfusionCounts> per_image_counts(const TensorF& probs, const TensorF& masks, double threshold) {
  check_threshold(threshold);
  if (!(probs.shape() == masks.shape()) || probs.shape().c != 1) {
    std::ostringstream msg;
    msg << "predictions " << probs.shape() << " vs masks " << masks.shape();
    throw Error(ErrorCode::kShapeMismatch, msg.str());
  }
  std::vector<ConfusionCounts> out;
  out.reserve(static_cast<std::size_t>(probs.shape().n));
  for (Index n = 0; n < probs.shape().n; ++n) {
    out.push_back(confusion_counts(binarize(probs.sample(n), threshold), masks.sample(n)));
  }
  return out;
}

MetricReport aggregate(const std::vector<ConfusionCounts>& per_image, Aggregation aggregation) {
  if (per_image.empty()) throw Error(ErrorCode::kEmptySplit, "no images to evaluate");
  MetricReport r;
  r.aggregation = aggregation;
  for (const auto& c : per_image) r.counts += c;
  if (aggregation == Aggregation::kMicro) {
    r.values = compute_metrics(r.counts);
  } else {
    for (const auto& c : per_image) {
      const MetricValues m = compute_metrics(c);
      r.values.precision += m.precision;
      r.values.recall += m.recall;
      r.values.f1 += m.f1;
      r.values.iou_fg += m.iou_fg;
      r.values.iou_bg += m.iou_bg;
      r.values.mean_iou += m.mean_iou;
    }
    const double n = static_cast<double>(per_image.size());
    r.values.precision /= n;
    r.values.recall /= n;
    r.values.f1 /= n;
    r.values.iou_fg /= n;
    r.values.iou_bg /= n;
    r.values.mean_iou /= n;
  }
  r.mean_iou_per_image = mean_iou_per_image(per_image);
  return r;
}

double mean_iou_per_image(const std::vector<ConfusionCounts>& per_image) {
  if (per_image.empty()) throw Error(ErrorCode::kEmptySplit, "no images to evaluate");
  double sum = 0;
  for (const auto& c : per_image) sum += compute_metrics(c).mean_iou;
  return sum / static_cast<double>(per_image.size());
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{
      {"model", r.model},
      {"split", r.split},
      {"threshold", r.threshold},
      {"aggregation", to_string(r.aggregation)},
      {"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}}},
      {"precision", r.values.precision},
      {"recall", r.values.recall},
      {"f1", r.values.f1},
      {"iou_fg", r.values.iou_fg},
      {"iou_bg", r.values.iou_bg},
      {"mean_iou", r.values.mean_iou},
  };
  if (r.mean_iou_per_image) j["mean_iou_per_image"] = *r.mean_iou_per_image;
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  try {
    r.model = j.at("model").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.threshold = j.at("threshold").get<double>();
    r.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    const auto& c = j.at("counts");
    r.counts = {c.at("tp").get<std::int64_t>(), c.at("fp").get<std::int64_t>(), c.at("fn").get<std::int64_t>(),
                c.at("tn").get<std::int64_t>()};
    r.values.precision = j.at("precision").get<double>();
    r.values.recall = j.at("recall").get<double>();
    r.values.f1 = j.at("f1").get<double>();
    r.values.iou_fg = j.at("iou_fg").get<double>();
    r.values.iou_bg = j.at("iou_bg").get<double>();
    r.values.mean_iou = j.at("mean_iou").get<double>();
    if (j.contains("mean_iou_per_image")) r.mean_iou_per_image = j.at("mean_iou_per_image").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("malformed metric report: ") + e.what());
  }
  for (double v : {r.values.precision, r.values.recall, r.values.f1, r.values.iou_fg, r.values.iou_bg,
                   r.values.mean_iou}) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::kInvalidConfig, "metric value outside [0, 1]");
  }
}

}  // namespace tumorseg
