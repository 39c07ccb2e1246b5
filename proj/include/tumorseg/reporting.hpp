#pragma once

#include "tumorseg/metrics.hpp"
#include "tumorseg/png_io.hpp"
#include "tumorseg/samples.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace tumorseg {

/// Ordered reports of several models on one split at one threshold.
struct ComparisonSet {
  std::vector<MetricReport> reports;

  /// Throws EmptySet, DuplicateModel or MixedSplit.
  void validate() const;
  /// Row with the highest mean IoU, earliest on ties.
  std::size_t best_index() const;
};

enum class TableFormat { kText, kCsv, kMarkdown };

TableFormat parse_table_format(std::string_view s);

/// Methodologies / F1 / MeanIoU table with 4-decimal values; the best row is
/// starred (text) or bolded (markdown). CSV carries every metric instead and
/// leaves the best row unmarked.
std::string metrics_table(const ComparisonSet& set, TableFormat format);

/// Geometry of a grouped precision / recall bar chart in pixel space.
struct ChartBar {
  std::size_t model = 0;
  bool recall = false;
  double value = 0;
  int x0 = 0, x1 = 0;
  int top = 0, bottom = 0;

  int height() const { return bottom - top; }
};

struct ChartModel {
  int width = 0;
  int height = 0;
  int plot_top = 0;
  int plot_bottom = 0;
  std::vector<ChartBar> bars;
};

/// Two bars per model on a [0, 1] axis. Throws EmptySet.
ChartModel pr_chart_model(const ComparisonSet& set, int bar_width = 16, int plot_height = 200);
RgbImage render_chart(const ChartModel& chart);
/// Renders the chart to a PNG file. Throws IoFailure.
void pr_chart(const ComparisonSet& set, const std::filesystem::path& path);

/// Seeded choice of `count` stems (all when count >= stems.size()).
std::vector<std::string> pick_samples(const std::vector<std::string>& stems, std::size_t count, std::uint64_t seed);

/// Rows of [scan, ground truth, one binarized prediction per model], each
/// tile at the samples' resolution, in sample order. predictions[m] holds
/// model m's probabilities for every sample. Throws MissingPrediction or
/// EmptySet.
GrayImage qualitative_grid(const SampleSet& samples, const std::vector<TensorF>& predictions, double threshold = 0.5);

}  // namespace tumorseg
