#include "tumorseg/reporting.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace tumorseg {

namespace {

std::string fixed4(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void ComparisonSet::validate() const {
  if (reports.empty()) throw Error(ErrorCode::kEmptySet, "no reports to compare");
  std::set<std::string> names;
  for (const auto& r : reports) {
    if (!names.insert(r.model).second) throw Error(ErrorCode::kDuplicateModel, r.model);
    if (r.split != reports.front().split || r.threshold != reports.front().threshold) {
      throw Error(ErrorCode::kMixedSplit, "report '" + r.model + "' is on split " + r.split + " at threshold " +
                                              std::to_string(r.threshold) + ", expected " + reports.front().split +
                                              " at " + std::to_string(reports.front().threshold));
    }
  }
}

std::size_t ComparisonSet::best_index() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < reports.size(); ++i) {
    if (reports[i].values.mean_iou > reports[best].values.mean_iou) best = i;
  }
  return best;
}

TableFormat parse_table_format(std::string_view s) {
  if (s == "text") return TableFormat::kText;
  if (s == "csv") return TableFormat::kCsv;
  if (s == "md" || s == "markdown") return TableFormat::kMarkdown;
  throw Error(ErrorCode::kInvalidConfig, "unknown table format '" + std::string(s) + "'");
}

std::string metrics_table(const ComparisonSet& set, TableFormat format) {
  set.validate();
  const std::size_t best = set.best_index();
  std::ostringstream os;
  switch (format) {
    case TableFormat::kCsv:
      os << "model,precision,recall,f1,iou_fg,iou_bg,mean_iou\n";
      for (const auto& r : set.reports) {
        const auto& v = r.values;
        os << csv_field(r.model) << ',' << fixed4(v.precision) << ',' << fixed4(v.recall) << ',' << fixed4(v.f1) << ','
           << fixed4(v.iou_fg) << ',' << fixed4(v.iou_bg) << ',' << fixed4(v.mean_iou) << '\n';
      }
      break;
    case TableFormat::kMarkdown:
      os << "| Methodologies | F1 | MeanIoU |\n|---|---:|---:|\n";
      for (std::size_t i = 0; i < set.reports.size(); ++i) {
        const auto& r = set.reports[i];
        const std::string b = i == best ? "**" : "";
        os << "| " << b << r.model << b << " | " << b << fixed4(r.values.f1) << b << " | " << b
           << fixed4(r.values.mean_iou) << b << " |\n";
      }
      break;
    case TableFormat::kText: {
      std::size_t width = std::string("Methodologies").size();
      for (const auto& r : set.reports) width = std::max(width, r.model.size());
      os << std::left << std::setw(static_cast<int>(width)) << "Methodologies" << "  " << std::setw(6) << "F1"
         << "  " << "MeanIoU" << '\n';
      for (std::size_t i = 0; i < set.reports.size(); ++i) {
        const auto& r = set.reports[i];
        os << std::left << std::setw(static_cast<int>(width)) << r.model << "  " << fixed4(r.values.f1) << "  "
           << fixed4(r.values.mean_iou) << (i == best ? "  *" : "") << '\n';
      }
      break;
    }
  }
  return os.str();
}

ChartModel pr_chart_model(const ComparisonSet& set, int bar_width, int plot_height) {
  if (set.reports.empty()) throw Error(ErrorCode::kEmptySet, "no reports to chart");
  constexpr int kMargin = 20;
  constexpr int kGroupGap = 12;
  ChartModel c;
  c.plot_top = kMargin;
  c.plot_bottom = kMargin + plot_height;
  c.height = c.plot_bottom + kMargin;
  int x = kMargin + kGroupGap;
  for (std::size_t m = 0; m < set.reports.size(); ++m) {
    for (bool recall : {false, true}) {
      const double value = recall ? set.reports[m].values.recall : set.reports[m].values.precision;
      if (!(value >= 0.0 && value <= 1.0)) throw Error(ErrorCode::kInvalidConfig, "metric outside [0, 1]");
      ChartBar bar;
      bar.model = m;
      bar.recall = recall;
      bar.value = value;
      bar.x0 = x;
      bar.x1 = x + bar_width;
      bar.bottom = c.plot_bottom;
      bar.top = c.plot_bottom - static_cast<int>(std::lround(value * plot_height));
      c.bars.push_back(bar);
      x += bar_width;
    }
    x += kGroupGap;
  }
  c.width = x + kMargin;
  return c;
}

RgbImage render_chart(const ChartModel& chart) {
  RgbImage img(chart.width, chart.height, 255);
  auto fill = [&](int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> rgb) {
    for (int y = std::max(0, y0); y < std::min(chart.height, y1); ++y) {
      for (int x = std::max(0, x0); x < std::min(chart.width, x1); ++x) std::copy(rgb.begin(), rgb.end(), img.at(x, y));
    }
  };
  const int left = chart.bars.empty() ? 0 : chart.bars.front().x0 - 8;
  const int right = chart.width - 8;
  for (int tick = 0; tick <= 10; ++tick) {
    const int y = chart.plot_bottom - (chart.plot_bottom - chart.plot_top) * tick / 10;
    fill(left, y, right, y + 1, {225, 225, 225});
  }
  for (const auto& b : chart.bars) {
    fill(b.x0 + 1, b.top, b.x1 - 1, b.bottom, b.recall ? std::array<std::uint8_t, 3>{221, 132, 82}
                                                       : std::array<std::uint8_t, 3>{76, 114, 176});
  }
  fill(left, chart.plot_top, left + 1, chart.plot_bottom + 1, {0, 0, 0});
  fill(left, chart.plot_bottom, right, chart.plot_bottom + 1, {0, 0, 0});
  return img;
}

void pr_chart(const ComparisonSet& set, const std::filesystem::path& path) {
  write_png(path, render_chart(pr_chart_model(set)));
}

std::vector<std::string> pick_samples(const std::vector<std::string>& stems, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(stems.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, idx.size()));
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(stems[i]);
  return out;
}

GrayImage qualitative_grid(const SampleSet& samples, const std::vector<TensorF>& predictions, double threshold) {
  check_threshold(threshold);
  if (samples.size() == 0) throw Error(ErrorCode::kEmptySet, "no samples for the grid");
  if (predictions.empty()) throw Error(ErrorCode::kMissingPrediction, "no model predictions");
  const Shape s = samples.images.shape();
  for (std::size_t m = 0; m < predictions.size(); ++m) {
    if (!(predictions[m].shape() == s)) {
      throw Error(ErrorCode::kMissingPrediction, "model " + std::to_string(m) + " lacks predictions for some samples");
    }
  }
  const Index cols = 2 + static_cast<Index>(predictions.size());
  GrayImage grid;
  grid.width = static_cast<int>(cols * s.w);
  grid.height = static_cast<int>(s.n * s.h);
  grid.bit_depth = 8;
  grid.pixels.assign(static_cast<std::size_t>(grid.width) * grid.height, 0);
  auto put = [&](Index row, Index col, Index y, Index x, std::uint16_t v) {
    grid.pixels[static_cast<std::size_t>((row * s.h + y) * grid.width + col * s.w + x)] = v;
  };
  for (Index n = 0; n < s.n; ++n) {
    for (Index y = 0; y < s.h; ++y) {
      for (Index x = 0; x < s.w; ++x) {
        const float v = std::clamp(samples.images(n, 0, y, x), 0.0f, 1.0f);
        put(n, 0, y, x, static_cast<std::uint16_t>(std::lround(v * 255.0f)));
        put(n, 1, y, x, samples.masks(n, 0, y, x) > 0.5f ? 255 : 0);
        for (std::size_t m = 0; m < predictions.size(); ++m) {
          put(n, 2 + static_cast<Index>(m), y, x, predictions[m](n, 0, y, x) >= static_cast<float>(threshold) ? 255 : 0);
        }
      }
    }
  }
  return grid;
}

}  // namespace tumorseg
