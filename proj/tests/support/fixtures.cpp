#include "fixtures.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <unistd.h>

namespace tumorseg::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

TumorRecord disk_record(int label, Eigen::Index h, Eigen::Index w, double cx, double cy, double radius,
                        std::uint64_t seed, const std::string& pid) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(0, 200);
  TumorRecord r;
  r.label = label;
  r.pid = pid;
  r.image.resize(h, w);
  r.mask.resize(h, w);
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      const bool inside = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy) <= radius;
      r.mask(y, x) = inside ? 1 : 0;
      r.image(y, x) = noise(rng) + (inside ? 600 : 0);
    }
  }
  for (int k = 0; k < 12; ++k) {
    const double a = 2.0 * std::numbers::pi * k / 12.0;
    r.border.push_back(cx + radius * std::cos(a));
    r.border.push_back(cy + radius * std::sin(a));
  }
  return r;
}

std::vector<TumorRecord> write_mat_fixture(const fs::path& dir, int n, Eigen::Index size, std::uint64_t seed) {
  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> centre(0.35 * size, 0.65 * size);
  std::uniform_real_distribution<double> radius(0.12 * size, 0.22 * size);
  std::vector<TumorRecord> out;
  for (int i = 0; i < n; ++i) {
    const double cx = centre(rng), cy = centre(rng), r = radius(rng);
    TumorRecord rec = disk_record(1 + i % 3, size, size, cx, cy, r, rng(), std::to_string(100000 + i));
    write_mat_record(dir / (std::to_string(i + 1) + ".mat"), rec);
    out.push_back(std::move(rec));
  }
  return out;
}

Grid random_grid(int h, int w, double p_fg, std::mt19937_64& rng) {
  std::bernoulli_distribution fg(p_fg);
  Grid g(static_cast<std::size_t>(h), std::vector<int>(static_cast<std::size_t>(w)));
  for (auto& row : g) {
    for (auto& v : row) v = fg(rng) ? 1 : 0;
  }
  return g;
}

ConfusionCounts naive_counts(const Grid& pred, const Grid& gt) {
  ConfusionCounts c;
  for (std::size_t y = 0; y < pred.size(); ++y) {
    for (std::size_t x = 0; x < pred[y].size(); ++x) {
      const int p = pred[y][x], g = gt[y][x];
      if (p == 1 && g == 1) {
        c.tp += 1;
      } else if (p == 1 && g == 0) {
        c.fp += 1;
      } else if (p == 0 && g == 1) {
        c.fn += 1;
      } else {
        c.tn += 1;
      }
    }
  }
  return c;
}

NaiveMetrics naive_metrics(const ConfusionCounts& c) {
  auto ratio = [](double num, double den) { return den == 0.0 ? 0.0 : num / den; };
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  NaiveMetrics m{};
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
  m.iou_fg = ratio(tp, tp + fn + fp);
  m.iou_bg = ratio(tn, tn + fp + fn);
  m.mean_iou = 0.5 * (m.iou_fg + m.iou_bg);
  return m;
}

Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> to_matrix(const Grid& g) {
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> m(static_cast<Eigen::Index>(g.size()),
                                                                 static_cast<Eigen::Index>(g.front().size()));
  for (Eigen::Index y = 0; y < m.rows(); ++y) {
    for (Eigen::Index x = 0; x < m.cols(); ++x) {
      m(y, x) = static_cast<std::uint8_t>(g[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]);
    }
  }
  return m;
}

GradCheckResult check_gradients(const std::vector<Var<double>>& leaves, const std::function<Var<double>()>& loss,
                                int points_per_leaf, std::uint64_t seed, double step) {
  for (auto leaf : leaves) leaf.zero_grad();
  backward(loss());
  std::vector<Tensor<double>> analytic;
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Var<double> leaf = leaves[l];
    std::uniform_int_distribution<Index> pick(0, leaf.value().size() - 1);
    for (int k = 0; k < points_per_leaf; ++k) {
      const Index i = pick(rng);
      double& v = leaf.mutable_value().data()[i];
      const double saved = v;
      v = saved + step;
      const double up = loss().value().data()[0];
      v = saved - step;
      const double down = loss().value().data()[0];
      v = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[l].data()[i];
      // Gradients that vanish exactly (a bias feeding a batch norm) leave only
      // round-off in the difference quotient, so the denominator is floored.
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-5});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.points;
    }
  }
  return result;
}

Var<double> random_projection(const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return weighted_sum(y, random_uniform<double>(y.shape(), rng, -1.0, 1.0));
}

}  // namespace tumorseg::testing
