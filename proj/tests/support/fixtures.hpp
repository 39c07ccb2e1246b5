#pragma once

#include "tumorseg/autograd.hpp"
#include "tumorseg/dataset.hpp"
#include "tumorseg/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace tumorseg::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "tumorseg");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Record with integer intensities, a filled disk mask and border points on
/// the disk perimeter.
TumorRecord disk_record(int label, Eigen::Index h, Eigen::Index w, double cx, double cy, double radius,
                        std::uint64_t seed, const std::string& pid = "100360");

/// Writes n records named 1.mat .. n.mat with labels cycling 1, 2, 3 and
/// randomly placed disks. Returns the records in file order.
std::vector<TumorRecord> write_mat_fixture(const std::filesystem::path& dir, int n, Eigen::Index size = 32,
                                           std::uint64_t seed = 5);

// --- Brute-force metric oracle ---------------------------------------------

using Grid = std::vector<std::vector<int>>;

Grid random_grid(int h, int w, double p_fg, std::mt19937_64& rng);
ConfusionCounts naive_counts(const Grid& pred, const Grid& gt);

struct NaiveMetrics {
  double precision, recall, f1, iou_fg, iou_bg, mean_iou;
};

/// Textbook formulas with explicit zero-denominator branches; F1 is taken as
/// the harmonic mean 2PR/(P+R).
NaiveMetrics naive_metrics(const ConfusionCounts& c);

Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> to_matrix(const Grid& g);

// --- Finite differences ----------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  int points = 0;
};

/// Compares backward() against central differences of a scalar loss at
/// `points_per_leaf` random coordinates of every leaf. The loss closure must
/// rebuild its graph from the leaves' current values on each call. The
/// relative error uses max(|analytic|, |numeric|, 1e-5) as denominator.
GradCheckResult check_gradients(const std::vector<Var<double>>& leaves, const std::function<Var<double>()>& loss,
                                int points_per_leaf, std::uint64_t seed, double step = 1e-5);

/// Random projection of a tensor to a scalar, so every output element
/// contributes a distinct gradient.
Var<double> random_projection(const Var<double>& y, std::uint64_t seed);

/// Fills every parameter of a module with N(0, stddev^2) values.
template <typename Module>
void randomize_parameters(Module& m, std::uint64_t seed, double stddev = 0.5);

}  // namespace tumorseg::testing

#include "fixtures_impl.hpp"
