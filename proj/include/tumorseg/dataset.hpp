#pragma once

#include "tumorseg/error.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace tumorseg {

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// One annotated slice. Border points are (x, y) = (column, row) pairs.
struct TumorRecord {
  int label = 0;
  std::string pid;
  Eigen::MatrixXd image;
  std::vector<double> border;
  MaskMatrix mask;

  Eigen::Index height() const { return image.rows(); }
  Eigen::Index width() const { return image.cols(); }

  /// Throws InvalidRecord or ShapeMismatch when an invariant does not hold.
  void check() const;
};

std::string_view label_name(int label);

// --- MAT container ---------------------------------------------------------

/// Reads a MATLAB v7.3 (HDF5) record with group `cjdata`. Throws IoFailure,
/// UnsupportedContainer, MissingField, ShapeMismatch or InvalidRecord.
TumorRecord load_mat_record(const std::filesystem::path& path);

struct MatWriteOptions {
  /// Fields to leave out, for building defective fixtures.
  std::vector<std::string> omit;
};

/// Writes a record in the same v7.3 layout (512-byte MATLAB header block,
/// column-major datasets). Throws IoFailure.
void write_mat_record(const std::filesystem::path& path, const TumorRecord& record, const MatWriteOptions& opts = {});

// --- Normalization ---------------------------------------------------------

/// Per-image min-max scaling to [0, 1]; constant images map to zeros.
template <typename Derived>
Eigen::MatrixXd normalize_image(const Eigen::MatrixBase<Derived>& image) {
  const Eigen::MatrixXd x = image.template cast<double>();
  const double lo = x.minCoeff();
  const double hi = x.maxCoeff();
  if (!(hi > lo)) return Eigen::MatrixXd::Zero(x.rows(), x.cols());
  return ((x.array() - lo) / (hi - lo)).matrix();
}

/// Fixed-range scaling shared by a whole dataset, clamped to [0, 1].
template <typename Derived>
Eigen::MatrixXd normalize_image(const Eigen::MatrixBase<Derived>& image, double lo, double hi) {
  const Eigen::MatrixXd x = image.template cast<double>();
  if (!(hi > lo)) return Eigen::MatrixXd::Zero(x.rows(), x.cols());
  return ((x.array() - lo) / (hi - lo)).cwiseMax(0.0).cwiseMin(1.0).matrix();
}

enum class Normalization { kPerImage, kGlobal };

// --- Export ----------------------------------------------------------------

struct ManifestRow {
  std::string stem;
  int label = 0;
  std::string pid;
  std::string split;
};

struct ExportOptions {
  int bit_depth = 8;
  Normalization normalization = Normalization::kPerImage;
};

/// Writes images/<stem>.png and masks/<stem>.png for each record. Stems
/// default to r0000, r0001, ... Throws IoFailure or DuplicateStem.
std::vector<ManifestRow> export_dataset(const std::vector<TumorRecord>& records, const std::filesystem::path& out_dir,
                                        const ExportOptions& opts = {}, const std::vector<std::string>& stems = {});

std::string default_stem(std::size_t index);

// --- Splits ----------------------------------------------------------------

struct SplitCounts {
  std::int64_t train = 0;
  std::int64_t val = 0;
  std::int64_t test = 0;

  std::int64_t total() const { return train + val + test; }
  bool operator==(const SplitCounts&) const = default;
};

/// 2485 : 274 : 305 scaled to n; validation and test are rounded and the
/// training split takes the remainder.
SplitCounts proportional_counts(std::int64_t n);

struct SplitManifest {
  std::vector<ManifestRow> entries;
  std::uint64_t seed = 0;
  SplitCounts counts;

  std::vector<std::string> stems(std::string_view split) const;
};

/// Seeded shuffle, then contiguous train / val / test assignment. Entries
/// keep their input order. Throws CountMismatch.
SplitManifest make_splits(std::vector<ManifestRow> rows, const SplitCounts& counts, std::uint64_t seed);
SplitManifest make_splits(const std::vector<std::string>& stems, const SplitCounts& counts, std::uint64_t seed);

/// manifest.csv plus split.json (seed and counts). Throws IoFailure.
void write_manifest(const std::filesystem::path& dataset_dir, const SplitManifest& manifest);
/// Throws IoFailure or InvalidRecord.
SplitManifest read_manifest(const std::filesystem::path& dataset_dir);

// --- Validation ------------------------------------------------------------

struct ValidationReport {
  double mask_fraction = 0.0;
  std::vector<std::size_t> off_boundary_points;
  std::vector<std::string> warnings;

  bool ok() const { return warnings.empty(); }
};

/// Report-only consistency check between border polyline and mask.
ValidationReport validate_record(const TumorRecord& record, double tolerance_px = 2.0);

// --- Directory conversion --------------------------------------------------

struct ConvertOptions {
  std::optional<SplitCounts> counts;
  std::uint64_t seed = 42;
  ExportOptions export_options;
};

struct ConvertSummary {
  SplitManifest manifest;
  std::int64_t class_counts[3] = {0, 0, 0};
};

/// *.mat files of a directory in natural sort order.
std::vector<std::filesystem::path> list_mat_files(const std::filesystem::path& dir);

/// Loads every record of input_dir, exports it to out_dir and writes the
/// split manifest. Output is staged and only moved into place on success.
ConvertSummary convert_directory(const std::filesystem::path& input_dir, const std::filesystem::path& out_dir,
                                 const ConvertOptions& opts = {});

}  // namespace tumorseg
