#include "tumorseg/dataset.hpp"

#include "tumorseg/png_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace tumorseg {

namespace fs = std::filesystem;

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

// Digit runs compare by value, everything else bytewise.
bool natural_less(const std::string& a, const std::string& b) {
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (std::isdigit(static_cast<unsigned char>(a[i])) && std::isdigit(static_cast<unsigned char>(b[j]))) {
      std::size_t ie = i, je = j;
      while (ie < a.size() && std::isdigit(static_cast<unsigned char>(a[ie]))) ++ie;
      while (je < b.size() && std::isdigit(static_cast<unsigned char>(b[je]))) ++je;
      std::string_view da(a.data() + i, ie - i), db(b.data() + j, je - j);
      while (da.size() > 1 && da.front() == '0') da.remove_prefix(1);
      while (db.size() > 1 && db.front() == '0') db.remove_prefix(1);
      if (da.size() != db.size()) return da.size() < db.size();
      if (da != db) return da < db;
      i = ie;
      j = je;
    } else {
      if (a[i] != b[j]) return a[i] < b[j];
      ++i;
      ++j;
    }
  }
  return a.size() - i < b.size() - j;
}

GrayImage quantize(const Eigen::MatrixXd& normalized, int bit_depth) {
  GrayImage img;
  img.width = static_cast<int>(normalized.cols());
  img.height = static_cast<int>(normalized.rows());
  img.bit_depth = bit_depth;
  const double scale = bit_depth == 16 ? 65535.0 : 255.0;
  img.pixels.resize(static_cast<std::size_t>(normalized.size()));
  for (Eigen::Index y = 0; y < normalized.rows(); ++y) {
    for (Eigen::Index x = 0; x < normalized.cols(); ++x) {
      img.pixels[static_cast<std::size_t>(y * normalized.cols() + x)] =
          static_cast<std::uint16_t>(std::lround(normalized(y, x) * scale));
    }
  }
  return img;
}

GrayImage mask_image(const MaskMatrix& mask) {
  GrayImage img;
  img.width = static_cast<int>(mask.cols());
  img.height = static_cast<int>(mask.rows());
  img.bit_depth = 8;
  img.pixels.resize(static_cast<std::size_t>(mask.size()));
  for (Eigen::Index y = 0; y < mask.rows(); ++y) {
    for (Eigen::Index x = 0; x < mask.cols(); ++x) {
      img.pixels[static_cast<std::size_t>(y * mask.cols() + x)] = mask(y, x) ? 255 : 0;
    }
  }
  return img;
}

void replace_path(const fs::path& from, const fs::path& to) {
  std::error_code ec;
  fs::remove_all(to, ec);
  fs::rename(from, to, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot move " + from.string() + " to " + to.string() + ": " + ec.message());
}

}  // namespace

void TumorRecord::check() const {
  if (label < 1 || label > 3) throw Error(ErrorCode::kInvalidRecord, "label " + std::to_string(label) + " not in {1,2,3}");
  if (image.size() == 0) throw Error(ErrorCode::kInvalidRecord, "empty image");
  if (image.rows() != mask.rows() || image.cols() != mask.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "image and mask extents differ");
  }
  if ((mask.array() > 1).any()) throw Error(ErrorCode::kInvalidRecord, "mask values outside {0,1}");
  if (border.size() % 2 != 0 || border.size() < 6) {
    throw Error(ErrorCode::kInvalidRecord, "border needs an even number of >= 6 coordinates, has " +
                                               std::to_string(border.size()));
  }
  for (std::size_t i = 0; i < border.size(); i += 2) {
    const double x = border[i], y = border[i + 1];
    if (!(x >= 0 && x <= static_cast<double>(width()) && y >= 0 && y <= static_cast<double>(height()))) {
      throw Error(ErrorCode::kInvalidRecord, "border point " + std::to_string(i / 2) + " outside the image");
    }
  }
}

std::string_view label_name(int label) {
  switch (label) {
    case 1: return "meningioma";
    case 2: return "glioma";
    case 3: return "pituitary";
    default: return "unknown";
  }
}

std::string default_stem(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%04zu", index);
  return buf;
}

std::vector<ManifestRow> export_dataset(const std::vector<TumorRecord>& records, const fs::path& out_dir,
                                        const ExportOptions& opts, const std::vector<std::string>& stems) {
  if (opts.bit_depth != 8 && opts.bit_depth != 16) throw Error(ErrorCode::kInvalidConfig, "bit depth must be 8 or 16");
  if (!stems.empty() && stems.size() != records.size()) {
    throw Error(ErrorCode::kCountMismatch, "stem list does not match the record count");
  }
  std::set<std::string> seen;
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string stem = stems.empty() ? default_stem(i) : stems[i];
    if (!seen.insert(stem).second) throw Error(ErrorCode::kDuplicateStem, stem);
    rows.push_back({stem, records[i].label, records[i].pid, ""});
  }

  double lo = 0, hi = 0;
  if (opts.normalization == Normalization::kGlobal && !records.empty()) {
    lo = records.front().image.minCoeff();
    hi = records.front().image.maxCoeff();
    for (const auto& r : records) {
      lo = std::min(lo, r.image.minCoeff());
      hi = std::max(hi, r.image.maxCoeff());
    }
  }

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + out_dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const TumorRecord& r = records[i];
    const Eigen::MatrixXd normalized =
        opts.normalization == Normalization::kGlobal ? normalize_image(r.image, lo, hi) : normalize_image(r.image);
    write_png(out_dir / "images" / (rows[i].stem + ".png"), quantize(normalized, opts.bit_depth));
    write_png(out_dir / "masks" / (rows[i].stem + ".png"), mask_image(r.mask));
  }
  return rows;
}

SplitCounts proportional_counts(std::int64_t n) {
  SplitCounts c;
  c.val = std::llround(static_cast<double>(n) * 274.0 / 3064.0);
  c.test = std::llround(static_cast<double>(n) * 305.0 / 3064.0);
  c.train = n - c.val - c.test;
  return c;
}

std::vector<std::string> SplitManifest::stems(std::string_view split) const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e.stem);
  }
  return out;
}

SplitManifest make_splits(std::vector<ManifestRow> rows, const SplitCounts& counts, std::uint64_t seed) {
  if (counts.train < 0 || counts.val < 0 || counts.test < 0 ||
      counts.total() != static_cast<std::int64_t>(rows.size())) {
    throw Error(ErrorCode::kCountMismatch, "split counts " + std::to_string(counts.train) + "/" +
                                               std::to_string(counts.val) + "/" + std::to_string(counts.test) +
                                               " do not partition " + std::to_string(rows.size()) + " entries");
  }
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto pos = static_cast<std::int64_t>(k);
    rows[order[k]].split = pos < counts.train ? "train" : pos < counts.train + counts.val ? "val" : "test";
  }
  return SplitManifest{std::move(rows), seed, counts};
}

SplitManifest make_splits(const std::vector<std::string>& stems, const SplitCounts& counts, std::uint64_t seed) {
  std::vector<ManifestRow> rows;
  rows.reserve(stems.size());
  for (const auto& s : stems) rows.push_back({s, 0, "", ""});
  return make_splits(std::move(rows), counts, seed);
}

void write_manifest(const fs::path& dataset_dir, const SplitManifest& manifest) {
  {
    std::ofstream os(dataset_dir / "manifest.csv", std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::kIoFailure, "cannot write manifest in " + dataset_dir.string());
    os << "stem,label,pid,split\n";
    for (const auto& e : manifest.entries) {
      os << csv_field(e.stem) << ',' << e.label << ',' << csv_field(e.pid) << ',' << e.split << '\n';
    }
    if (!os.flush()) throw Error(ErrorCode::kIoFailure, "failed writing manifest");
  }
  nlohmann::json j{{"seed", manifest.seed},
                   {"counts", {{"train", manifest.counts.train}, {"val", manifest.counts.val}, {"test", manifest.counts.test}}}};
  std::ofstream os(dataset_dir / "split.json", std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::kIoFailure, "cannot write split.json in " + dataset_dir.string());
  os << j.dump(2) << '\n';
}

SplitManifest read_manifest(const fs::path& dataset_dir) {
  const fs::path path = dataset_dir / "manifest.csv";
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "stem,label,pid,split") {
    throw Error(ErrorCode::kInvalidRecord, path.string() + " lacks the stem,label,pid,split header");
  }
  SplitManifest m;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw Error(ErrorCode::kInvalidRecord, "malformed manifest row: " + line);
    ManifestRow row{f[0], 0, f[2], f[3]};
    try {
      row.label = std::stoi(f[1]);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidRecord, "malformed label in manifest row: " + line);
    }
    if (row.split == "train") ++m.counts.train;
    else if (row.split == "val") ++m.counts.val;
    else if (row.split == "test") ++m.counts.test;
    else throw Error(ErrorCode::kInvalidRecord, "unknown split '" + row.split + "'");
    m.entries.push_back(std::move(row));
  }
  std::ifstream js(dataset_dir / "split.json");
  if (js) {
    try {
      m.seed = nlohmann::json::parse(js).value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::kInvalidRecord, "malformed split.json");
    }
  }
  return m;
}

ValidationReport validate_record(const TumorRecord& record, double tolerance_px) {
  ValidationReport rep;
  const MaskMatrix& m = record.mask;
  const auto fg = (m.array() != 0).count();
  rep.mask_fraction = m.size() ? static_cast<double>(fg) / static_cast<double>(m.size()) : 0.0;
  if (fg == 0) {
    rep.warnings.push_back("empty mask");
  } else if (rep.mask_fraction >= 0.5) {
    rep.warnings.push_back("mask covers " + std::to_string(rep.mask_fraction) + " of the image");
  }

  std::vector<std::pair<double, double>> boundary;
  for (Eigen::Index y = 0; y < m.rows(); ++y) {
    for (Eigen::Index x = 0; x < m.cols(); ++x) {
      if (!m(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == m.rows() || x + 1 == m.cols() || !m(y - 1, x) ||
                        !m(y + 1, x) || !m(y, x - 1) || !m(y, x + 1);
      if (edge) boundary.emplace_back(static_cast<double>(x), static_cast<double>(y));
    }
  }
  if (boundary.empty()) return rep;
  for (std::size_t i = 0; i + 1 < record.border.size(); i += 2) {
    const double px = record.border[i], py = record.border[i + 1];
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [bx, by] : boundary) best = std::min(best, std::hypot(px - bx, py - by));
    if (best > tolerance_px) {
      rep.off_boundary_points.push_back(i / 2);
      rep.warnings.push_back("border point " + std::to_string(i / 2) + " is " + std::to_string(best) +
                             " px from the mask boundary");
    }
  }
  return rep;
}

std::vector<fs::path> list_mat_files(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error(ErrorCode::kIoFailure, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".mat") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return natural_less(a.filename().string(), b.filename().string()); });
  return files;
}

ConvertSummary convert_directory(const fs::path& input_dir, const fs::path& out_dir, const ConvertOptions& opts) {
  const auto files = list_mat_files(input_dir);
  if (files.empty()) throw Error(ErrorCode::kEmptySet, "no records found in " + input_dir.string());

  std::vector<TumorRecord> records;
  records.reserve(files.size());
  for (const auto& f : files) {
    try {
      records.push_back(load_mat_record(f));
    } catch (const Error& e) {
      throw Error(e.code(), f.filename().string() + ": " + e.what());
    }
  }

  const SplitCounts counts = opts.counts.value_or(proportional_counts(static_cast<std::int64_t>(records.size())));
  if (counts.total() != static_cast<std::int64_t>(records.size())) {
    throw Error(ErrorCode::kCountMismatch, "split counts sum to " + std::to_string(counts.total()) + " but " +
                                               std::to_string(records.size()) + " records were found");
  }

  const fs::path staging = out_dir / ".staging";
  std::error_code ec;
  fs::remove_all(staging, ec);
  try {
    fs::create_directories(staging);
    ConvertSummary summary;
    auto rows = export_dataset(records, staging, opts.export_options);
    summary.manifest = make_splits(std::move(rows), counts, opts.seed);
    write_manifest(staging, summary.manifest);
    for (const char* name : {"images", "masks", "manifest.csv", "split.json"}) {
      replace_path(staging / name, out_dir / name);
    }
    fs::remove_all(staging, ec);
    for (const auto& r : records) ++summary.class_counts[r.label - 1];
    return summary;
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(staging, ec);
    throw Error(ErrorCode::kIoFailure, e.what());
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
}

}  // namespace tumorseg
