#include "tumorseg/dataset.hpp"

#include <hdf5.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace tumorseg {

namespace fs = std::filesystem;

namespace {

constexpr hsize_t kUserBlock = 512;

class Handle {
 public:
  using Closer = herr_t (*)(hid_t);
  Handle(hid_t id, Closer close) : id_(id), close_(close) {}
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() {
    if (id_ >= 0) close_(id_);
  }
  hid_t get() const { return id_; }
  explicit operator bool() const { return id_ >= 0; }

 private:
  hid_t id_;
  Closer close_;
};

class SilenceHdf5 {
 public:
  SilenceHdf5() {
    H5Eget_auto2(H5E_DEFAULT, &func_, &data_);
    H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
  }
  ~SilenceHdf5() { H5Eset_auto2(H5E_DEFAULT, func_, data_); }

 private:
  H5E_auto2_t func_ = nullptr;
  void* data_ = nullptr;
};

struct Dataset {
  std::vector<hsize_t> dims;
  H5T_class_t type_class = H5T_NO_CLASS;
};

Dataset describe(hid_t ds) {
  Dataset d;
  Handle space(H5Dget_space(ds), H5Sclose);
  const int rank = H5Sget_simple_extent_ndims(space.get());
  d.dims.resize(static_cast<std::size_t>(std::max(rank, 0)));
  if (rank > 0) H5Sget_simple_extent_dims(space.get(), d.dims.data(), nullptr);
  Handle type(H5Dget_type(ds), H5Tclose);
  d.type_class = H5Tget_class(type.get());
  return d;
}

hsize_t element_count(const Dataset& d) {
  hsize_t n = 1;
  for (hsize_t v : d.dims) n *= v;
  return n;
}

template <typename T>
std::vector<T> read_all(hid_t group, const std::string& name, hid_t mem_type, Dataset* info = nullptr) {
  if (H5Lexists(group, name.c_str(), H5P_DEFAULT) <= 0) throw Error(ErrorCode::kMissingField, name);
  Handle ds(H5Dopen2(group, name.c_str(), H5P_DEFAULT), H5Dclose);
  if (!ds) throw Error(ErrorCode::kMissingField, name + " is not a dataset");
  Dataset d = describe(ds.get());
  if (d.type_class != H5T_INTEGER && d.type_class != H5T_FLOAT) {
    throw Error(ErrorCode::kInvalidRecord, name + " has a non-numeric type");
  }
  std::vector<T> out(element_count(d));
  if (!out.empty() && H5Dread(ds.get(), mem_type, H5S_ALL, H5S_ALL, H5P_DEFAULT, out.data()) < 0) {
    throw Error(ErrorCode::kIoFailure, "cannot read " + name);
  }
  if (info) *info = d;
  return out;
}

// MATLAB stores matrices column-major, so an HDF5 dataset of dims (W, H)
// holds an H x W matrix.
void matrix_extent(const Dataset& d, const std::string& name, Eigen::Index& rows, Eigen::Index& cols) {
  if (d.dims.size() != 2) throw Error(ErrorCode::kInvalidRecord, name + " is not two-dimensional");
  rows = static_cast<Eigen::Index>(d.dims[1]);
  cols = static_cast<Eigen::Index>(d.dims[0]);
}

void reject_non_hdf5(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  char head[128] = {};
  is.read(head, sizeof head);
  const std::string text(head, static_cast<std::size_t>(is.gcount()));
  if (text.rfind("MATLAB 5.0 MAT-file", 0) == 0) {
    throw Error(ErrorCode::kUnsupportedContainer, path.string() + " is a legacy v5 MAT-file; re-save with -v7.3");
  }
  throw Error(ErrorCode::kUnsupportedContainer, path.string() + " is not an HDF5-backed MAT-file");
}

void write_matlab_header(const fs::path& path) {
  std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
  if (!f) throw Error(ErrorCode::kIoFailure, "cannot reopen " + path.string());
  std::string text = "MATLAB 7.3 MAT-file, Platform: GLNXA64, Created by: tumorseg HDF5 schema 1.00 .";
  text.resize(116, ' ');
  char header[128];
  std::memcpy(header, text.data(), 116);
  std::memset(header + 116, 0, 8);
  header[124] = 0x00;
  header[125] = 0x02;
  header[126] = 'I';
  header[127] = 'M';
  f.write(header, sizeof header);
  if (!f) throw Error(ErrorCode::kIoFailure, "cannot write header of " + path.string());
}

void set_class_attribute(hid_t obj, const char* matlab_class) {
  Handle type(H5Tcopy(H5T_C_S1), H5Tclose);
  H5Tset_size(type.get(), std::strlen(matlab_class));
  Handle space(H5Screate(H5S_SCALAR), H5Sclose);
  Handle attr(H5Acreate2(obj, "MATLAB_class", type.get(), space.get(), H5P_DEFAULT, H5P_DEFAULT), H5Aclose);
  H5Awrite(attr.get(), type.get(), matlab_class);
}

void write_dataset(hid_t group, const char* name, hid_t file_type, hid_t mem_type, std::vector<hsize_t> dims,
                   const void* data, const char* matlab_class) {
  Handle space(H5Screate_simple(static_cast<int>(dims.size()), dims.data(), nullptr), H5Sclose);
  Handle ds(H5Dcreate2(group, name, file_type, space.get(), H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT), H5Dclose);
  if (!ds || H5Dwrite(ds.get(), mem_type, H5S_ALL, H5S_ALL, H5P_DEFAULT, data) < 0) {
    throw Error(ErrorCode::kIoFailure, std::string("cannot write dataset ") + name);
  }
  set_class_attribute(ds.get(), matlab_class);
}

bool omitted(const MatWriteOptions& opts, std::string_view field) {
  return std::find(opts.omit.begin(), opts.omit.end(), field) != opts.omit.end();
}

}  // namespace

TumorRecord load_mat_record(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw Error(ErrorCode::kIoFailure, "no such file " + path.string());
  SilenceHdf5 quiet;
  if (H5Fis_hdf5(path.c_str()) <= 0) reject_non_hdf5(path);
  Handle file(H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
  if (!file) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  if (H5Lexists(file.get(), "cjdata", H5P_DEFAULT) <= 0) throw Error(ErrorCode::kMissingField, "cjdata");
  Handle group(H5Gopen2(file.get(), "cjdata", H5P_DEFAULT), H5Gclose);
  if (!group) throw Error(ErrorCode::kMissingField, "cjdata is not a group");

  for (const char* field : {"label", "PID", "image", "tumorBorder", "tumorMask"}) {
    if (H5Lexists(group.get(), field, H5P_DEFAULT) <= 0) throw Error(ErrorCode::kMissingField, field);
  }

  TumorRecord r;
  const auto label = read_all<double>(group.get(), "label", H5T_NATIVE_DOUBLE);
  if (label.size() != 1 || label[0] != std::floor(label[0])) {
    throw Error(ErrorCode::kInvalidRecord, "label must be a single integer");
  }
  r.label = static_cast<int>(label[0]);

  const auto pid = read_all<std::uint16_t>(group.get(), "PID", H5T_NATIVE_UINT16);
  for (std::uint16_t c : pid) {
    if (c != 0) r.pid.push_back(static_cast<char>(c));
  }

  Dataset image_info, mask_info;
  auto image = read_all<double>(group.get(), "image", H5T_NATIVE_DOUBLE, &image_info);
  auto mask = read_all<std::uint8_t>(group.get(), "tumorMask", H5T_NATIVE_UINT8, &mask_info);
  Eigen::Index h = 0, w = 0, mh = 0, mw = 0;
  matrix_extent(image_info, "image", h, w);
  matrix_extent(mask_info, "tumorMask", mh, mw);
  if (h != mh || w != mw) {
    throw Error(ErrorCode::kShapeMismatch, "image is " + std::to_string(h) + "x" + std::to_string(w) +
                                               " but tumorMask is " + std::to_string(mh) + "x" + std::to_string(mw));
  }
  r.image = Eigen::Map<Eigen::MatrixXd>(image.data(), h, w);
  r.mask = Eigen::Map<MaskMatrix>(mask.data(), h, w);
  r.border = read_all<double>(group.get(), "tumorBorder", H5T_NATIVE_DOUBLE);
  r.check();
  return r;
}

void write_mat_record(const fs::path& path, const TumorRecord& record, const MatWriteOptions& opts) {
  SilenceHdf5 quiet;
  {
    Handle fcpl(H5Pcreate(H5P_FILE_CREATE), H5Pclose);
    H5Pset_userblock(fcpl.get(), kUserBlock);
    Handle file(H5Fcreate(path.c_str(), H5F_ACC_TRUNC, fcpl.get(), H5P_DEFAULT), H5Fclose);
    if (!file) throw Error(ErrorCode::kIoFailure, "cannot create " + path.string());
    Handle group(H5Gcreate2(file.get(), "cjdata", H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT), H5Gclose);
    if (!group) throw Error(ErrorCode::kIoFailure, "cannot create group in " + path.string());
    set_class_attribute(group.get(), "struct");

    const auto h = static_cast<hsize_t>(record.image.rows());
    const auto w = static_cast<hsize_t>(record.image.cols());
    if (!omitted(opts, "label")) {
      const double label = record.label;
      write_dataset(group.get(), "label", H5T_IEEE_F64LE, H5T_NATIVE_DOUBLE, {1, 1}, &label, "double");
    }
    if (!omitted(opts, "PID")) {
      std::vector<std::uint16_t> chars(record.pid.begin(), record.pid.end());
      if (chars.empty()) chars.push_back(0);
      write_dataset(group.get(), "PID", H5T_STD_U16LE, H5T_NATIVE_UINT16, {chars.size(), 1}, chars.data(), "char");
    }
    if (!omitted(opts, "image")) {
      const Eigen::MatrixXd& img = record.image;
      const bool integral = img.size() > 0 && (img.array() == img.array().floor()).all() &&
                            img.minCoeff() >= -32768.0 && img.maxCoeff() <= 32767.0;
      if (integral) {
        const Eigen::Matrix<std::int16_t, Eigen::Dynamic, Eigen::Dynamic> v = img.cast<std::int16_t>();
        write_dataset(group.get(), "image", H5T_STD_I16LE, H5T_NATIVE_INT16, {w, h}, v.data(), "int16");
      } else {
        write_dataset(group.get(), "image", H5T_IEEE_F64LE, H5T_NATIVE_DOUBLE, {w, h}, img.data(), "double");
      }
    }
    if (!omitted(opts, "tumorBorder")) {
      std::vector<double> border = record.border;
      const hsize_t n = border.size();
      if (border.empty()) border.push_back(0);
      write_dataset(group.get(), "tumorBorder", H5T_IEEE_F64LE, H5T_NATIVE_DOUBLE, {n == 0 ? 1 : n, 1},
                    border.data(), "double");
    }
    if (!omitted(opts, "tumorMask")) {
      const auto mh = static_cast<hsize_t>(record.mask.rows());
      const auto mw = static_cast<hsize_t>(record.mask.cols());
      write_dataset(group.get(), "tumorMask", H5T_STD_U8LE, H5T_NATIVE_UINT8, {mw, mh}, record.mask.data(),
                    "logical");
    }
  }
  write_matlab_header(path);
}

}  // namespace tumorseg
