#include "tumorseg/checkpoint.hpp"

#include "tumorseg/error.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace tumorseg {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'T', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

template <typename Scalar>
constexpr std::string_view scalar_name() {
  return sizeof(Scalar) == 4 ? "float32" : "float64";
}

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error(ErrorCode::kConfigMismatch, "truncated blob");
  return v;
}

template <typename Scalar>
class BlobWriter : public ParameterVisitor<Scalar> {
 public:
  explicit BlobWriter(std::ostream& os) : os_(os) {}
  void parameter(const std::string& name, Var<Scalar>& p) override { write(name, p.value()); }
  void buffer(const std::string& name, Tensor<Scalar>& b) override { write(name, b); }

 private:
  void write(const std::string& name, const Tensor<Scalar>& t) {
    write_u64(os_, name.size());
    os_.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& s = t.shape();
    for (Index d : {s.n, s.c, s.h, s.w}) write_u64(os_, static_cast<std::uint64_t>(d));
    os_.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  }
  std::ostream& os_;
};

template <typename Scalar>
class BlobReader : public ParameterVisitor<Scalar> {
 public:
  explicit BlobReader(std::istream& is) : is_(is) {}
  void parameter(const std::string& name, Var<Scalar>& p) override { read(name, p.mutable_value()); }
  void buffer(const std::string& name, Tensor<Scalar>& b) override { read(name, b); }

 private:
  void read(const std::string& expected, Tensor<Scalar>& t) {
    const std::uint64_t len = read_u64(is_);
    if (len > 4096) throw Error(ErrorCode::kConfigMismatch, "corrupt entry name in blob");
    std::string name(len, '\0');
    is_.read(name.data(), static_cast<std::streamsize>(len));
    if (name != expected) {
      throw Error(ErrorCode::kConfigMismatch, "blob entry '" + name + "' where '" + expected + "' was expected");
    }
    Shape s;
    s.n = static_cast<Index>(read_u64(is_));
    s.c = static_cast<Index>(read_u64(is_));
    s.h = static_cast<Index>(read_u64(is_));
    s.w = static_cast<Index>(read_u64(is_));
    if (!(s == t.shape())) {
      std::ostringstream msg;
      msg << "shape of '" << name << "' is " << s << " in the blob but " << t.shape() << " in the architecture";
      throw Error(ErrorCode::kConfigMismatch, msg.str());
    }
    if (!is_.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)))) {
      throw Error(ErrorCode::kConfigMismatch, "truncated blob at '" + name + "'");
    }
  }
  std::istream& is_;
};

}  // namespace

fs::path sidecar_path(const fs::path& blob) {
  fs::path p = blob;
  p += ".json";
  return p;
}

template <typename Scalar>
void save_model(ModelHandle<Scalar>& model, const fs::path& path, const CheckpointMeta& meta) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
    os.write(kMagic, sizeof kMagic);
    const std::string scalar(scalar_name<Scalar>());
    write_u64(os, scalar.size());
    os.write(scalar.data(), static_cast<std::streamsize>(scalar.size()));
    BlobWriter<Scalar> writer(os);
    model.visit(writer);
    if (!os.flush()) throw Error(ErrorCode::kIoFailure, "failed writing " + path.string());
  }
  nlohmann::json side = model.config();
  side["epoch"] = meta.epoch;
  side["val_miou"] = meta.val_miou;
  side["scalar"] = scalar_name<Scalar>();
  side["provenance"] = meta.provenance;
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  if (!js) throw Error(ErrorCode::kIoFailure, "cannot write " + sidecar_path(path).string());
  js << side.dump(2) << '\n';
  if (!js.flush()) throw Error(ErrorCode::kIoFailure, "failed writing " + sidecar_path(path).string());
}

template <typename Scalar>
void save_model(ModelHandle<Scalar>& model, const fs::path& path) {
  CheckpointMeta meta;
  meta.arch = model.config();
  save_model(model, path, meta);
}

CheckpointMeta read_checkpoint_meta(const fs::path& path) {
  const fs::path side = sidecar_path(path);
  std::ifstream is(side);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot read " + side.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigMismatch, "corrupt sidecar " + side.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::kConfigMismatch, "sidecar " + side.string() + " is not an object");
  CheckpointMeta meta;
  try {
    meta.arch = j.get<ArchConfig>();
    meta.arch.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfigMismatch, std::string("sidecar describes an invalid model: ") + e.what());
  }
  meta.epoch = j.value("epoch", 0);
  meta.val_miou = j.value("val_miou", 0.0);
  meta.provenance = j.value("provenance", nlohmann::json::object());
  return meta;
}

template <typename Scalar>
ModelHandle<Scalar> load_model(const fs::path& path, std::optional<Family> expected) {
  const CheckpointMeta meta = read_checkpoint_meta(path);
  if (expected && *expected != meta.arch.family) {
    throw Error(ErrorCode::kConfigMismatch, "checkpoint holds " + std::string(to_string(meta.arch.family)) +
                                                ", expected " + std::string(to_string(*expected)));
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorCode::kConfigMismatch, path.string() + " is not a checkpoint blob");
  }
  const std::uint64_t len = read_u64(is);
  std::string scalar(len < 16 ? len : 0, '\0');
  is.read(scalar.data(), static_cast<std::streamsize>(scalar.size()));
  if (scalar != scalar_name<Scalar>()) {
    throw Error(ErrorCode::kConfigMismatch,
                "blob stores " + scalar + " values, requested " + std::string(scalar_name<Scalar>()));
  }
  ModelHandle<Scalar> model = build_model<Scalar>(meta.arch);
  BlobReader<Scalar> reader(is);
  model.visit(reader);
  if (is.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::kConfigMismatch, "blob has trailing entries not in the architecture");
  }
  return model;
}

#define TUMORSEG_INSTANTIATE(S)                                                       \
  template void save_model(ModelHandle<S>&, const fs::path&, const CheckpointMeta&); \
  template void save_model(ModelHandle<S>&, const fs::path&);                        \
  template ModelHandle<S> load_model(const fs::path&, std::optional<Family>);

TUMORSEG_INSTANTIATE(float)
TUMORSEG_INSTANTIATE(double)

}  // namespace tumorseg
