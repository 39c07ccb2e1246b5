#include "support/fixtures.hpp"
#include "tumorseg/checkpoint.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace tumorseg;
using namespace tumorseg::testing;
namespace fs = std::filesystem;

namespace {

ArchConfig small(Family f, Backbone b = Backbone::kNone) {
  ArchConfig c;
  c.family = f;
  c.backbone = b;
  c.depth = 3;
  c.base_width = 4;
  c.input_h = c.input_w = 32;
  c.seed = 3;
  return c;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kInvalidConfig;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << text;
}

}  // namespace

TEST(Checkpoint, RoundTripReproducesForwardExactly) {
  TempDir dir;
  std::mt19937_64 rng(1);
  const TensorF x = random_uniform<float>(Shape{2, 1, 32, 32}, rng, 0.0f, 1.0f);
  for (const auto& cfg : comparison_configs(4, 32, 5)) {
    auto m = build_model<float>(cfg);
    // A training-mode pass moves the batch-norm running statistics away from
    // their initial values so the buffers are exercised too.
    m.forward(Var<float>(x), Phase::kTrain);
    const TensorF before = m.predict(x);
    const fs::path path = dir / "model.ckpt";
    save_model(m, path);
    auto back = load_model<float>(path);
    EXPECT_EQ(back.config(), cfg);
    EXPECT_TRUE(back.predict(x).vec() == before.vec()) << display_name(cfg);
  }
}

TEST(Checkpoint, DoublePrecisionRoundTrip) {
  TempDir dir;
  auto m = build_model<double>(small(Family::kResUNetPP));
  save_model(m, dir / "m.ckpt");
  auto back = load_model<double>(dir / "m.ckpt");
  const TensorD x(Shape{1, 1, 32, 32}, 0.25);
  EXPECT_TRUE(back.predict(x).vec() == m.predict(x).vec());
  EXPECT_EQ(code_of([&] { load_model<float>(dir / "m.ckpt"); }), ErrorCode::kConfigMismatch);
}

TEST(Checkpoint, SidecarRecordsConfigAndProvenance) {
  TempDir dir;
  auto m = build_model<float>(small(Family::kR2UNet));
  CheckpointMeta meta;
  meta.arch = m.config();
  meta.epoch = 7;
  meta.val_miou = 0.8125;
  meta.provenance = {{"note", "unit test"}};
  save_model(m, dir / "r2.ckpt", meta);

  std::ifstream is(sidecar_path(dir / "r2.ckpt"));
  const auto j = nlohmann::json::parse(is);
  EXPECT_EQ(j.at("family"), "r2unet");
  EXPECT_EQ(j.at("t"), 2);
  EXPECT_EQ(j.at("backbone"), "none");
  EXPECT_EQ(j.at("depth"), 3);
  EXPECT_EQ(j.at("base_width"), 4);
  EXPECT_EQ(j.at("input_size"), nlohmann::json::array({32, 32}));
  EXPECT_EQ(j.at("seed"), 3);
  EXPECT_EQ(j.at("epoch"), 7);
  EXPECT_EQ(j.at("val_miou"), 0.8125);

  const CheckpointMeta back = read_checkpoint_meta(dir / "r2.ckpt");
  EXPECT_EQ(back.arch, m.config());
  EXPECT_EQ(back.epoch, 7);
  EXPECT_EQ(back.provenance.at("note"), "unit test");
}

TEST(Checkpoint, CorruptSidecarIsConfigMismatch) {
  TempDir dir;
  auto m = build_model<float>(small(Family::kUNet));
  save_model(m, dir / "u.ckpt");
  write_file(sidecar_path(dir / "u.ckpt"), "{\"family\": \"unet\", \"depth\": ");
  EXPECT_EQ(code_of([&] { load_model<float>(dir / "u.ckpt"); }), ErrorCode::kConfigMismatch);
  write_file(sidecar_path(dir / "u.ckpt"), "{\"family\": \"nonsense\"}");
  EXPECT_EQ(code_of([&] { load_model<float>(dir / "u.ckpt"); }), ErrorCode::kConfigMismatch);
}

TEST(Checkpoint, SidecarDisagreeingWithBlobIsConfigMismatch) {
  TempDir dir;
  auto m = build_model<float>(small(Family::kUNet));
  save_model(m, dir / "u.ckpt");
  std::ifstream is(sidecar_path(dir / "u.ckpt"));
  auto j = nlohmann::json::parse(is);
  is.close();
  j["base_width"] = 8;
  write_file(sidecar_path(dir / "u.ckpt"), j.dump());
  EXPECT_EQ(code_of([&] { load_model<float>(dir / "u.ckpt"); }), ErrorCode::kConfigMismatch);
}

TEST(Checkpoint, WrongFamilyIsConfigMismatch) {
  TempDir dir;
  auto m = build_model<float>(small(Family::kResUNet));
  save_model(m, dir / "r.ckpt");
  EXPECT_NO_THROW(load_model<float>(dir / "r.ckpt", Family::kResUNet));
  EXPECT_EQ(code_of([&] { load_model<float>(dir / "r.ckpt", Family::kR2UNet); }), ErrorCode::kConfigMismatch);
}

TEST(Checkpoint, TruncatedBlobIsConfigMismatch) {
  TempDir dir;
  auto m = build_model<float>(small(Family::kUNet));
  save_model(m, dir / "u.ckpt");
  fs::resize_file(dir / "u.ckpt", fs::file_size(dir / "u.ckpt") - 5);
  EXPECT_EQ(code_of([&] { load_model<float>(dir / "u.ckpt"); }), ErrorCode::kConfigMismatch);
}

TEST(Checkpoint, MissingFilesAreIoFailures) {
  TempDir dir;
  EXPECT_EQ(code_of([&] { load_model<float>(dir / "absent.ckpt"); }), ErrorCode::kIoFailure);
  auto m = build_model<float>(small(Family::kUNet));
  write_file(dir / "plain", "not a directory");
  EXPECT_EQ(code_of([&] { save_model(m, dir / "plain" / "x.ckpt"); }), ErrorCode::kIoFailure);
}
