#pragma once

#include "tumorseg/model_zoo.hpp"

#include <filesystem>
#include <optional>

namespace tumorseg {

/// Sidecar contents written next to a parameter blob as `<path>.json`.
struct CheckpointMeta {
  ArchConfig arch;
  int epoch = 0;
  double val_miou = 0.0;
  /// Free-form training provenance (resolved train config, timestamps, ...).
  nlohmann::json provenance = nlohmann::json::object();
};

std::filesystem::path sidecar_path(const std::filesystem::path& blob);

/// Writes the parameter blob and its JSON sidecar. Throws IoFailure.
template <typename Scalar>
void save_model(ModelHandle<Scalar>& model, const std::filesystem::path& path, const CheckpointMeta& meta);

template <typename Scalar>
void save_model(ModelHandle<Scalar>& model, const std::filesystem::path& path);

/// Reads and parses the sidecar. Throws IoFailure or ConfigMismatch.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Rebuilds the architecture from the sidecar and restores every parameter
/// and buffer bit-exactly. Throws IoFailure, or ConfigMismatch when the
/// sidecar is corrupt, disagrees with the blob, or names a different family
/// than `expected`.
template <typename Scalar>
ModelHandle<Scalar> load_model(const std::filesystem::path& path, std::optional<Family> expected = std::nullopt);

}  // namespace tumorseg
