#pragma once

#include "tumorseg/dataset.hpp"
#include "tumorseg/tensor.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tumorseg {

/// In-memory images in [0, 1] and binary masks, both (N, 1, H, W).
struct SampleSet {
  std::string split;
  std::vector<std::string> stems;
  TensorF images;
  TensorF masks;

  Index size() const { return images.shape().n; }
};

/// Loads one split of an exported dataset, resizing images bilinearly and
/// masks by nearest neighbour when the stored size differs from (h, w).
/// Throws EmptySplit, IoFailure or InvalidRecord.
SampleSet load_split(const std::filesystem::path& dataset_dir, const SplitManifest& manifest, std::string_view split,
                     Index h, Index w);
SampleSet load_split(const std::filesystem::path& dataset_dir, std::string_view split, Index h, Index w);

/// Images and masks of a dataset for explicit stems, at stored resolution.
SampleSet load_stems(const std::filesystem::path& dataset_dir, const std::vector<std::string>& stems, Index h, Index w);

/// Synthetic bright ellipses on a textured background, with exact masks.
SampleSet make_ellipse_samples(Index count, Index h, Index w, std::uint64_t seed);

}  // namespace tumorseg
