#include "tumorseg/samples.hpp"

#include "tumorseg/autograd.hpp"
#include "tumorseg/png_io.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace tumorseg {

namespace fs = std::filesystem;

namespace {

TensorF to_tensor(const GrayImage& img, bool binary) {
  TensorF t(1, 1, img.height, img.width);
  const float scale = 1.0f / static_cast<float>(img.max_value());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    t.data()[i] = binary ? (img.pixels[i] > 0 ? 1.0f : 0.0f) : static_cast<float>(img.pixels[i]) * scale;
  }
  return t;
}

}  // namespace

SampleSet load_stems(const fs::path& dataset_dir, const std::vector<std::string>& stems, Index h, Index w) {
  SampleSet s;
  s.stems = stems;
  s.images.resize(Shape{static_cast<Index>(stems.size()), 1, h, w});
  s.masks.resize(s.images.shape());
  for (std::size_t i = 0; i < stems.size(); ++i) {
    TensorF image = to_tensor(read_png_gray(dataset_dir / "images" / (stems[i] + ".png")), false);
    TensorF mask = to_tensor(read_png_gray(dataset_dir / "masks" / (stems[i] + ".png")), true);
    if (!(image.shape() == mask.shape())) {
      throw Error(ErrorCode::kShapeMismatch, "image and mask of " + stems[i] + " differ in size");
    }
    if (image.shape().h != h || image.shape().w != w) {
      image = resize_bilinear(image, h, w);
      mask = resize_nearest(mask, h, w);
    }
    s.images.sample(static_cast<Index>(i)) = image.sample(0);
    s.masks.sample(static_cast<Index>(i)) = mask.sample(0);
  }
  return s;
}

SampleSet load_split(const fs::path& dataset_dir, const SplitManifest& manifest, std::string_view split, Index h,
                     Index w) {
  const auto stems = manifest.stems(split);
  if (stems.empty()) throw Error(ErrorCode::kEmptySplit, "split '" + std::string(split) + "' is empty");
  SampleSet s = load_stems(dataset_dir, stems, h, w);
  s.split = split;
  return s;
}

SampleSet load_split(const fs::path& dataset_dir, std::string_view split, Index h, Index w) {
  return load_split(dataset_dir, read_manifest(dataset_dir), split, h, w);
}

SampleSet make_ellipse_samples(Index count, Index h, Index w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SampleSet s;
  s.split = "synthetic";
  s.images.resize(Shape{count, 1, h, w});
  s.masks.resize(s.images.shape());
  for (Index n = 0; n < count; ++n) {
    const double cy = h * (0.3 + 0.4 * unit(rng));
    const double cx = w * (0.3 + 0.4 * unit(rng));
    const double ry = h * (0.1 + 0.12 * unit(rng));
    const double rx = w * (0.1 + 0.12 * unit(rng));
    const double theta = std::numbers::pi * unit(rng);
    const double c = std::cos(theta), sn = std::sin(theta);
    const double fx = 2 * std::numbers::pi * (1 + 3 * unit(rng)) / static_cast<double>(w);
    const double fy = 2 * std::numbers::pi * (1 + 3 * unit(rng)) / static_cast<double>(h);
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = (c * dx + sn * dy) / rx, v = (-sn * dx + c * dy) / ry;
        const bool inside = u * u + v * v <= 1.0;
        const double background = 0.25 + 0.1 * std::sin(fx * x) * std::cos(fy * y) + 0.05 * unit(rng);
        s.images(n, 0, y, x) = static_cast<float>(inside ? 0.8 + 0.1 * unit(rng) : background);
        s.masks(n, 0, y, x) = inside ? 1.0f : 0.0f;
      }
    }
    s.stems.push_back("ellipse" + std::to_string(n));
  }
  return s;
}

}  // namespace tumorseg
