#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace tumorseg {

/// Row-major grayscale raster. Samples hold 8- or 16-bit values.
struct GrayImage {
  int width = 0;
  int height = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> pixels;

  std::uint16_t max_value() const { return bit_depth == 16 ? 65535 : 255; }
};

/// Row-major interleaved 8-bit RGB raster.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}
  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
};

/// Throws IoFailure.
void write_png(const std::filesystem::path& path, const GrayImage& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);

/// Reads a grayscale PNG at its stored bit depth (expanding 1/2/4-bit data to
/// 8). Color input is rejected. Throws IoFailure.
GrayImage read_png_gray(const std::filesystem::path& path);

/// Reads any 8-bit PNG as RGB. Throws IoFailure.
RgbImage read_png_rgb(const std::filesystem::path& path);

}  // namespace tumorseg
