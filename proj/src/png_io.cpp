#include "tumorseg/png_io.hpp"

#include "tumorseg/error.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <memory>

namespace tumorseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw Error(ErrorCode::kIoFailure, std::string("cannot open ") + path.string());
  return f;
}

void write_rows(const std::filesystem::path& path, int width, int height, int bit_depth, int color_type,
                const std::vector<png_bytep>& rows) {
  File f = open(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error(ErrorCode::kIoFailure, "libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::kIoFailure, "failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw Error(ErrorCode::kIoFailure, "failed writing " + path.string());
}

struct Decoded {
  int width = 0;
  int height = 0;
  int bit_depth = 8;
  int channels = 1;
  std::vector<std::uint8_t> bytes;
};

Decoded decode(const std::filesystem::path& path, bool want_rgb) {
  File f = open(path, "rb");
  png_byte header[8];
  if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw Error(ErrorCode::kIoFailure, path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error(ErrorCode::kIoFailure, "libpng initialization failed");
  }
  Decoded out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::kIoFailure, "failed reading " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (want_rgb) {
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  } else if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::kIoFailure, path.string() + " is not a grayscale PNG");
  }
  if (png_get_bit_depth(png, info) == 16 && !want_rgb) png_set_swap(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  out.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.bytes.resize(stride * static_cast<std::size_t>(out.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y) rows[static_cast<std::size_t>(y)] = out.bytes.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

void write_png(const std::filesystem::path& path, const GrayImage& image) {
  if (image.bit_depth != 8 && image.bit_depth != 16) {
    throw Error(ErrorCode::kInvalidConfig, "bit depth must be 8 or 16");
  }
  const std::size_t count = static_cast<std::size_t>(image.width) * image.height;
  if (image.pixels.size() != count) throw Error(ErrorCode::kShapeMismatch, "pixel buffer size mismatch");
  std::vector<std::uint8_t> packed8;
  std::vector<std::uint16_t> packed16;
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  if (image.bit_depth == 8) {
    packed8.resize(count);
    for (std::size_t i = 0; i < count; ++i) packed8[i] = static_cast<std::uint8_t>(std::min<int>(image.pixels[i], 255));
    for (int y = 0; y < image.height; ++y) rows[static_cast<std::size_t>(y)] = packed8.data() + y * image.width;
  } else {
    packed16 = image.pixels;
    for (int y = 0; y < image.height; ++y) {
      rows[static_cast<std::size_t>(y)] = reinterpret_cast<png_bytep>(packed16.data() + y * image.width);
    }
  }
  write_rows(path, image.width, image.height, image.bit_depth, PNG_COLOR_TYPE_GRAY, rows);
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw Error(ErrorCode::kShapeMismatch, "pixel buffer size mismatch");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<std::size_t>(y)] = const_cast<std::uint8_t*>(image.at(0, y));
  }
  write_rows(path, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

GrayImage read_png_gray(const std::filesystem::path& path) {
  Decoded d = decode(path, false);
  GrayImage img;
  img.width = d.width;
  img.height = d.height;
  img.bit_depth = d.bit_depth;
  const std::size_t count = static_cast<std::size_t>(d.width) * d.height;
  img.pixels.resize(count);
  if (d.bit_depth == 16) {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint16_t v;
      std::memcpy(&v, d.bytes.data() + 2 * i, 2);
      img.pixels[i] = v;
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) img.pixels[i] = d.bytes[i];
  }
  return img;
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
  Decoded d = decode(path, true);
  RgbImage img;
  img.width = d.width;
  img.height = d.height;
  img.pixels = std::move(d.bytes);
  return img;
}

}  // namespace tumorseg
