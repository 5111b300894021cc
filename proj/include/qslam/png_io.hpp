#pragma once

#include <csetjmp>
#include <cstdio>
#include <string>
#include <vector>

#include <png.h>

#include "qslam/common.hpp"
#include "qslam/image.hpp"

namespace qslam {

using GrayImage16 = Image<uint16_t>;

namespace detail {

struct PngReader {
  std::FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;

  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

struct PngWriter {
  std::FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;

  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

}  // namespace detail

/// 8-bit RGB. Gray, palette and alpha inputs are converted on load.
inline ColorImage read_png_rgb8(const std::string& path) {
  detail::PngReader r;
  std::vector<unsigned char> rows;  // declared before setjmp on purpose

  r.fp = std::fopen(path.c_str(), "rb");
  require(r.fp != nullptr, ErrorKind::DataError, "cannot open " + path);
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(r.png != nullptr, ErrorKind::DataError, "png alloc failed");
  r.info = png_create_info_struct(r.png);
  require(r.info != nullptr, ErrorKind::DataError, "png alloc failed");
  if (setjmp(png_jmpbuf(r.png)))
    raise(ErrorKind::DataError, "failed to decode " + path);

  png_init_io(r.png, r.fp);
  png_read_info(r.png, r.info);
  png_uint_32 w = png_get_image_width(r.png, r.info);
  png_uint_32 h = png_get_image_height(r.png, r.info);
  int color = png_get_color_type(r.png, r.info);
  int depth = png_get_bit_depth(r.png, r.info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
    png_set_expand_gray_1_2_4_to_8(r.png);
  if (depth == 16) png_set_strip_16(r.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(r.png);
  png_read_update_info(r.png, r.info);

  rows.resize(static_cast<size_t>(w) * h * 3);
  std::vector<png_bytep> row_ptrs(h);
  for (png_uint_32 y = 0; y < h; ++y)
    row_ptrs[y] = rows.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(r.png, row_ptrs.data());
  png_read_end(r.png, nullptr);

  ColorImage img(static_cast<int>(w), static_cast<int>(h));
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x) {
      const unsigned char* p = rows.data() + (static_cast<size_t>(y) * w + x) * 3;
      img(static_cast<int>(x), static_cast<int>(y)) =
          Eigen::Vector3d(p[0], p[1], p[2]) / 255.0;
    }
  return img;
}

inline void write_png_rgb8(const std::string& path, const ColorImage& img) {
  require(!img.empty(), ErrorKind::InvalidInput, "empty image");
  detail::PngWriter wtr;
  std::vector<unsigned char> rows(static_cast<size_t>(img.width()) *
                                  img.height() * 3);

  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const Eigen::Vector3d& c = img(x, y);
      unsigned char* p =
          rows.data() + (static_cast<size_t>(y) * img.width() + x) * 3;
      for (int ch = 0; ch < 3; ++ch) {
        double v = std::min(std::max(c(ch), 0.0), 1.0);
        p[ch] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }

  wtr.fp = std::fopen(path.c_str(), "wb");
  require(wtr.fp != nullptr, ErrorKind::DataError, "cannot open " + path);
  wtr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(wtr.png != nullptr, ErrorKind::DataError, "png alloc failed");
  wtr.info = png_create_info_struct(wtr.png);
  require(wtr.info != nullptr, ErrorKind::DataError, "png alloc failed");
  if (setjmp(png_jmpbuf(wtr.png)))
    raise(ErrorKind::DataError, "failed to encode " + path);

  png_init_io(wtr.png, wtr.fp);
  png_set_IHDR(wtr.png, wtr.info, static_cast<png_uint_32>(img.width()),
               static_cast<png_uint_32>(img.height()), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wtr.png, wtr.info);
  for (int y = 0; y < img.height(); ++y)
    png_write_row(wtr.png,
                  rows.data() + static_cast<size_t>(y) * img.width() * 3);
  png_write_end(wtr.png, nullptr);
}

/// 16-bit single-channel, stored big-endian per the PNG spec. Used for
/// depth in millimeters and for segment ids.
inline GrayImage16 read_png_gray16(const std::string& path) {
  detail::PngReader r;
  std::vector<unsigned char> rows;

  r.fp = std::fopen(path.c_str(), "rb");
  require(r.fp != nullptr, ErrorKind::DataError, "cannot open " + path);
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(r.png != nullptr, ErrorKind::DataError, "png alloc failed");
  r.info = png_create_info_struct(r.png);
  require(r.info != nullptr, ErrorKind::DataError, "png alloc failed");
  if (setjmp(png_jmpbuf(r.png)))
    raise(ErrorKind::DataError, "failed to decode " + path);

  png_init_io(r.png, r.fp);
  png_read_info(r.png, r.info);
  png_uint_32 w = png_get_image_width(r.png, r.info);
  png_uint_32 h = png_get_image_height(r.png, r.info);
  require(png_get_color_type(r.png, r.info) == PNG_COLOR_TYPE_GRAY &&
              png_get_bit_depth(r.png, r.info) == 16,
          ErrorKind::DataError, path + " is not 16-bit grayscale");

  rows.resize(static_cast<size_t>(w) * h * 2);
  std::vector<png_bytep> row_ptrs(h);
  for (png_uint_32 y = 0; y < h; ++y)
    row_ptrs[y] = rows.data() + static_cast<size_t>(y) * w * 2;
  png_read_image(r.png, row_ptrs.data());
  png_read_end(r.png, nullptr);

  GrayImage16 img(static_cast<int>(w), static_cast<int>(h));
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x) {
      const unsigned char* p = rows.data() + (static_cast<size_t>(y) * w + x) * 2;
      img(static_cast<int>(x), static_cast<int>(y)) =
          static_cast<uint16_t>((p[0] << 8) | p[1]);
    }
  return img;
}

inline void write_png_gray16(const std::string& path, const GrayImage16& img) {
  require(!img.empty(), ErrorKind::InvalidInput, "empty image");
  detail::PngWriter wtr;
  std::vector<unsigned char> rows(static_cast<size_t>(img.width()) *
                                  img.height() * 2);

  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      uint16_t v = img(x, y);
      unsigned char* p =
          rows.data() + (static_cast<size_t>(y) * img.width() + x) * 2;
      p[0] = static_cast<unsigned char>(v >> 8);
      p[1] = static_cast<unsigned char>(v & 0xff);
    }

  wtr.fp = std::fopen(path.c_str(), "wb");
  require(wtr.fp != nullptr, ErrorKind::DataError, "cannot open " + path);
  wtr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(wtr.png != nullptr, ErrorKind::DataError, "png alloc failed");
  wtr.info = png_create_info_struct(wtr.png);
  require(wtr.info != nullptr, ErrorKind::DataError, "png alloc failed");
  if (setjmp(png_jmpbuf(wtr.png)))
    raise(ErrorKind::DataError, "failed to encode " + path);

  png_init_io(wtr.png, wtr.fp);
  png_set_IHDR(wtr.png, wtr.info, static_cast<png_uint_32>(img.width()),
               static_cast<png_uint_32>(img.height()), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wtr.png, wtr.info);
  for (int y = 0; y < img.height(); ++y)
    png_write_row(wtr.png,
                  rows.data() + static_cast<size_t>(y) * img.width() * 2);
  png_write_end(wtr.png, nullptr);
}

}  // namespace qslam
