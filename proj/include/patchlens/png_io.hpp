#ifndef PATCHLENS_PNG_IO_HPP
#define PATCHLENS_PNG_IO_HPP

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "patchlens/image.hpp"

namespace patchlens {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

/// Decoded PNG rows: 8-bit or 16-bit samples, `channels` per pixel.
struct DecodedPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<std::uint8_t> bytes;  // 16-bit samples stored big-endian, as in the file

  unsigned sample(std::size_t pixel, int channel) const {
    const std::size_t i = pixel * channels + channel;
    if (bit_depth == 16) return (unsigned(bytes[2 * i]) << 8) | bytes[2 * i + 1];
    return bytes[i];
  }
};

inline DecodedPng decode_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw Error("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("png_create_info_struct failed");
  }
  DecodedPng out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": PNG decode error");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_bit_depth(png, info) < 8) png_set_expand(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);
  out.width = int(png_get_image_width(png, info));
  out.height = int(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.bytes.resize(stride * std::size_t(out.height));
  rows.resize(std::size_t(out.height));
  for (int y = 0; y < out.height; ++y) rows[std::size_t(y)] = out.bytes.data() + stride * std::size_t(y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline void encode_png(const std::filesystem::path& path, int width, int height, int color_type,
                       int bit_depth, const std::uint8_t* data, std::size_t stride) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw Error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(path.string() + ": PNG encode error");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + stride * std::size_t(y)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads any 8-bit PNG as RGB. Gray is replicated; alpha is dropped.
inline RasterImage read_png(const std::filesystem::path& path) {
  const auto d = detail::decode_png(path);
  if (d.bit_depth != 8) throw FormatError(path.string() + ": only 8-bit images are supported");
  RasterImage img(d.width, d.height);
  const bool gray = d.channels <= 2;
  for (std::size_t p = 0; p < std::size_t(d.width) * d.height; ++p) {
    for (int c = 0; c < 3; ++c) {
      img.samples[p * 3 + c] = std::uint8_t(d.sample(p, gray ? 0 : c));
    }
  }
  return img;
}

inline void write_png(const RasterImage& img, const std::filesystem::path& path) {
  detail::encode_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 8, img.samples.data(),
                     std::size_t(img.width) * 3);
}

/// Reads an 8- or 16-bit single-channel PNG where pixel value = class id.
inline LabelRaster read_label_png(const std::filesystem::path& path) {
  const auto d = detail::decode_png(path);
  if (d.channels != 1) throw FormatError(path.string() + ": label masks must be single-channel");
  LabelRaster mask(d.width, d.height);
  for (std::size_t p = 0; p < mask.ids.size(); ++p) mask.ids[p] = std::int32_t(d.sample(p, 0));
  return mask;
}

inline void write_label_png(const LabelRaster& mask, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(mask.ids.size() * 2);
  for (std::size_t p = 0; p < mask.ids.size(); ++p) {
    if (mask.ids[p] < 0 || mask.ids[p] > 65535) throw DimensionError("class id out of 16-bit range");
    bytes[2 * p] = std::uint8_t(mask.ids[p] >> 8);
    bytes[2 * p + 1] = std::uint8_t(mask.ids[p] & 0xff);
  }
  detail::encode_png(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 16, bytes.data(),
                     std::size_t(mask.width) * 2);
}

}  // namespace patchlens

#endif
