#ifndef PATCHLENS_IMAGE_HPP
#define PATCHLENS_IMAGE_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "patchlens/common.hpp"

namespace patchlens {

/// 8-bit RGB image, interleaved, row-major.
struct RasterImage {
  static constexpr int kChannels = 3;

  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> samples;

  RasterImage() = default;
  RasterImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), samples(std::size_t(w) * h * kChannels, fill) {
    if (w <= 0 || h <= 0) throw DimensionError("image dimensions must be positive");
  }

  std::uint8_t at(int x, int y, int c) const {
    return samples[(std::size_t(y) * width + x) * kChannels + c];
  }
  std::uint8_t& at(int x, int y, int c) { return samples[(std::size_t(y) * width + x) * kChannels + c]; }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

/// Real-valued planar image used for intermediate computation. Values are
/// on the 0..255 scale and are not clamped.
struct ImagePlanes {
  int width = 0;
  int height = 0;
  std::vector<std::vector<double>> planes;  // [channel][y * width + x]

  double at(int c, int x, int y) const { return planes[c][std::size_t(y) * width + x]; }
  double& at(int c, int x, int y) { return planes[c][std::size_t(y) * width + x]; }
};

inline ImagePlanes to_planes(const RasterImage& img) {
  ImagePlanes p{img.width, img.height, {}};
  p.planes.assign(RasterImage::kChannels, std::vector<double>(std::size_t(img.width) * img.height));
  for (std::size_t i = 0; i < std::size_t(img.width) * img.height; ++i) {
    for (int c = 0; c < RasterImage::kChannels; ++c) {
      p.planes[c][i] = img.samples[i * RasterImage::kChannels + c];
    }
  }
  return p;
}

/// Clamps to [0, 255] and rounds half away from zero.
inline RasterImage quantize(const ImagePlanes& p) {
  RasterImage img(p.width, p.height);
  for (std::size_t i = 0; i < std::size_t(p.width) * p.height; ++i) {
    for (int c = 0; c < RasterImage::kChannels; ++c) {
      const double v = std::clamp(p.planes[c][i], 0.0, 255.0);
      img.samples[i * RasterImage::kChannels + c] = std::uint8_t(std::lround(v));
    }
  }
  return img;
}

/// Dense per-pixel class ids (e.g. a segmentation mask).
struct LabelRaster {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> ids;

  LabelRaster() = default;
  LabelRaster(int w, int h, std::int32_t fill = 0)
      : width(w), height(h), ids(std::size_t(w) * h, fill) {}

  std::int32_t at(int x, int y) const { return ids[std::size_t(y) * width + x]; }
  std::int32_t& at(int x, int y) { return ids[std::size_t(y) * width + x]; }
};

}  // namespace patchlens

#endif
