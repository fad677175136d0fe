#ifndef PATCHLENS_CORRUPT_HPP
#define PATCHLENS_CORRUPT_HPP

// Deterministic photometric corruptions and geometric transforms of RGB
// images, plus the patch correspondence induced by each geometric transform.
//
// Continuous image coordinates put pixel (i, j) on [i, i+1) x [j, j+1); the
// rotation/scale center is (width/2, height/2). y grows downward, so a
// counterclockwise rotation is as seen on screen.

#include <fftw3.h>

#include <array>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchlens/common.hpp"
#include "patchlens/embedset.hpp"
#include "patchlens/image.hpp"
#include "patchlens/labels.hpp"

namespace patchlens {

enum class CorruptionKind { BoxBlur, GaussianNoise, BandNoise, Shift, Rotate, Scale };

inline const char* kind_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::BoxBlur: return "blur";
    case CorruptionKind::GaussianNoise: return "gaussian";
    case CorruptionKind::BandNoise: return "band";
    case CorruptionKind::Shift: return "shift";
    case CorruptionKind::Rotate: return "rotate";
    case CorruptionKind::Scale: return "scale";
  }
  return "?";
}

inline CorruptionKind parse_kind(const std::string& s) {
  if (s == "blur") return CorruptionKind::BoxBlur;
  if (s == "gaussian") return CorruptionKind::GaussianNoise;
  if (s == "band") return CorruptionKind::BandNoise;
  if (s == "shift") return CorruptionKind::Shift;
  if (s == "rotate") return CorruptionKind::Rotate;
  if (s == "scale") return CorruptionKind::Scale;
  throw Error("unknown corruption kind '" + s + "'");
}

/// `level` is the kernel size, noise sigma, shift in pixels, angle in degrees
/// or scale factor depending on `kind`. `band` is only used by BandNoise.
struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  double level = 0.0;
  int band = 0;
  std::uint64_t seed = 0;

  static CorruptionSpec box_blur(int k) { return {CorruptionKind::BoxBlur, double(k), 0, 0}; }
  static CorruptionSpec gaussian_noise(double sigma, std::uint64_t seed) {
    return {CorruptionKind::GaussianNoise, sigma, 0, seed};
  }
  static CorruptionSpec band_noise(double sigma, int band, std::uint64_t seed) {
    return {CorruptionKind::BandNoise, sigma, band, seed};
  }
  static CorruptionSpec shift(int d) { return {CorruptionKind::Shift, double(d), 0, 0}; }
  static CorruptionSpec rotate(double degrees) { return {CorruptionKind::Rotate, degrees, 0, 0}; }
  static CorruptionSpec scale(double factor) { return {CorruptionKind::Scale, factor, 0, 0}; }

  bool geometric() const {
    return kind == CorruptionKind::Shift || kind == CorruptionKind::Rotate ||
           kind == CorruptionKind::Scale;
  }

  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

inline void validate_spec(const CorruptionSpec& s) {
  switch (s.kind) {
    case CorruptionKind::BoxBlur:
      if (s.level < 1 || s.level != std::floor(s.level)) throw Error("blur kernel must be a positive integer");
      break;
    case CorruptionKind::GaussianNoise:
      if (!(s.level >= 0)) throw Error("noise sigma must be non-negative");
      break;
    case CorruptionKind::BandNoise:
      if (!(s.level >= 0)) throw Error("noise sigma must be non-negative");
      if (s.band < 0 || s.band > 3) throw Error("band index must be in 0..3");
      break;
    case CorruptionKind::Shift:
      if (s.level != std::floor(s.level)) throw Error("shift must be a whole number of pixels");
      break;
    case CorruptionKind::Rotate:
      if (!std::isfinite(s.level)) throw Error("rotation angle must be finite");
      break;
    case CorruptionKind::Scale:
      if (!(s.level > 0) || !std::isfinite(s.level)) throw Error("scale factor must be positive");
      break;
  }
}

/// True when the spec uses one of the experiment grid levels.
inline bool is_reference_level(const CorruptionSpec& s) {
  auto in = [&](std::initializer_list<double> values) {
    for (double v : values) {
      if (std::abs(s.level - v) < 1e-9) return true;
    }
    return false;
  };
  switch (s.kind) {
    case CorruptionKind::BoxBlur: return in({10, 20, 30, 40});
    case CorruptionKind::GaussianNoise: return in({10, 20, 30, 40});
    case CorruptionKind::BandNoise: return in({40}) && s.band >= 0 && s.band <= 3;
    case CorruptionKind::Shift: return in({1, 2, 3, 4});
    case CorruptionKind::Rotate: return in({5, 10, 15, 20});
    case CorruptionKind::Scale: return in({0.8, 0.9, 1.1, 1.2});
  }
  return false;
}

inline nlohmann::ordered_json spec_to_json(const CorruptionSpec& s) {
  nlohmann::ordered_json j;
  j["kind"] = kind_name(s.kind);
  j["level"] = s.level;
  if (s.kind == CorruptionKind::BandNoise) j["band"] = s.band;
  if (s.kind == CorruptionKind::GaussianNoise || s.kind == CorruptionKind::BandNoise) j["seed"] = s.seed;
  return j;
}

// ---------------------------------------------------------------------------
// Geometry

/// Maps a point of the original image to the transformed image.
inline Point forward_map(const CorruptionSpec& s, Point p, double width, double height) {
  const double cx = width / 2.0, cy = height / 2.0;
  switch (s.kind) {
    case CorruptionKind::Shift: return {p.x + s.level, p.y + s.level};
    case CorruptionKind::Rotate: {
      const double t = s.level * std::numbers::pi / 180.0;
      const double dx = p.x - cx, dy = p.y - cy;
      return {cx + dx * std::cos(t) + dy * std::sin(t), cy - dx * std::sin(t) + dy * std::cos(t)};
    }
    case CorruptionKind::Scale: return {cx + s.level * (p.x - cx), cy + s.level * (p.y - cy)};
    default: return p;
  }
}

/// Maps a point of the transformed image back to the original image.
inline Point inverse_map(const CorruptionSpec& s, Point q, double width, double height) {
  const double cx = width / 2.0, cy = height / 2.0;
  switch (s.kind) {
    case CorruptionKind::Shift: return {q.x - s.level, q.y - s.level};
    case CorruptionKind::Rotate: {
      const double t = s.level * std::numbers::pi / 180.0;
      const double dx = q.x - cx, dy = q.y - cy;
      return {cx + dx * std::cos(t) - dy * std::sin(t), cy + dx * std::sin(t) + dy * std::cos(t)};
    }
    case CorruptionKind::Scale: return {cx + (q.x - cx) / s.level, cy + (q.y - cy) / s.level};
    default: return q;
  }
}

/// Applies the forward transform to each corner of a box.
inline BoxAnnotation transform_box(const CorruptionSpec& s, BoxAnnotation box, double width,
                                   double height) {
  for (auto& p : box.corners) p = forward_map(s, p, width, height);
  return box;
}

struct PatchIndex {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  friend bool operator==(const PatchIndex&, const PatchIndex&) = default;
};

struct CorrespondenceMap {
  GridShape grid;
  std::vector<std::optional<PatchIndex>> targets;  // row-major over the transformed grid
  double upper_bound = 0.0;

  const std::optional<PatchIndex>& at(std::uint32_t r, std::uint32_t c) const {
    return targets[std::size_t(r) * grid.cols + c];
  }
  friend bool operator==(const CorrespondenceMap&, const CorrespondenceMap&) = default;
};

/// For each transformed patch, the original patch containing its
/// back-projected center. Photometric specs give the identity map.
inline CorrespondenceMap build_correspondence(const CorruptionSpec& spec, GridShape grid,
                                              int patch_pixels) {
  CorrespondenceMap map{grid, std::vector<std::optional<PatchIndex>>(grid.patches()), 0.0};
  const double width = double(grid.cols) * patch_pixels;
  const double height = double(grid.rows) * patch_pixels;
  std::size_t valid = 0;
  for (std::uint32_t r = 0; r < grid.rows; ++r) {
    for (std::uint32_t c = 0; c < grid.cols; ++c) {
      std::optional<PatchIndex> target;
      if (!spec.geometric()) {
        target = PatchIndex{r, c};
      } else {
        const Point center{(c + 0.5) * patch_pixels, (r + 0.5) * patch_pixels};
        const Point m = inverse_map(spec, center, width, height);
        if (m.x >= 0.0 && m.x < width && m.y >= 0.0 && m.y < height) {
          target = PatchIndex{std::uint32_t(m.y / patch_pixels), std::uint32_t(m.x / patch_pixels)};
        }
      }
      if (target) ++valid;
      map.targets[std::size_t(r) * grid.cols + c] = target;
    }
  }
  map.upper_bound = grid.patches() == 0 ? 0.0 : double(valid) / double(grid.patches());
  return map;
}

// ---------------------------------------------------------------------------
// Frequency bands

/// Band index of frequency bin (u, v) of an unshifted h x w spectrum. Bands
/// are four equal-width annuli of the center-shifted plane with outer radius
/// half the diagonal; the outermost radius belongs to band 3.
inline int frequency_band(int u, int v, int h, int w) {
  const double fu = u < h - h / 2 ? u : u - h;
  const double fv = v < w - w / 2 ? v : v - w;
  const double r = std::sqrt(fu * fu + fv * fv);
  const double r_max = 0.5 * std::sqrt(double(h) * h + double(w) * w);
  const int b = int(std::floor(4.0 * r / r_max));
  return std::clamp(b, 0, 3);
}

namespace detail {

inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

/// Keeps the spectrum bins of `band` and returns the real part of the inverse
/// transform.
inline std::vector<double> band_limit(const std::vector<double>& field, int h, int w, int band) {
  const std::size_t n = std::size_t(h) * w;
  auto* buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  fftw_plan fwd, inv;
  {
    std::lock_guard lock(fftw_plan_mutex());
    fwd = fftw_plan_dft_2d(h, w, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
    inv = fftw_plan_dft_2d(h, w, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < n; ++i) {
    buf[i][0] = field[i];
    buf[i][1] = 0.0;
  }
  fftw_execute(fwd);
  for (int u = 0; u < h; ++u) {
    for (int v = 0; v < w; ++v) {
      if (frequency_band(u, v, h, w) != band) {
        auto& z = buf[std::size_t(u) * w + v];
        z[0] = z[1] = 0.0;
      }
    }
  }
  fftw_execute(inv);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = buf[i][0] / double(n);
  {
    std::lock_guard lock(fftw_plan_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  fftw_free(buf);
  return out;
}

inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

inline double sample_clamped(const std::vector<double>& plane, int w, int h, int x, int y) {
  x = std::clamp(x, 0, w - 1);
  y = std::clamp(y, 0, h - 1);
  return plane[std::size_t(y) * w + x];
}

// Bilinear sample at continuous coordinates, edge-replicated outside.
inline double sample_bilinear(const std::vector<double>& plane, int w, int h, Point p) {
  const double u = p.x - 0.5, v = p.y - 0.5;
  const double fx0 = std::floor(u), fy0 = std::floor(v);
  const double fx = u - fx0, fy = v - fy0;
  const int x0 = int(std::clamp(fx0, -2.0, double(w) + 1.0));
  const int y0 = int(std::clamp(fy0, -2.0, double(h) + 1.0));
  return (1 - fx) * (1 - fy) * sample_clamped(plane, w, h, x0, y0) +
         fx * (1 - fy) * sample_clamped(plane, w, h, x0 + 1, y0) +
         (1 - fx) * fy * sample_clamped(plane, w, h, x0, y0 + 1) +
         fx * fy * sample_clamped(plane, w, h, x0 + 1, y0 + 1);
}

inline std::vector<double> gaussian_field(std::size_t n, double sigma, std::mt19937_64& rng) {
  std::vector<double> noise(n, 0.0);
  if (sigma > 0.0) {
    std::normal_distribution<double> dist(0.0, sigma);
    for (auto& x : noise) x = dist(rng);
  }
  return noise;
}

}  // namespace detail

/// Applies the corruption in real arithmetic without clamping or rounding.
inline ImagePlanes corrupt_planes(const ImagePlanes& src, const CorruptionSpec& spec) {
  validate_spec(spec);
  const int w = src.width, h = src.height;
  const std::size_t n = std::size_t(w) * h;
  ImagePlanes out = src;
  switch (spec.kind) {
    case CorruptionKind::BoxBlur: {
      const int k = int(spec.level);
      const int lo = -(k / 2);
      std::vector<double> tmp(n);
      for (std::size_t c = 0; c < src.planes.size(); ++c) {
        const auto& in = src.planes[c];
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int d = lo; d < lo + k; ++d) s += in[std::size_t(y) * w + detail::reflect101(x + d, w)];
            tmp[std::size_t(y) * w + x] = s / k;
          }
        }
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int d = lo; d < lo + k; ++d) s += tmp[std::size_t(detail::reflect101(y + d, h)) * w + x];
            out.planes[c][std::size_t(y) * w + x] = s / k;
          }
        }
      }
      break;
    }
    case CorruptionKind::GaussianNoise: {
      std::mt19937_64 rng(spec.seed);
      for (auto& plane : out.planes) {
        const auto noise = detail::gaussian_field(n, spec.level, rng);
        for (std::size_t i = 0; i < n; ++i) plane[i] += noise[i];
      }
      break;
    }
    case CorruptionKind::BandNoise: {
      std::mt19937_64 rng(spec.seed);
      for (auto& plane : out.planes) {
        const auto noise = detail::gaussian_field(n, spec.level, rng);
        const auto banded = detail::band_limit(noise, h, w, spec.band);
        for (std::size_t i = 0; i < n; ++i) plane[i] += banded[i];
      }
      break;
    }
    case CorruptionKind::Shift:
    case CorruptionKind::Rotate:
    case CorruptionKind::Scale: {
      for (std::size_t c = 0; c < src.planes.size(); ++c) {
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const Point m = inverse_map(spec, {x + 0.5, y + 0.5}, w, h);
            out.planes[c][std::size_t(y) * w + x] = detail::sample_bilinear(src.planes[c], w, h, m);
          }
        }
      }
      break;
    }
  }
  return out;
}

/// Applies the corruption; the result is clamped to [0, 255] and rounded once.
inline RasterImage corrupt_image(const RasterImage& img, const CorruptionSpec& spec) {
  return quantize(corrupt_planes(to_planes(img), spec));
}

}  // namespace patchlens

#endif
