#ifndef PATCHLENS_LABELS_HPP
#define PATCHLENS_LABELS_HPP

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "patchlens/common.hpp"
#include "patchlens/embedset.hpp"
#include "patchlens/image.hpp"
#include "patchlens/label_grid.hpp"

namespace patchlens {

// ---------------------------------------------------------------------------
// Taxonomy

struct ClassInfo {
  std::int32_t id = 0;
  std::string name;
  std::int32_t supercategory_id = -1;  // -1 only for the background class
};

struct ClassTaxonomy {
  std::vector<ClassInfo> classes;
  std::vector<std::string> supercategories;
  std::int32_t background_id = 0;
  std::optional<std::int32_t> ignore_id;

  std::size_t size() const { return classes.size(); }
  bool contains(std::int32_t id) const { return id >= 0 && std::size_t(id) < classes.size(); }
  const ClassInfo& at(std::int32_t id) const {
    if (!contains(id)) throw DimensionError("class id " + std::to_string(id) + " not in taxonomy");
    return classes[std::size_t(id)];
  }
  std::int32_t supercategory(std::int32_t id) const { return at(id).supercategory_id; }

  void validate() const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i].id != std::int32_t(i)) {
        throw FormatError("taxonomy class ids must be unique and dense from 0");
      }
      if (classes[i].id != background_id && classes[i].supercategory_id < 0) {
        throw FormatError("class " + classes[i].name + " has no supercategory");
      }
    }
    if (!contains(background_id)) throw FormatError("background_id not in taxonomy");
  }

  /// Flat taxonomy with names class_<id>; every class is its own supercategory.
  static ClassTaxonomy flat(std::size_t n, std::int32_t background_id = 0) {
    ClassTaxonomy t;
    t.background_id = background_id;
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = std::int32_t(i);
      t.classes.push_back({id, "class_" + std::to_string(i), id == background_id ? -1 : id});
    }
    return t;
  }
};

inline ClassTaxonomy read_taxonomy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open taxonomy " + path.string());
  ClassTaxonomy t;
  try {
    const auto j = nlohmann::json::parse(in);
    t.background_id = j.value("background_id", 0);
    if (j.contains("ignore_id") && !j.at("ignore_id").is_null()) {
      t.ignore_id = j.at("ignore_id").get<std::int32_t>();
    }
    if (j.contains("supercategories")) {
      t.supercategories = j.at("supercategories").get<std::vector<std::string>>();
    }
    for (const auto& c : j.at("classes")) {
      t.classes.push_back({c.at("id").get<std::int32_t>(), c.at("name").get<std::string>(),
                           c.value("supercategory", std::int32_t(-1))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  std::sort(t.classes.begin(), t.classes.end(),
            [](const ClassInfo& a, const ClassInfo& b) { return a.id < b.id; });
  t.validate();
  return t;
}

inline void write_taxonomy(const ClassTaxonomy& t, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["background_id"] = t.background_id;
  if (t.ignore_id) j["ignore_id"] = *t.ignore_id;
  j["supercategories"] = t.supercategories;
  auto& classes = j["classes"] = nlohmann::ordered_json::array();
  for (const auto& c : t.classes) {
    classes.push_back({{"id", c.id}, {"name", c.name}, {"supercategory", c.supercategory_id}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write taxonomy " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Dense mask -> patch labels

/// Modal class per patch_pixels x patch_pixels block; ties go to the lowest id.
inline PatchLabelGrid rasterize_labels(const LabelRaster& mask, int patch_pixels,
                                       std::string image_id = {}) {
  if (patch_pixels <= 0 || mask.width % patch_pixels != 0 || mask.height % patch_pixels != 0) {
    throw DimensionError("mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                         " is not divisible by patch size " + std::to_string(patch_pixels));
  }
  const auto rows = std::uint32_t(mask.height / patch_pixels);
  const auto cols = std::uint32_t(mask.width / patch_pixels);
  PatchLabelGrid grid(std::move(image_id), rows, cols);
  std::map<std::int32_t, int> counts;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      counts.clear();
      for (int y = 0; y < patch_pixels; ++y) {
        for (int x = 0; x < patch_pixels; ++x) {
          ++counts[mask.at(int(c) * patch_pixels + x, int(r) * patch_pixels + y)];
        }
      }
      auto best = counts.begin();
      for (auto it = counts.begin(); it != counts.end(); ++it) {
        if (it->second > best->second) best = it;
      }
      grid.at(r, c) = best->first;
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Boxes and polygon geometry

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

using Polygon = std::vector<Point>;

inline double signed_area(std::span<const Point> poly) {
  double twice = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % poly.size()];
    twice += a.x * b.y - b.x * a.y;
  }
  return 0.5 * twice;
}

inline double polygon_area(std::span<const Point> poly) { return std::abs(signed_area(poly)); }

struct Rect {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double area() const { return (x1 - x0) * (y1 - y0); }
};

/// Sutherland-Hodgman clip of a polygon against an axis-aligned rectangle.
inline Polygon clip_to_rect(const Polygon& subject, const Rect& r) {
  Polygon out = subject;
  auto clip_edge = [&](auto inside, auto intersect) {
    if (out.empty()) return;
    Polygon in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Point& cur = in[i];
      const Point& prev = in[(i + in.size() - 1) % in.size()];
      const bool cur_in = inside(cur);
      const bool prev_in = inside(prev);
      if (cur_in) {
        if (!prev_in) out.push_back(intersect(prev, cur));
        out.push_back(cur);
      } else if (prev_in) {
        out.push_back(intersect(prev, cur));
      }
    }
  };
  auto at_x = [](double x) {
    return [x](const Point& a, const Point& b) {
      const double t = (x - a.x) / (b.x - a.x);
      return Point{x, a.y + t * (b.y - a.y)};
    };
  };
  auto at_y = [](double y) {
    return [y](const Point& a, const Point& b) {
      const double t = (y - a.y) / (b.y - a.y);
      return Point{a.x + t * (b.x - a.x), y};
    };
  };
  clip_edge([&](const Point& p) { return p.x >= r.x0; }, at_x(r.x0));
  clip_edge([&](const Point& p) { return p.x <= r.x1; }, at_x(r.x1));
  clip_edge([&](const Point& p) { return p.y >= r.y0; }, at_y(r.y0));
  clip_edge([&](const Point& p) { return p.y <= r.y1; }, at_y(r.y1));
  return out;
}

/// Inclusive point-in-convex-polygon test (points on an edge are inside).
inline bool contains_point(std::span<const Point> convex, Point p) {
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < convex.size(); ++i) {
    const auto& a = convex[i];
    const auto& b = convex[(i + 1) % convex.size()];
    const double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    if (cross > 1e-12) pos = true;
    if (cross < -1e-12) neg = true;
    if (pos && neg) return false;
  }
  return true;
}

/// Possibly rotated object box. video_id groups frames for tracking.
struct BoxAnnotation {
  std::string image_id;
  std::array<Point, 4> corners{};
  std::int32_t class_id = 0;
  std::optional<std::int32_t> instance_id;
  std::optional<std::int32_t> frame_index;
  std::string video_id;

  double area() const { return polygon_area(corners); }

  Rect bounds() const {
    Rect r{corners[0].x, corners[0].y, corners[0].x, corners[0].y};
    for (const auto& p : corners) {
      r.x0 = std::min(r.x0, p.x);
      r.y0 = std::min(r.y0, p.y);
      r.x1 = std::max(r.x1, p.x);
      r.y1 = std::max(r.y1, p.y);
    }
    return r;
  }

  static BoxAnnotation axis_aligned(double x0, double y0, double x1, double y1,
                                    std::int32_t class_id, std::string image_id = {}) {
    BoxAnnotation b;
    b.image_id = std::move(image_id);
    b.corners = {Point{x0, y0}, Point{x1, y0}, Point{x1, y1}, Point{x0, y1}};
    b.class_id = class_id;
    return b;
  }
};

/// Rejects zero-area and non-convex quadrilaterals.
inline void validate_box(const BoxAnnotation& box) {
  if (!(box.area() > 1e-12)) {
    throw DimensionError("degenerate box in image " + box.image_id);
  }
  int sign = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& a = box.corners[i];
    const auto& b = box.corners[(i + 1) % 4];
    const auto& c = box.corners[(i + 2) % 4];
    const double cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
    const int s = cross > 1e-12 ? 1 : (cross < -1e-12 ? -1 : 0);
    if (s != 0 && sign != 0 && s != sign) {
      throw DimensionError("box in image " + box.image_id + " is not a convex quadrilateral");
    }
    if (s != 0) sign = s;
  }
}

struct Tile {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double width = 224.0;
  double height = 224.0;
  Rect rect() const { return {origin_x, origin_y, origin_x + width, origin_y + height}; }
};

inline double intersection_area(const BoxAnnotation& box, const Rect& r) {
  const Polygon poly(box.corners.begin(), box.corners.end());
  const auto clipped = clip_to_rect(poly, r);
  return clipped.size() < 3 ? 0.0 : polygon_area(clipped);
}

/// True when at least a third of the box area lies inside the tile.
inline bool box_presence(const BoxAnnotation& box, const Tile& tile) {
  validate_box(box);
  const double inside = intersection_area(box, tile.rect());
  return 3.0 * inside >= box.area() * (1.0 - 1e-12);
}

/// Labels each patch whose center lies inside a box with that box's class.
/// Boxes are in the grid's pixel frame. Where boxes overlap, the smallest box
/// wins; equal areas fall back to (class_id, instance_id, corners) so the
/// result does not depend on the input order.
inline PatchLabelGrid patch_object_labels(std::span<const BoxAnnotation> boxes,
                                          const ClassTaxonomy& taxonomy, GridShape grid,
                                          int patch_pixels, std::string image_id = {}) {
  PatchLabelGrid out(std::move(image_id), grid.rows, grid.cols, taxonomy.background_id);
  auto key = [](const BoxAnnotation& b) {
    std::array<double, 8> c{};
    for (int i = 0; i < 4; ++i) {
      c[2 * i] = b.corners[std::size_t(i)].x;
      c[2 * i + 1] = b.corners[std::size_t(i)].y;
    }
    return std::make_tuple(b.area(), b.class_id, b.instance_id.value_or(-1), c);
  };
  std::vector<const BoxAnnotation*> order;
  for (const auto& b : boxes) order.push_back(&b);
  std::sort(order.begin(), order.end(), [&](auto* a, auto* b) { return key(*a) < key(*b); });

  for (std::uint32_t r = 0; r < grid.rows; ++r) {
    for (std::uint32_t c = 0; c < grid.cols; ++c) {
      const Point center{(c + 0.5) * patch_pixels, (r + 0.5) * patch_pixels};
      for (const auto* b : order) {
        if (contains_point(b->corners, center)) {
          out.at(r, c) = b->class_id;
          break;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// ROI pooling

namespace detail {

// Bilinear sample at continuous grid coordinates (gx, gy); patch (r, c) has
// its center at (c + 0.5, r + 0.5). Coordinates are clamped to the centers of
// the border patches.
inline void bilinear_accumulate(const EmbeddingShard& shard, double gx, double gy, double weight,
                                std::vector<double>& acc) {
  const double u = std::clamp(gx - 0.5, 0.0, double(shard.shape.cols - 1));
  const double v = std::clamp(gy - 0.5, 0.0, double(shard.shape.rows - 1));
  const auto c0 = std::uint32_t(std::floor(u));
  const auto r0 = std::uint32_t(std::floor(v));
  const auto c1 = std::min(c0 + 1, shard.shape.cols - 1);
  const auto r1 = std::min(r0 + 1, shard.shape.rows - 1);
  const double fx = u - c0;
  const double fy = v - r0;
  const double w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy), w10 = (1 - fx) * fy, w11 = fx * fy;
  const auto p00 = shard.patch(r0, c0), p01 = shard.patch(r0, c1);
  const auto p10 = shard.patch(r1, c0), p11 = shard.patch(r1, c1);
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc[i] += weight * (w00 * p00[i] + w01 * p01[i] + w10 * p10[i] + w11 * p11[i]);
  }
}

}  // namespace detail

/// Single-cell ROIAlign: the box's bounding rectangle, in patch units, is
/// sampled at its 2x2 interior grid points and the bilinear samples averaged.
inline std::vector<float> roi_pool(const EmbeddingShard& shard, const BoxAnnotation& box,
                                   int patch_pixels) {
  const Rect b = box.bounds();
  if (!(b.x1 > b.x0) || !(b.y1 > b.y0)) {
    throw DimensionError("degenerate box in image " + box.image_id);
  }
  const double width_px = double(shard.shape.cols) * patch_pixels;
  const double height_px = double(shard.shape.rows) * patch_pixels;
  if (b.x1 <= 0.0 || b.y1 <= 0.0 || b.x0 >= width_px || b.y0 >= height_px) {
    throw DimensionError("box lies entirely outside image " + shard.image_id);
  }
  const double x0 = b.x0 / patch_pixels, y0 = b.y0 / patch_pixels;
  const double w = (b.x1 - b.x0) / patch_pixels, h = (b.y1 - b.y0) / patch_pixels;
  std::vector<double> acc(shard.dim, 0.0);
  for (int iy = 0; iy < 2; ++iy) {
    for (int ix = 0; ix < 2; ++ix) {
      detail::bilinear_accumulate(shard, x0 + (ix + 0.5) * w / 2.0, y0 + (iy + 0.5) * h / 2.0, 0.25,
                                  acc);
    }
  }
  return {acc.begin(), acc.end()};
}

// ---------------------------------------------------------------------------
// Annotation file: one JSON object per line with image_id, frame_index,
// instance_id, class_id, corners [x1, y1, ..., x4, y4] and optional video_id.

inline std::vector<BoxAnnotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open annotations " + path.string());
  std::vector<BoxAnnotation> boxes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      BoxAnnotation b;
      b.image_id = j.at("image_id").get<std::string>();
      b.class_id = j.at("class_id").get<std::int32_t>();
      if (j.contains("instance_id") && !j["instance_id"].is_null()) {
        b.instance_id = j["instance_id"].get<std::int32_t>();
      }
      if (j.contains("frame_index") && !j["frame_index"].is_null()) {
        b.frame_index = j["frame_index"].get<std::int32_t>();
      }
      b.video_id = j.value("video_id", std::string{});
      const auto corners = j.at("corners").get<std::vector<double>>();
      if (corners.size() != 8) throw FormatError("corners must hold 8 numbers");
      for (std::size_t i = 0; i < 4; ++i) b.corners[i] = {corners[2 * i], corners[2 * i + 1]};
      boxes.push_back(std::move(b));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return boxes;
}

inline void write_annotations(std::span<const BoxAnnotation> boxes,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write annotations " + path.string());
  for (const auto& b : boxes) {
    nlohmann::ordered_json j;
    j["image_id"] = b.image_id;
    if (!b.video_id.empty()) j["video_id"] = b.video_id;
    j["frame_index"] = b.frame_index ? nlohmann::ordered_json(*b.frame_index) : nullptr;
    j["instance_id"] = b.instance_id ? nlohmann::ordered_json(*b.instance_id) : nullptr;
    j["class_id"] = b.class_id;
    std::vector<double> c;
    for (const auto& p : b.corners) {
      c.push_back(p.x);
      c.push_back(p.y);
    }
    j["corners"] = c;
    out << j.dump() << '\n';
  }
}

}  // namespace patchlens

#endif
