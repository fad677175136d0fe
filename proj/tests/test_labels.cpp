#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace patchlens;
using fixtures::TempDir;

namespace {

// Tent-kernel interpolation over every patch center; an independent way to
// write clamped bilinear sampling.
std::vector<double> tent_sample(const EmbeddingShard& s, double gx, double gy) {
  const double u = std::clamp(gx - 0.5, 0.0, double(s.shape.cols - 1));
  const double v = std::clamp(gy - 0.5, 0.0, double(s.shape.rows - 1));
  std::vector<double> out(s.dim, 0.0);
  for (std::uint32_t r = 0; r < s.shape.rows; ++r) {
    for (std::uint32_t c = 0; c < s.shape.cols; ++c) {
      const double w = std::max(0.0, 1.0 - std::abs(u - c)) * std::max(0.0, 1.0 - std::abs(v - r));
      if (w == 0.0) continue;
      for (std::size_t i = 0; i < s.dim; ++i) out[i] += w * s.patch(r, c)[i];
    }
  }
  return out;
}

std::vector<double> roi_oracle(const EmbeddingShard& s, double x0, double y0, double x1, double y1, int pp) {
  std::vector<double> acc(s.dim, 0.0);
  for (double fy : {0.25, 0.75}) {
    for (double fx : {0.25, 0.75}) {
      const auto v = tent_sample(s, (x0 + fx * (x1 - x0)) / pp, (y0 + fy * (y1 - y0)) / pp);
      for (std::size_t i = 0; i < s.dim; ++i) acc[i] += v[i] / 4.0;
    }
  }
  return acc;
}

EmbeddingShard random_shard(GridShape g, std::uint32_t dim, std::uint64_t seed) {
  EmbeddingShard s("roi", g, dim);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  for (auto& v : s.grid) v = u(rng);
  return s;
}

}  // namespace

TEST(Rasterize, QuadrantMask) {
  LabelRaster mask(32, 32, 0);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) mask.at(x, y) = (y >= 16 ? 2 : 0) + (x >= 16 ? 1 : 0);
  }
  const auto g = rasterize_labels(mask, 16, "q");
  EXPECT_EQ(g.rows, 2u);
  EXPECT_EQ(g.cols, 2u);
  EXPECT_EQ(g.labels, (std::vector<std::int32_t>{0, 1, 2, 3}));
}

TEST(Rasterize, TieGoesToLowestId) {
  LabelRaster mask(16, 16, 7);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 16; ++x) mask.at(x, y) = 4;
  }
  EXPECT_EQ(rasterize_labels(mask, 16).labels.front(), 4);
}

TEST(Rasterize, ModeBeatsPosition) {
  LabelRaster mask(4, 4, 1);
  mask.at(0, 0) = 0;
  mask.at(1, 0) = 0;
  EXPECT_EQ(rasterize_labels(mask, 4).labels.front(), 1);
}

TEST(Rasterize, IndivisibleMaskRejected) {
  EXPECT_THROW(rasterize_labels(LabelRaster(30, 32), 16), DimensionError);
  EXPECT_THROW(rasterize_labels(LabelRaster(32, 32), 0), DimensionError);
}

TEST(BoxPresence, ThirdThreshold) {
  // 30x30 box straddling the tile's left edge.
  const Tile tile{100, 0, 224, 224};
  auto box_with_inside = [](double inside) {
    return BoxAnnotation::axis_aligned(100 - (30 - inside), 50, 100 + inside, 80, 1, "t");
  };
  EXPECT_FALSE(box_presence(box_with_inside(30.0 / 4), tile));
  EXPECT_TRUE(box_presence(box_with_inside(30.0 / 2), tile));
  EXPECT_TRUE(box_presence(box_with_inside(10.0), tile));
  EXPECT_FALSE(box_presence(box_with_inside(9.9), tile));
  EXPECT_TRUE(box_presence(box_with_inside(30.0), tile));
}

TEST(BoxPresence, RotatedBoxUsesPolygonArea) {
  // Diamond of area 200 centred on the tile's right edge: exactly half inside.
  BoxAnnotation d;
  d.image_id = "d";
  d.corners = {Point{224, 10}, Point{234, 20}, Point{224, 30}, Point{214, 20}};
  EXPECT_DOUBLE_EQ(d.area(), 200.0);
  EXPECT_TRUE(box_presence(d, Tile{0, 0, 224, 224}));
  d.corners = {Point{234, 10}, Point{244, 20}, Point{234, 30}, Point{224, 20}};
  EXPECT_FALSE(box_presence(d, Tile{0, 0, 224, 224}));
}

TEST(BoxPresence, DegenerateBoxRejected) {
  EXPECT_THROW(box_presence(BoxAnnotation::axis_aligned(5, 5, 5, 20, 1), Tile{}), DimensionError);
  BoxAnnotation bow;
  bow.corners = {Point{0, 0}, Point{10, 10}, Point{10, 0}, Point{0, 10}};
  EXPECT_THROW(validate_box(bow), DimensionError);
}

TEST(PatchObjectLabels, CentersInsideBox) {
  const auto tax = fixtures::retrieval_taxonomy();
  const std::vector<BoxAnnotation> boxes{BoxAnnotation::axis_aligned(0, 0, 33, 17, 3, "x")};
  const auto g = patch_object_labels(boxes, tax, {3, 3}, 16, "x");
  // Centers at 8, 24, 40: columns 0 and 1 of row 0 are inside.
  EXPECT_EQ(g.labels, (std::vector<std::int32_t>{3, 3, 0, 0, 0, 0, 0, 0, 0}));
}

TEST(PatchObjectLabels, SmallestBoxWinsRegardlessOfOrder) {
  const auto tax = fixtures::retrieval_taxonomy();
  std::vector<BoxAnnotation> boxes{BoxAnnotation::axis_aligned(0, 0, 48, 48, 1, "x"),
                                   BoxAnnotation::axis_aligned(16, 16, 32, 32, 4, "x")};
  const auto a = patch_object_labels(boxes, tax, {3, 3}, 16);
  std::swap(boxes[0], boxes[1]);
  const auto b = patch_object_labels(boxes, tax, {3, 3}, 16);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.at(1, 1), 4);
  EXPECT_EQ(a.at(0, 0), 1);
}

TEST(PatchObjectLabels, EmptyBoxesGiveBackground) {
  auto tax = ClassTaxonomy::flat(3, 2);
  const auto g = patch_object_labels({}, tax, {2, 2}, 16);
  EXPECT_EQ(g.labels, (std::vector<std::int32_t>(4, 2)));
}

TEST(RoiPool, MatchesTentOracle) {
  const auto s = random_shard({5, 7}, 6, 17);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> pos(-20.0, 130.0), len(1.0, 60.0);
  int checked = 0;
  while (checked < 200) {
    const double x0 = pos(rng), y0 = pos(rng) * 0.7, x1 = x0 + len(rng), y1 = y0 + len(rng);
    if (x1 <= 0 || y1 <= 0 || x0 >= 7 * 16 || y0 >= 5 * 16) continue;
    const auto got = roi_pool(s, BoxAnnotation::axis_aligned(x0, y0, x1, y1, 1), 16);
    const auto want = roi_oracle(s, x0, y0, x1, y1, 16);
    for (std::size_t i = 0; i < s.dim; ++i) ASSERT_NEAR(got[i], want[i], 1e-5) << x0 << "," << y0;
    ++checked;
  }
}

TEST(RoiPool, ConstantShardPoolsToConstant) {
  EmbeddingShard c("c", {4, 4}, 3);
  std::fill(c.grid.begin(), c.grid.end(), 2.5f);
  for (const auto& box : {BoxAnnotation::axis_aligned(16, 32, 32, 48, 1), BoxAnnotation::axis_aligned(-10, -10, 70, 5, 1)}) {
    for (float x : roi_pool(c, box, 16)) EXPECT_FLOAT_EQ(x, 2.5f);
  }
}

TEST(RoiPool, SamplesOnPatchCentersAverageThem) {
  // 64x64 box on a 4x4 grid: sample points land on grid coords 1 and 3,
  // halfway between patch centers.
  const auto s = random_shard({4, 4}, 3, 5);
  const auto w = roi_pool(s, BoxAnnotation::axis_aligned(0, 0, 64, 64, 1), 16);
  for (std::size_t i = 0; i < 3; ++i) {
    double want = 0.0;
    for (std::uint32_t r : {0u, 1u, 2u, 3u}) {
      for (std::uint32_t c : {0u, 1u, 2u, 3u}) want += s.patch(r, c)[i] / 16.0;
    }
    EXPECT_NEAR(w[i], want, 1e-6);
  }
}

TEST(RoiPool, LinearInFeatures) {
  const auto a = random_shard({4, 5}, 4, 1), b = random_shard({4, 5}, 4, 2);
  EmbeddingShard mix("m", a.shape, a.dim);
  for (std::size_t i = 0; i < mix.grid.size(); ++i) mix.grid[i] = 2.0f * a.grid[i] - 0.5f * b.grid[i];
  const auto box = BoxAnnotation::axis_aligned(7, 3, 51, 40, 1);
  const auto pa = roi_pool(a, box, 16), pb = roi_pool(b, box, 16), pm = roi_pool(mix, box, 16);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(pm[i], 2.0 * pa[i] - 0.5 * pb[i], 1e-5);
}

TEST(RoiPool, OutsideBoxRejected) {
  const auto s = random_shard({2, 2}, 2, 1);
  EXPECT_THROW(roi_pool(s, BoxAnnotation::axis_aligned(40, 0, 50, 10, 1), 16), DimensionError);
  EXPECT_THROW(roi_pool(s, BoxAnnotation::axis_aligned(5, 5, 5, 10, 1), 16), DimensionError);
}

TEST(Taxonomy, FlatAndFileRoundTrip) {
  TempDir dir("taxonomy");
  const auto t = fixtures::retrieval_taxonomy();
  write_taxonomy(t, dir / "t.json");
  const auto back = read_taxonomy(dir / "t.json");
  EXPECT_EQ(back.background_id, 0);
  ASSERT_EQ(back.classes.size(), 5u);
  EXPECT_EQ(back.at(2).name, "truck");
  EXPECT_EQ(back.supercategory(2), back.supercategory(1));
  EXPECT_NE(back.supercategory(3), back.supercategory(1));
  const auto flat = ClassTaxonomy::flat(4);
  EXPECT_EQ(flat.classes.size(), 4u);
}

TEST(Annotations, RoundTrip) {
  TempDir dir("ann");
  auto tf = fixtures::track_fixture(2);
  write_annotations(tf.boxes, dir / "a.jsonl");
  const auto back = read_annotations(dir / "a.jsonl");
  ASSERT_EQ(back.size(), tf.boxes.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].image_id, tf.boxes[i].image_id);
    EXPECT_EQ(back[i].instance_id, tf.boxes[i].instance_id);
    EXPECT_EQ(back[i].frame_index, tf.boxes[i].frame_index);
    EXPECT_EQ(back[i].video_id, tf.boxes[i].video_id);
    EXPECT_EQ(back[i].class_id, tf.boxes[i].class_id);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(back[i].corners[k].x, tf.boxes[i].corners[k].x);
      EXPECT_EQ(back[i].corners[k].y, tf.boxes[i].corners[k].y);
    }
  }
}
