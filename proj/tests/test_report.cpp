#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace patchlens;

namespace {

// Direct per-window SSIM with an explicit 2-D Gaussian weight table.
double ssim_oracle(const RasterImage& a, const RasterImage& b) {
  double w[11][11], wsum = 0.0;
  for (int i = 0; i < 11; ++i) {
    for (int j = 0; j < 11; ++j) {
      w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2.0 * 1.5 * 1.5));
      wsum += w[i][j];
    }
  }
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    int count = 0;
    for (int y0 = 0; y0 + 11 <= a.height; ++y0) {
      for (int x0 = 0; x0 + 11 <= a.width; ++x0) {
        double mx = 0, my = 0;
        for (int i = 0; i < 11; ++i) {
          for (int j = 0; j < 11; ++j) {
            mx += w[i][j] / wsum * a.at(x0 + j, y0 + i, c) / 255.0;
            my += w[i][j] / wsum * b.at(x0 + j, y0 + i, c) / 255.0;
          }
        }
        double vx = 0, vy = 0, cov = 0;
        for (int i = 0; i < 11; ++i) {
          for (int j = 0; j < 11; ++j) {
            const double dx = a.at(x0 + j, y0 + i, c) / 255.0 - mx, dy = b.at(x0 + j, y0 + i, c) / 255.0 - my;
            vx += w[i][j] / wsum * dx * dx;
            vy += w[i][j] / wsum * dy * dy;
            cov += w[i][j] / wsum * dx * dy;
          }
        }
        sum += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
    total += sum / count;
  }
  return total / 3.0;
}

EvalReport tiny_report() {
  return {"demo", {{"seed", "7"}, {"note", "a\nb"}}, {"name", "value", "count"},
          {{std::string("x,y"), 0.5, std::int64_t(3)}, {std::string("plain"), std::nan(""), std::int64_t(-1)}}};
}

}  // namespace

TEST(Confusion, HandCountedAccumulation) {
  ConfusionMatrix cm(3, 2);
  PatchLabelGrid truth("t", 2, 3);
  truth.labels = {0, 0, 1, 1, 2, 2};
  const std::vector<std::int32_t> pred{0, 1, 1, 1, 0, 1};
  cm.accumulate(truth, pred);
  EXPECT_EQ(cm.total(), 4u);  // ignore id 2 drops two patches
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  // IoU(0) = 1 / (1 + 0 + 1), IoU(1) = 2 / (2 + 1 + 0); class 2 has no union.
  const auto r = miou(cm);
  EXPECT_DOUBLE_EQ(*r.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(*r.iou[1], 2.0 / 3.0);
  EXPECT_FALSE(r.iou[2]);
  EXPECT_DOUBLE_EQ(r.mean, (0.5 + 2.0 / 3.0) / 2.0);
  EXPECT_DOUBLE_EQ(pixel_accuracy(cm), 0.75);
}

TEST(Confusion, DiagonalIsPerfect) {
  ConfusionMatrix cm(4);
  for (int c = 0; c < 4; ++c) cm.add(c, c, std::uint64_t(c + 1));
  const auto r = miou(cm);
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_EQ(pixel_accuracy(cm), 1.0);
}

TEST(Confusion, MergeAndErrors) {
  ConfusionMatrix a(2), b(2);
  a.add(0, 1);
  b.add(1, 1, 5);
  a.merge(b);
  EXPECT_EQ(a.at(1, 1), 5u);
  EXPECT_EQ(a.total(), 6u);
  EXPECT_THROW(a.merge(ConfusionMatrix(3)), DimensionError);
  EXPECT_THROW(a.add(2, 0), DimensionError);
  EXPECT_THROW(a.add(0, -1), DimensionError);
  EXPECT_THROW(miou(ConfusionMatrix(2)), Error);
  EXPECT_THROW(pixel_accuracy(ConfusionMatrix(2)), Error);
  PatchLabelGrid g("g", 1, 2);
  EXPECT_THROW(a.accumulate(g, std::vector<std::int32_t>{0}), DimensionError);
}

TEST(ImageMetrics, PsnrExtremes) {
  const RasterImage zeros(16, 16, 0), ones(16, 16, 255);
  EXPECT_DOUBLE_EQ(psnr(zeros, ones), 0.0);
  EXPECT_DOUBLE_EQ(mse(zeros, ones), 1.0);
  EXPECT_EQ(psnr(zeros, zeros), kPsnrCap);
  EXPECT_THROW(psnr(zeros, RasterImage(16, 15)), DimensionError);
}

TEST(ImageMetrics, PsnrKnownOffset) {
  RasterImage a(8, 8, 100), b(8, 8, 100);
  b.at(0, 0, 0) = 151;  // one sample off by 51 = 255 / 5
  const double want = 10.0 * std::log10(1.0 / (0.04 / (8 * 8 * 3)));
  EXPECT_NEAR(psnr(a, b), want, 1e-12);
}

TEST(ImageMetrics, SsimMatchesWindowOracle) {
  const auto a = fixtures::random_image(23, 17, 1);
  const auto b = corrupt_image(a, CorruptionSpec::gaussian_noise(25, 4));
  EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-6);
  const auto c = corrupt_image(a, CorruptionSpec::box_blur(3));
  EXPECT_NEAR(ssim(a, c), ssim_oracle(a, c), 1e-6);
}

TEST(ImageMetrics, SsimProperties) {
  const auto a = fixtures::random_image(20, 20, 2);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  const auto b = corrupt_image(a, CorruptionSpec::gaussian_noise(30, 1));
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_LT(ssim(a, b), 1.0);
  EXPECT_THROW(ssim(RasterImage(10, 20), RasterImage(10, 20)), DimensionError);
}

TEST(Csv, SchemaAndFormatting) {
  const auto text = render_csv(tiny_report());
  EXPECT_EQ(text,
            "# experiment=demo\n"
            "# seed=7\n"
            "# note=a b\n"
            "name,value,count\n"
            "\"x,y\",0.5,3\n"
            "plain,nan,-1\n");
}

TEST(Csv, HeaderOnlyWhenNoRows) {
  EvalReport r{"empty", {}, {"a", "b"}, {}};
  EXPECT_EQ(render_csv(r), "# experiment=empty\na,b\n");
}

TEST(Csv, RowWidthMismatchRejected) {
  EvalReport r{"bad", {}, {"a", "b"}, {{std::int64_t(1)}}};
  EXPECT_THROW(render_csv(r), DimensionError);
}

TEST(Csv, NumberFormatting) {
  EXPECT_EQ(format_number(0.0), "0");
  EXPECT_EQ(format_number(1.0 / 3.0), "0.333333");
  EXPECT_EQ(format_number(1234567.0), "1.23457e+06");
  EXPECT_EQ(format_number(-std::numeric_limits<double>::infinity()), "-inf");
  EXPECT_EQ(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
}

TEST(Csv, EmitWritesRenderedText) {
  fixtures::TempDir dir("csv");
  emit_csv(tiny_report(), dir / "r.csv");
  EXPECT_EQ(fixtures::slurp(dir / "r.csv"), render_csv(tiny_report()));
}

TEST(Csv, MiouReportRows) {
  ConfusionMatrix cm(3);
  cm.add(0, 0);
  cm.add(1, 0);
  const auto rep = miou_report(cm, ClassTaxonomy::flat(3), "knn", {});
  const auto text = render_csv(rep);
  EXPECT_NE(text.find("class_id,class_name,iou\n"), std::string::npos);
  EXPECT_NE(text.find("0,class_0,0.5\n"), std::string::npos);
  EXPECT_NE(text.find("1,class_1,0\n"), std::string::npos);
  EXPECT_NE(text.find("2,class_2,\n"), std::string::npos);
  EXPECT_NE(text.find("pixel_accuracy,,0.5\n"), std::string::npos);
  EXPECT_TRUE(text.ends_with("mean,,0.25\n"));
}
