#ifndef PATCHLENS_REPORT_HPP
#define PATCHLENS_REPORT_HPP

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "patchlens/common.hpp"
#include "patchlens/image.hpp"
#include "patchlens/label_grid.hpp"
#include "patchlens/labels.hpp"

namespace patchlens {

// ---------------------------------------------------------------------------
// Confusion matrix

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0, std::optional<std::int32_t> ignore_id = std::nullopt)
      : classes_(classes), counts_(classes * classes, 0), ignore_id_(ignore_id) {}

  std::size_t classes() const { return classes_; }
  std::optional<std::int32_t> ignore_id() const { return ignore_id_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * classes_ + pred]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  void add(std::int32_t truth, std::int32_t pred, std::uint64_t n = 1) {
    if (ignore_id_ && truth == *ignore_id_) return;
    if (truth < 0 || std::size_t(truth) >= classes_ || pred < 0 || std::size_t(pred) >= classes_) {
      throw DimensionError("class id out of range (truth " + std::to_string(truth) + ", prediction " +
                           std::to_string(pred) + ", classes " + std::to_string(classes_) + ")");
    }
    counts_[std::size_t(truth) * classes_ + std::size_t(pred)] += n;
  }

  void accumulate(const PatchLabelGrid& truth, std::span<const std::int32_t> pred) {
    if (pred.size() != truth.labels.size()) {
      throw DimensionError("prediction count " + std::to_string(pred.size()) + " does not match grid of " +
                           std::to_string(truth.labels.size()) + " patches for " + truth.image_id);
    }
    for (std::size_t i = 0; i < pred.size(); ++i) add(truth.labels[i], pred[i]);
  }

  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw DimensionError("confusion matrix size mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
  std::optional<std::int32_t> ignore_id_;
};

struct MiouResult {
  std::vector<std::optional<double>> iou;  // nullopt when the class has zero union
  double mean = 0.0;
};

/// Per-class IoU = TP / (TP + FP + FN); classes with zero union are left out
/// of the mean.
inline MiouResult miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw Error("mIoU of an empty confusion matrix");
  const std::size_t n = cm.classes();
  MiouResult r{std::vector<std::optional<double>>(n), 0.0};
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    r.iou[c] = double(tp) / double(uni);
    sum += *r.iou[c];
    ++counted;
  }
  r.mean = sum / double(counted);
  return r;
}

inline double pixel_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw Error("accuracy of an empty confusion matrix");
  std::uint64_t trace = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) trace += cm.at(c, c);
  return double(trace) / double(total);
}

// ---------------------------------------------------------------------------
// Image quality on samples normalized to [0, 1]

namespace detail {

inline void require_same_shape(const RasterImage& a, const RasterImage& b) {
  if (a.width != b.width || a.height != b.height) {
    throw DimensionError("image shapes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                         " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
  }
}

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const double mid = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[std::size_t(i)] = std::exp(-(i - mid) * (i - mid) / (2.0 * sigma * sigma));
    sum += k[std::size_t(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// 'valid' separable filtering: output is (w - size + 1) x (h - size + 1).
inline std::vector<double> filter_valid(const std::vector<double>& in, int w, int h,
                                        const std::vector<double>& k) {
  const int size = int(k.size());
  const int ow = w - size + 1, oh = h - size + 1;
  std::vector<double> tmp(std::size_t(ow) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < size; ++i) s += k[std::size_t(i)] * in[std::size_t(y) * w + x + i];
      tmp[std::size_t(y) * ow + x] = s;
    }
  }
  std::vector<double> out(std::size_t(ow) * oh);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < size; ++i) s += k[std::size_t(i)] * tmp[std::size_t(y + i) * ow + x];
      out[std::size_t(y) * ow + x] = s;
    }
  }
  return out;
}

}  // namespace detail

inline double mse(const RasterImage& a, const RasterImage& b) {
  detail::require_same_shape(a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const double d = (double(a.samples[i]) - double(b.samples[i])) / 255.0;
    sum += d * d;
  }
  return sum / double(a.samples.size());
}

inline constexpr double kPsnrCap = 99.0;

inline double psnr(const RasterImage& a, const RasterImage& b) {
  const double e = mse(a, b);
  if (e <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / e));
}

/// Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5),
/// C1 = 0.01^2, C2 = 0.03^2, averaged over channels.
inline double ssim(const RasterImage& a, const RasterImage& b) {
  detail::require_same_shape(a, b);
  constexpr int kWindow = 11;
  if (a.width < kWindow || a.height < kWindow) {
    throw DimensionError("SSIM needs images of at least 11x11 pixels");
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto kernel = detail::gaussian_kernel(kWindow, 1.5);
  const auto pa = to_planes(a), pb = to_planes(b);
  const std::size_t n = std::size_t(a.width) * a.height;
  double total = 0.0;
  for (int c = 0; c < RasterImage::kChannels; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = pa.planes[c][i] / 255.0;
      y[i] = pb.planes[c][i] / 255.0;
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, a.width, a.height, kernel);
    const auto my = detail::filter_valid(y, a.width, a.height, kernel);
    const auto sxx = detail::filter_valid(xx, a.width, a.height, kernel);
    const auto syy = detail::filter_valid(yy, a.width, a.height, kernel);
    const auto sxy = detail::filter_valid(xy, a.width, a.height, kernel);
    double sum = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      sum += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += sum / double(mx.size());
  }
  return total / RasterImage::kChannels;
}

// ---------------------------------------------------------------------------
// CSV reports

using Cell = std::variant<std::int64_t, double, std::string>;

struct EvalReport {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

/// Six significant digits; NaN renders as "nan".
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

inline std::string render_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "# experiment=" << report.kind << '\n';
  for (const auto& [key, value] : report.config) {
    std::string v = value;
    for (auto& ch : v) {
      if (ch == '\n' || ch == '\r') ch = ' ';
    }
    out << "# " << key << '=' << v << '\n';
  }
  for (std::size_t i = 0; i < report.columns.size(); ++i) {
    out << (i ? "," : "") << csv_escape(report.columns[i]);
  }
  out << '\n';
  for (const auto& row : report.rows) {
    if (row.size() != report.columns.size()) throw DimensionError("report row width mismatch");
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      std::visit(
          [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::string>) {
              out << csv_escape(v);
            } else if constexpr (std::is_same_v<T, double>) {
              out << format_number(v);
            } else {
              out << v;
            }
          },
          row[i]);
    }
    out << '\n';
  }
  return out.str();
}

inline void emit_csv(const EvalReport& report, const std::filesystem::path& path) {
  const auto text = render_csv(report);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write report " + path.string());
  out << text;
  out.flush();
  if (!out) throw Error("write failed for " + path.string());
}

/// Rows (class_id, class_name, iou) for every class, then pixel_accuracy and
/// mean rows. Classes with zero union have an empty iou cell.
inline EvalReport miou_report(const ConfusionMatrix& cm, const ClassTaxonomy& taxonomy, std::string kind,
                              std::vector<std::pair<std::string, std::string>> config) {
  const auto r = miou(cm);
  EvalReport rep{std::move(kind), std::move(config), {"class_id", "class_name", "iou"}, {}};
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const std::string name = taxonomy.contains(std::int32_t(c)) ? taxonomy.at(std::int32_t(c)).name
                                                                : "class_" + std::to_string(c);
    rep.rows.push_back({std::int64_t(c), name, r.iou[c] ? Cell(*r.iou[c]) : Cell(std::string{})});
  }
  rep.rows.push_back({std::string("pixel_accuracy"), std::string{}, pixel_accuracy(cm)});
  rep.rows.push_back({std::string("mean"), std::string{}, r.mean});
  return rep;
}

}  // namespace patchlens

#endif
