#ifndef PATCHLENS_PROBE_HPP
#define PATCHLENS_PROBE_HPP

// Few-shot probes over frozen embeddings: exact k-NN, a softmax linear
// probe, image-level k-NN, ridge regression and the per-layer sweep.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "patchlens/common.hpp"
#include "patchlens/embedset.hpp"
#include "patchlens/label_grid.hpp"
#include "patchlens/report.hpp"
#include "patchlens/spectra.hpp"

namespace patchlens {

enum class Metric { L2, Cosine };

inline Metric parse_metric(const std::string& s) {
  if (s == "l2") return Metric::L2;
  if (s == "cosine") return Metric::Cosine;
  throw Error("unknown metric '" + s + "' (expected l2 or cosine)");
}

inline const char* metric_name(Metric m) { return m == Metric::L2 ? "l2" : "cosine"; }

/// Scales each row to unit length; zero rows stay zero.
inline FeatureMatrix l2_normalize_rows(FeatureMatrix m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    double n2 = 0.0;
    for (float v : row) n2 += double(v) * v;
    if (n2 > 0.0) {
      const double inv = 1.0 / std::sqrt(n2);
      for (auto& v : row) v = float(v * inv);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Exact k-NN

struct Neighbor {
  float distance = 0.0f;
  std::uint32_t index = 0;
  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
  }
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// k nearest rows of `base` for each query under squared Euclidean distance,
/// sorted by (distance, index). Work is tiled over query and base blocks for
/// cache reuse; per-query results do not depend on `workers`.
inline std::vector<std::vector<Neighbor>> knn_search(const FeatureMatrix& base, const FeatureMatrix& queries,
                                                     std::size_t k, unsigned workers = 1) {
  if (base.empty()) throw Error("k-NN index is empty");
  if (k == 0) throw Error("k must be positive");
  if (!queries.empty() && queries.cols() != base.cols()) {
    throw DimensionError("query dimension " + std::to_string(queries.cols()) + " does not match index dimension " +
                         std::to_string(base.cols()));
  }
  k = std::min(k, base.rows());
  std::vector<std::vector<Neighbor>> result(queries.rows());
  constexpr std::size_t kQueryBlock = 16;
  constexpr std::size_t kBaseBlock = 256;
  parallel_for(queries.rows(), workers, [&](std::size_t q0, std::size_t q1) {
    for (std::size_t qb = q0; qb < q1; qb += kQueryBlock) {
      const std::size_t qe = std::min(q1, qb + kQueryBlock);
      for (std::size_t bb = 0; bb < base.rows(); bb += kBaseBlock) {
        const std::size_t be = std::min(base.rows(), bb + kBaseBlock);
        for (std::size_t q = qb; q < qe; ++q) {
          auto& best = result[q];
          const auto qv = queries.row(q);
          for (std::size_t b = bb; b < be; ++b) {
            const Neighbor cand{squared_l2(qv, base.row(b)), std::uint32_t(b)};
            if (best.size() < k) {
              best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
            } else if (cand < best.back()) {
              best.pop_back();
              best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
            }
          }
        }
      }
    }
  });
  return result;
}

/// Majority label among neighbors; ties go to the lowest class id.
inline std::int32_t vote(std::span<const Neighbor> neighbors, std::span<const std::int32_t> labels) {
  std::map<std::int32_t, std::size_t> counts;
  for (const auto& n : neighbors) ++counts[labels[n.index]];
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  return best->first;
}

class KnnIndex {
 public:
  KnnIndex(FeatureMatrix train, std::vector<std::int32_t> labels, std::size_t k = 1, Metric metric = Metric::L2)
      : train_(metric == Metric::Cosine ? l2_normalize_rows(std::move(train)) : std::move(train)),
        labels_(std::move(labels)),
        k_(k),
        metric_(metric) {
    if (train_.empty()) throw Error("k-NN index is empty");
    if (labels_.size() != train_.rows()) throw DimensionError("k-NN labels do not match training rows");
    if (k_ == 0) throw Error("k must be positive");
  }

  std::size_t size() const { return train_.rows(); }
  std::size_t dim() const { return train_.cols(); }
  std::size_t k() const { return k_; }
  Metric metric() const { return metric_; }
  const FeatureMatrix& vectors() const { return train_; }
  std::span<const std::int32_t> labels() const { return labels_; }

  /// Queries in the index's metric space (normalized for cosine).
  FeatureMatrix prepare(const FeatureMatrix& queries) const {
    return metric_ == Metric::Cosine ? l2_normalize_rows(queries) : queries;
  }

 private:
  FeatureMatrix train_;
  std::vector<std::int32_t> labels_;
  std::size_t k_;
  Metric metric_;
};

inline std::vector<std::int32_t> knn_classify(const KnnIndex& index, const FeatureMatrix& queries,
                                              unsigned workers = 1) {
  const auto prepared = index.prepare(queries);
  const auto neighbors = knn_search(index.vectors(), prepared, index.k(), workers);
  std::vector<std::int32_t> out(queries.rows());
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = vote(neighbors[q], index.labels());
  return out;
}

// ---------------------------------------------------------------------------
// Linear softmax probe

struct ProbeConfig {
  double learning_rate = 0.01;
  int epochs = 100;
  std::size_t batch_size = 1024;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool standardize = false;
};

struct LinearProbe {
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::vector<float> weights;  // classes x dim, row-major
  std::vector<float> bias;
  std::optional<Standardizer> standardizer;
  ProbeConfig config;
};

namespace detail {

inline void probe_logits(const LinearProbe& p, std::span<const float> x, std::span<double> out) {
  for (std::size_t c = 0; c < p.classes; ++c) {
    const float* w = p.weights.data() + c * p.dim;
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= p.dim; i += 8) {
      for (int l = 0; l < 8; ++l) acc[l] += w[i + l] * x[i + l];
    }
    float tail = 0.0f;
    for (; i < p.dim; ++i) tail += w[i] * x[i];
    out[c] = double(((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail) +
             p.bias[c];
  }
}

inline std::int32_t argmax(std::span<const double> v) {
  return std::int32_t(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace detail

/// Multinomial logistic regression by seeded mini-batch SGD with momentum on
/// mean cross-entropy, starting from zero weights. Batch gradients are summed
/// over fixed 64-sample blocks in block order, so training is bit-identical
/// for any worker count.
inline LinearProbe fit_linear_probe(const FeatureMatrix& train, std::span<const std::int32_t> labels,
                                    std::size_t num_classes, const ProbeConfig& config, unsigned workers = 1) {
  if (train.empty()) throw Error("linear probe needs training data");
  if (labels.size() != train.rows()) throw DimensionError("probe labels do not match training rows");
  if (num_classes == 0) throw Error("linear probe needs at least one class");
  for (auto y : labels) {
    if (y < 0 || std::size_t(y) >= num_classes) {
      throw DimensionError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  if (config.batch_size == 0 || config.epochs < 0) throw Error("invalid probe configuration");

  LinearProbe p;
  p.classes = num_classes;
  p.dim = train.cols();
  p.config = config;
  p.weights.assign(num_classes * p.dim, 0.0f);
  p.bias.assign(num_classes, 0.0f);

  FeatureMatrix x = train;
  if (config.standardize) {
    p.standardizer = fit_standardizer(train);
    x = apply_standardizer(std::move(x), *p.standardizer);
  }

  const std::size_t n = x.rows(), c_count = num_classes, d = p.dim;
  constexpr std::size_t kBlock = 64;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config.seed);
  std::vector<float> vel_w(p.weights.size(), 0.0f), vel_b(c_count, 0.0f);
  const std::size_t max_blocks = (std::min(config.batch_size, n) + kBlock - 1) / kBlock;
  std::vector<std::vector<float>> grad_w(max_blocks, std::vector<float>(c_count * d));
  std::vector<std::vector<double>> grad_b(max_blocks, std::vector<double>(c_count));
  std::vector<double> block_loss(max_blocks);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      const std::size_t blocks = (end - start + kBlock - 1) / kBlock;
      parallel_for(blocks, workers, [&](std::size_t b0, std::size_t b1) {
        std::vector<double> logits(c_count);
        for (std::size_t b = b0; b < b1; ++b) {
          auto& gw = grad_w[b];
          auto& gb = grad_b[b];
          std::fill(gw.begin(), gw.end(), 0.0f);
          std::fill(gb.begin(), gb.end(), 0.0);
          double loss = 0.0;
          const std::size_t s1 = std::min(end, start + (b + 1) * kBlock);
          for (std::size_t s = start + b * kBlock; s < s1; ++s) {
            const auto xi = x.row(order[s]);
            const auto yi = std::size_t(labels[order[s]]);
            detail::probe_logits(p, xi, logits);
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (auto& l : logits) {
              l = std::exp(l - mx);
              z += l;
            }
            loss += -std::log(logits[yi] / z);
            for (std::size_t c = 0; c < c_count; ++c) {
              const double g = logits[c] / z - (c == yi ? 1.0 : 0.0);
              gb[c] += g;
              const float gf = float(g);
              float* row = gw.data() + c * d;
              for (std::size_t i = 0; i < d; ++i) row[i] += gf * xi[i];
            }
          }
          block_loss[b] = loss;
        }
      });
      double loss = 0.0;
      for (std::size_t b = 1; b < blocks; ++b) {
        for (std::size_t i = 0; i < grad_w[0].size(); ++i) grad_w[0][i] += grad_w[b][i];
        for (std::size_t c = 0; c < c_count; ++c) grad_b[0][c] += grad_b[b][c];
      }
      for (std::size_t b = 0; b < blocks; ++b) loss += block_loss[b];
      if (!std::isfinite(loss)) {
        throw Error("linear probe loss became non-finite in epoch " + std::to_string(epoch + 1));
      }
      const float scale = float(1.0 / double(end - start));
      const float lr = float(config.learning_rate), mu = float(config.momentum);
      for (std::size_t i = 0; i < p.weights.size(); ++i) {
        vel_w[i] = mu * vel_w[i] + grad_w[0][i] * scale;
        p.weights[i] -= lr * vel_w[i];
      }
      for (std::size_t c = 0; c < c_count; ++c) {
        vel_b[c] = mu * vel_b[c] + float(grad_b[0][c]) * scale;
        p.bias[c] -= lr * vel_b[c];
      }
    }
  }
  return p;
}

/// Class scores for one (raw, unstandardized) vector.
inline std::vector<double> probe_scores(const LinearProbe& probe, std::span<const float> x) {
  if (x.size() != probe.dim) throw DimensionError("probe input dimension mismatch");
  std::vector<float> v(x.begin(), x.end());
  if (probe.standardizer) apply_standardizer_inplace(v, *probe.standardizer);
  std::vector<double> logits(probe.classes);
  detail::probe_logits(probe, v, logits);
  return logits;
}

inline std::vector<std::int32_t> probe_predict(const LinearProbe& probe, const FeatureMatrix& queries,
                                               unsigned workers = 1) {
  if (!queries.empty() && queries.cols() != probe.dim) throw DimensionError("probe input dimension mismatch");
  std::vector<std::int32_t> out(queries.rows());
  parallel_for(queries.rows(), workers, [&](std::size_t q0, std::size_t q1) {
    for (std::size_t q = q0; q < q1; ++q) out[q] = detail::argmax(probe_scores(probe, queries.row(q)));
  });
  return out;
}

/// Writes `<stem>.json` (shape, training config, standardizer) and
/// `<stem>.bin` (weights then bias, little-endian f32).
inline void save_probe(const LinearProbe& p, const std::filesystem::path& stem) {
  nlohmann::ordered_json j;
  j["format"] = "patchlens-probe";
  j["version"] = 1;
  j["classes"] = p.classes;
  j["dim"] = p.dim;
  j["config"] = {{"learning_rate", p.config.learning_rate}, {"epochs", p.config.epochs},
                 {"batch_size", p.config.batch_size},       {"momentum", p.config.momentum},
                 {"seed", p.config.seed},                   {"standardize", p.config.standardize}};
  if (p.standardizer) {
    j["standardizer"] = {{"mean", p.standardizer->mean},
                         {"std", p.standardizer->std},
                         {"epsilon", p.standardizer->epsilon}};
  }
  auto json_path = stem;
  json_path += ".json";
  std::ofstream js(json_path, std::ios::binary);
  if (!js) throw Error("cannot write " + json_path.string());
  js << j.dump(2) << '\n';

  std::vector<std::uint8_t> blob;
  detail::put_f32s(blob, p.weights);
  detail::put_f32s(blob, p.bias);
  auto bin_path = stem;
  bin_path += ".bin";
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw Error("cannot write " + bin_path.string());
  bin.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));
}

inline LinearProbe load_probe(const std::filesystem::path& stem) {
  auto json_path = stem;
  json_path += ".json";
  std::ifstream in(json_path, std::ios::binary);
  if (!in) throw Error("cannot open " + json_path.string());
  LinearProbe p;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.value("format", "") != "patchlens-probe" || j.value("version", 0) != 1) {
      throw FormatError(json_path.string() + ": not a patchlens probe");
    }
    p.classes = j.at("classes").get<std::size_t>();
    p.dim = j.at("dim").get<std::size_t>();
    const auto& c = j.at("config");
    p.config.learning_rate = c.at("learning_rate").get<double>();
    p.config.epochs = c.at("epochs").get<int>();
    p.config.batch_size = c.at("batch_size").get<std::size_t>();
    p.config.momentum = c.at("momentum").get<double>();
    p.config.seed = c.at("seed").get<std::uint64_t>();
    p.config.standardize = c.at("standardize").get<bool>();
    if (j.contains("standardizer")) {
      const auto& s = j.at("standardizer");
      p.standardizer = Standardizer{s.at("mean").get<std::vector<double>>(), s.at("std").get<std::vector<double>>(),
                                    s.at("epsilon").get<double>()};
      if (p.standardizer->mean.size() != p.dim || p.standardizer->std.size() != p.dim) {
        throw FormatError(json_path.string() + ": standardizer length mismatch");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  auto bin_path = stem;
  bin_path += ".bin";
  const auto bytes = read_file_bytes(bin_path);
  if (bytes.size() != (p.classes * p.dim + p.classes) * 4) {
    throw CorruptionError(bin_path.string() + ": weight blob has " + std::to_string(bytes.size()) + " bytes");
  }
  detail::ByteReader r(bytes, bin_path.string());
  p.weights.resize(p.classes * p.dim);
  p.bias.resize(p.classes);
  r.f32s(p.weights);
  r.f32s(p.bias);
  return p;
}

// ---------------------------------------------------------------------------
// Image-level k-NN

enum class ImageMode { ClsToken, MeanPatches };

inline ImageMode parse_image_mode(const std::string& s) {
  if (s == "cls") return ImageMode::ClsToken;
  if (s == "mean") return ImageMode::MeanPatches;
  throw Error("unknown image mode '" + s + "' (expected cls or mean)");
}

/// Image-level vector: the [CLS]-style token or the unweighted mean of all
/// patch vectors, optionally restricted to a mask.
inline std::vector<float> image_representation(const EmbeddingShard& shard, ImageMode mode,
                                               const FeatureMask* mask = nullptr) {
  std::vector<float> full;
  if (mode == ImageMode::ClsToken) {
    if (!shard.image_vector) throw Error("shard " + shard.image_id + " has no image-level vector");
    full = *shard.image_vector;
  } else {
    std::vector<double> sum(shard.dim, 0.0);
    const std::size_t n = shard.shape.patches();
    for (std::size_t p = 0; p < n; ++p) {
      const auto v = shard.patch(p);
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
    }
    full.resize(shard.dim);
    for (std::size_t i = 0; i < sum.size(); ++i) full[i] = float(sum[i] / double(n));
  }
  return mask ? apply_mask(full, *mask) : full;
}

struct LabeledImage {
  const EmbeddingShard* shard = nullptr;
  std::int32_t label = 0;
};

inline std::vector<std::int32_t> image_knn_classify(std::span<const LabeledImage> train,
                                                    std::span<const EmbeddingShard* const> queries, ImageMode mode,
                                                    const FeatureMask* mask = nullptr, std::size_t k = 1,
                                                    Metric metric = Metric::L2, unsigned workers = 1) {
  FeatureMatrix base;
  std::vector<std::int32_t> labels;
  for (const auto& t : train) {
    base.append(image_representation(*t.shard, mode, mask));
    labels.push_back(t.label);
  }
  FeatureMatrix q(0, base.cols());
  for (const auto* s : queries) q.append(image_representation(*s, mode, mask));
  KnnIndex index(std::move(base), std::move(labels), k, metric);
  return knn_classify(index, q, workers);
}

// ---------------------------------------------------------------------------
// Ridge regression

struct RidgeModel {
  Eigen::VectorXd weights;
  double bias = 0.0;
  double lambda = 0.0;

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const { return x.dot(weights) + bias; }
};

/// Solves (Xc'Xc + lambda I) w = Xc'yc on column-centered data; the bias
/// restores the means.
inline RidgeModel fit_ridge(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
  if (x.rows() < 2) throw DimensionError("ridge regression needs more than one sample");
  if (y.size() != x.rows()) throw DimensionError("ridge target length does not match rows");
  if (!(lambda >= 0.0)) throw Error("ridge lambda must be non-negative");
  const Eigen::RowVectorXd mean_x = x.colwise().mean();
  const double mean_y = y.mean();
  const Eigen::MatrixXd xc = x.rowwise() - mean_x;
  const Eigen::VectorXd yc = y.array() - mean_y;
  Eigen::MatrixXd gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda;
  if (lambda == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xc);
    if (qr.rank() < x.cols()) {
      throw Error("ridge system is singular with lambda = 0; use lambda > 0");
    }
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw Error("ridge system is not positive definite; use lambda > 0");
  }
  RidgeModel m;
  m.weights = ldlt.solve(xc.transpose() * yc);
  m.bias = mean_y - mean_x.dot(m.weights);
  m.lambda = lambda;
  if (!m.weights.allFinite()) throw Error("ridge solution is not finite");
  return m;
}

/// 1 - SS_res / SS_tot; defined as 0 when the target is constant.
inline double r_squared(const RidgeModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (y.size() != x.rows() || x.cols() != model.weights.size()) throw DimensionError("R^2 input shape mismatch");
  if (y.size() == 0) throw Error("R^2 of an empty evaluation set");
  const Eigen::VectorXd pred = (x * model.weights).array() + model.bias;
  const double ss_res = (y - pred).squaredNorm();
  const double ss_tot = (y.array() - y.mean()).matrix().squaredNorm();
  if (ss_tot == 0.0) return 0.0;
  return 1.0 - ss_res / ss_tot;
}

// ---------------------------------------------------------------------------
// Patch datasets and split evaluation

/// Patch vectors with their labels, gathered from shards. Patches labeled
/// `skip` (typically the ignore id) are left out.
struct PatchSet {
  FeatureMatrix vectors;
  std::vector<std::int32_t> labels;
};

inline const PatchLabelGrid& labels_for(const LabelIndex& labels, const EmbeddingShard& shard) {
  const auto it = labels.find(shard.image_id);
  if (it == labels.end()) throw Error("no patch labels for image " + shard.image_id);
  if (it->second.rows != shard.shape.rows || it->second.cols != shard.shape.cols) {
    throw DimensionError("label grid of " + shard.image_id + " does not match its shard grid");
  }
  return it->second;
}

inline PatchSet gather_patches(std::span<const EmbeddingShard> shards, const LabelIndex& labels,
                               std::optional<std::int32_t> skip = std::nullopt) {
  PatchSet set;
  if (!shards.empty()) set.vectors = FeatureMatrix(0, shards.front().dim);
  for (const auto& s : shards) {
    const auto& grid = labels_for(labels, s);
    for (std::size_t p = 0; p < s.shape.patches(); ++p) {
      if (skip && grid.labels[p] == *skip) continue;
      set.vectors.append(s.patch(p));
      set.labels.push_back(grid.labels[p]);
    }
  }
  return set;
}

inline FeatureMatrix all_patches(std::span<const EmbeddingShard> shards) {
  FeatureMatrix m(0, shards.empty() ? 0 : shards.front().dim);
  for (const auto& s : shards) {
    for (std::size_t p = 0; p < s.shape.patches(); ++p) m.append(s.patch(p));
  }
  return m;
}

enum class Evaluation { Knn, Linear };

inline Evaluation parse_evaluation(const std::string& s) {
  if (s == "knn") return Evaluation::Knn;
  if (s == "linear") return Evaluation::Linear;
  throw Error("unknown evaluation '" + s + "' (expected knn or linear)");
}

struct SegmentationConfig {
  Evaluation evaluation = Evaluation::Knn;
  std::size_t num_classes = 0;
  std::optional<std::int32_t> ignore_id;
  std::size_t remove_top = 0;  // m highest-variance features removed
  bool stats_include_val = true;
  std::size_t k = 1;
  Metric metric = Metric::L2;
  ProbeConfig probe;  // probe.standardize also applies to k-NN inputs
};

/// Few-shot patch classification: fit on train shards, score val patches.
inline ConfusionMatrix evaluate_segmentation(std::span<const EmbeddingShard> train,
                                             std::span<const EmbeddingShard> val, const LabelIndex& labels,
                                             const SegmentationConfig& cfg, unsigned workers = 1,
                                             LinearProbe* fitted = nullptr) {
  if (train.empty() || val.empty()) throw Error("segmentation evaluation needs train and val shards");
  auto train_set = gather_patches(train, labels, cfg.ignore_id);
  auto val_vectors = all_patches(val);

  if (cfg.remove_top > 0) {
    FeatureMatrix sample = all_patches(train);
    if (cfg.stats_include_val) {
      for (std::size_t r = 0; r < val_vectors.rows(); ++r) sample.append(val_vectors.row(r));
    }
    const auto mask = top_variance_mask(feature_stats(sample, workers), cfg.remove_top);
    train_set.vectors = apply_mask(train_set.vectors, mask);
    val_vectors = apply_mask(val_vectors, mask);
  }

  std::vector<std::int32_t> pred;
  if (cfg.evaluation == Evaluation::Knn) {
    if (cfg.probe.standardize) {
      const auto s = fit_standardizer(train_set.vectors);
      train_set.vectors = apply_standardizer(std::move(train_set.vectors), s);
      val_vectors = apply_standardizer(std::move(val_vectors), s);
    }
    KnnIndex index(std::move(train_set.vectors), std::move(train_set.labels), cfg.k, cfg.metric);
    pred = knn_classify(index, val_vectors, workers);
  } else {
    const auto probe = fit_linear_probe(train_set.vectors, train_set.labels, cfg.num_classes, cfg.probe, workers);
    pred = probe_predict(probe, val_vectors, workers);
    if (fitted) *fitted = probe;
  }

  ConfusionMatrix cm(cfg.num_classes, cfg.ignore_id);
  std::size_t offset = 0;
  for (const auto& s : val) {
    const auto n = s.shape.patches();
    cm.accumulate(labels_for(labels, s), std::span<const std::int32_t>(pred).subspan(offset, n));
    offset += n;
  }
  return cm;
}

struct LayerData {
  EmbedManifest manifest;
  std::vector<EmbeddingShard> train;
  std::vector<EmbeddingShard> val;
};

struct LayerRow {
  int layer = 0;
  MiouResult miou;
  double accuracy = 0.0;
};

/// Runs the same evaluation for every layer; all layers must share the patch
/// grid and dataset.
inline std::vector<LayerRow> layer_sweep(std::span<const LayerData> layers, const LabelIndex& labels,
                                         const SegmentationConfig& cfg, unsigned workers = 1) {
  std::vector<LayerRow> rows;
  for (const auto& l : layers) {
    const auto& first = layers.front().manifest;
    if (l.manifest.patch_grid != first.patch_grid || l.manifest.dataset_id != first.dataset_id) {
      throw DimensionError("layer " + std::to_string(l.manifest.layer) +
                           " does not share the grid and dataset of layer " + std::to_string(first.layer));
    }
    const auto cm = evaluate_segmentation(l.train, l.val, labels, cfg, workers);
    rows.push_back({l.manifest.layer, miou(cm), pixel_accuracy(cm)});
  }
  return rows;
}

}  // namespace patchlens

#endif
