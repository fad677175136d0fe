#ifndef PATCHLENS_SPECTRA_HPP
#define PATCHLENS_SPECTRA_HPP

// Per-feature statistics over patch embeddings, removal of the
// highest-variance features, and per-feature standardization.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchlens/common.hpp"

namespace patchlens {

struct FeatureStats {
  std::size_t dim = 0;
  std::vector<double> mean;
  std::vector<double> variance;  // population (divide by N)
  std::size_t sample_count = 0;
};

/// Mergeable running mean / sum of squared deviations (Chan et al. update).
class FeatureAccumulator {
 public:
  explicit FeatureAccumulator(std::size_t dim = 0) : mean_(dim, 0.0), m2_(dim, 0.0) {}

  std::size_t count() const { return count_; }

  void add(std::span<const float> v) {
    if (v.size() != mean_.size()) {
      throw DimensionError("feature vector of dimension " + std::to_string(v.size()) +
                           ", expected " + std::to_string(mean_.size()));
    }
    ++count_;
    const double inv = 1.0 / double(count_);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double delta = v[i] - mean_[i];
      mean_[i] += delta * inv;
      m2_[i] += delta * (v[i] - mean_[i]);
    }
  }

  void merge(const FeatureAccumulator& other) {
    if (other.mean_.size() != mean_.size()) throw DimensionError("accumulator dimension mismatch");
    if (other.count_ == 0) return;
    if (count_ == 0) {
      *this = other;
      return;
    }
    const double na = double(count_), nb = double(other.count_), n = na + nb;
    for (std::size_t i = 0; i < mean_.size(); ++i) {
      const double delta = other.mean_[i] - mean_[i];
      mean_[i] += delta * nb / n;
      m2_[i] += other.m2_[i] + delta * delta * na * nb / n;
    }
    count_ += other.count_;
  }

  FeatureStats finish() const {
    if (count_ < 2) throw DimensionError("feature statistics need at least 2 vectors");
    FeatureStats s{mean_.size(), mean_, m2_, count_};
    for (auto& v : s.variance) v = std::max(0.0, v / double(count_));
    return s;
  }

 private:
  std::size_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// Rows are accumulated in fixed blocks of 1024 merged in block order, so the
/// result does not depend on `workers`.
inline FeatureStats feature_stats(const FeatureMatrix& patches, unsigned workers = 1) {
  if (patches.rows() < 2) throw DimensionError("feature statistics need at least 2 vectors");
  constexpr std::size_t kBlock = 1024;
  const std::size_t blocks = (patches.rows() + kBlock - 1) / kBlock;
  std::vector<FeatureAccumulator> partial(blocks, FeatureAccumulator(patches.cols()));
  parallel_for(blocks, workers, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t end = std::min(patches.rows(), (b + 1) * kBlock);
      for (std::size_t r = b * kBlock; r < end; ++r) partial[b].add(patches.row(r));
    }
  });
  FeatureAccumulator total(patches.cols());
  for (const auto& p : partial) total.merge(p);
  return total.finish();
}

// ---------------------------------------------------------------------------

struct FeatureMask {
  std::size_t dim = 0;
  std::vector<std::size_t> retained;  // ascending
  std::size_t removed_m = 0;
  std::string provenance;

  std::vector<std::size_t> removed() const {
    std::vector<std::size_t> out;
    std::size_t j = 0;
    for (std::size_t i = 0; i < dim; ++i) {
      if (j < retained.size() && retained[j] == i) {
        ++j;
      } else {
        out.push_back(i);
      }
    }
    return out;
  }

  static FeatureMask full(std::size_t dim) {
    FeatureMask m{dim, std::vector<std::size_t>(dim), 0, {}};
    std::iota(m.retained.begin(), m.retained.end(), std::size_t{0});
    return m;
  }

  /// Mask retaining exactly `keep`, which is sorted and deduplicated.
  static FeatureMask keeping(std::size_t dim, std::vector<std::size_t> keep, std::string provenance = {}) {
    std::sort(keep.begin(), keep.end());
    keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
    if (!keep.empty() && keep.back() >= dim) throw DimensionError("retained index out of range");
    const std::size_t removed = dim - keep.size();
    return {dim, std::move(keep), removed, std::move(provenance)};
  }

  friend bool operator==(const FeatureMask&, const FeatureMask&) = default;
};

/// Indices ordered by decreasing variance; equal variances keep index order.
inline std::vector<std::size_t> variance_ranking(const FeatureStats& stats) {
  std::vector<std::size_t> order(stats.dim);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return stats.variance[a] > stats.variance[b];
  });
  return order;
}

/// Removes the m highest-variance features.
inline FeatureMask top_variance_mask(const FeatureStats& stats, std::size_t m,
                                     std::string provenance = {}) {
  if (m >= stats.dim) {
    throw DimensionError("cannot remove " + std::to_string(m) + " of " + std::to_string(stats.dim) +
                         " features");
  }
  const auto order = variance_ranking(stats);
  std::vector<std::size_t> keep(order.begin() + std::ptrdiff_t(m), order.end());
  return FeatureMask::keeping(stats.dim, std::move(keep), std::move(provenance));
}

inline std::vector<float> apply_mask(std::span<const float> v, const FeatureMask& mask) {
  if (v.size() != mask.dim) {
    throw DimensionError("vector of dimension " + std::to_string(v.size()) + " under mask of dimension " +
                         std::to_string(mask.dim));
  }
  std::vector<float> out(mask.retained.size());
  for (std::size_t j = 0; j < mask.retained.size(); ++j) out[j] = v[mask.retained[j]];
  return out;
}

inline FeatureMatrix apply_mask(const FeatureMatrix& vectors, const FeatureMask& mask) {
  if (vectors.cols() != mask.dim) {
    throw DimensionError("matrix of width " + std::to_string(vectors.cols()) + " under mask of dimension " +
                         std::to_string(mask.dim));
  }
  FeatureMatrix out(vectors.rows(), mask.retained.size());
  for (std::size_t r = 0; r < vectors.rows(); ++r) {
    const auto in = vectors.row(r);
    auto dst = out.row(r);
    for (std::size_t j = 0; j < mask.retained.size(); ++j) dst[j] = in[mask.retained[j]];
  }
  return out;
}

/// |removed(a) ∩ removed(b)|; both masks must share D and m.
inline std::size_t mask_overlap(const FeatureMask& a, const FeatureMask& b) {
  if (a.dim != b.dim || a.removed_m != b.removed_m) {
    throw DimensionError("mask overlap needs equal dimension and removal count");
  }
  const auto ra = a.removed(), rb = b.removed();
  std::vector<std::size_t> both;
  std::set_intersection(ra.begin(), ra.end(), rb.begin(), rb.end(), std::back_inserter(both));
  return both.size();
}

// ---------------------------------------------------------------------------

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> std;
  double epsilon = 1e-5;
};

inline Standardizer fit_standardizer(const FeatureMatrix& train, double epsilon = 1e-5) {
  const auto stats = feature_stats(train);
  Standardizer s{stats.mean, stats.variance, epsilon};
  for (auto& v : s.std) v = std::sqrt(v);
  return s;
}

inline void apply_standardizer_inplace(std::span<float> v, const Standardizer& s) {
  if (v.size() != s.mean.size()) {
    throw DimensionError("vector of dimension " + std::to_string(v.size()) + " for standardizer of dimension " +
                         std::to_string(s.mean.size()));
  }
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float((v[i] - s.mean[i]) / (s.std[i] + s.epsilon));
}

inline FeatureMatrix apply_standardizer(FeatureMatrix vectors, const Standardizer& s) {
  if (vectors.cols() != s.mean.size()) throw DimensionError("standardizer dimension mismatch");
  for (std::size_t r = 0; r < vectors.rows(); ++r) apply_standardizer_inplace(vectors.row(r), s);
  return vectors;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json stats_to_json(const FeatureStats& s, const std::string& provenance) {
  nlohmann::ordered_json j;
  j["dim"] = s.dim;
  j["sample_count"] = s.sample_count;
  j["provenance"] = provenance;
  j["mean"] = s.mean;
  j["variance"] = s.variance;
  return j;
}

inline FeatureStats stats_from_json(const nlohmann::json& j) {
  FeatureStats s;
  s.dim = j.at("dim").get<std::size_t>();
  s.sample_count = j.at("sample_count").get<std::size_t>();
  s.mean = j.at("mean").get<std::vector<double>>();
  s.variance = j.at("variance").get<std::vector<double>>();
  if (s.mean.size() != s.dim || s.variance.size() != s.dim) throw FormatError("stats length mismatch");
  return s;
}

inline nlohmann::ordered_json mask_to_json(const FeatureMask& m) {
  nlohmann::ordered_json j;
  j["dim"] = m.dim;
  j["removed_m"] = m.removed_m;
  j["provenance"] = m.provenance;
  j["removed"] = m.removed();
  j["retained"] = m.retained;
  return j;
}

inline FeatureMask mask_from_json(const nlohmann::json& j) {
  auto m = FeatureMask::keeping(j.at("dim").get<std::size_t>(),
                                j.at("retained").get<std::vector<std::size_t>>(),
                                j.value("provenance", std::string{}));
  if (m.removed_m != j.at("removed_m").get<std::size_t>()) throw FormatError("mask removed_m mismatch");
  return m;
}

inline FeatureMask read_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open mask " + path.string());
  try {
    return mask_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace patchlens

#endif
