#ifndef PATCHLENS_RETRIEVAL_HPP
#define PATCHLENS_RETRIEVAL_HPP

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "patchlens/common.hpp"
#include "patchlens/corrupt.hpp"
#include "patchlens/embedset.hpp"
#include "patchlens/labels.hpp"

namespace patchlens {

enum class RetrievalBucket {
  SamePatch,
  SameFineGrained,
  SameSupercategory,
  WrongOrBackground,
  // exclusion mode only
  WrongSupercategory,
  Background,
};

inline const char* bucket_name(RetrievalBucket b) {
  switch (b) {
    case RetrievalBucket::SamePatch: return "same_patch";
    case RetrievalBucket::SameFineGrained: return "same_fine_grained";
    case RetrievalBucket::SameSupercategory: return "same_supercategory";
    case RetrievalBucket::WrongOrBackground: return "wrong_or_background";
    case RetrievalBucket::WrongSupercategory: return "wrong_supercategory";
    case RetrievalBucket::Background: return "background";
  }
  return "?";
}

enum class Exclusion { None, SameImage };

/// Buckets reported in each mode, in column order.
inline std::vector<RetrievalBucket> buckets_for(Exclusion e) {
  if (e == Exclusion::None) {
    return {RetrievalBucket::SamePatch, RetrievalBucket::SameFineGrained, RetrievalBucket::SameSupercategory,
            RetrievalBucket::WrongOrBackground};
  }
  return {RetrievalBucket::SameFineGrained, RetrievalBucket::SameSupercategory, RetrievalBucket::WrongSupercategory,
          RetrievalBucket::Background};
}

struct PatchEntry {
  std::string image_id;
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  std::int32_t class_id = 0;
  std::int32_t supercategory_id = -1;
};

struct PatchDatabase {
  std::vector<PatchEntry> entries;
  FeatureMatrix vectors;
  std::int32_t background_id = 0;
  Exclusion exclusion = Exclusion::None;

  void add(PatchEntry e, std::span<const float> v) {
    vectors.append(v);
    entries.push_back(std::move(e));
  }
};

/// Every patch of every original shard, labeled by its grid.
inline PatchDatabase build_patch_database(std::span<const EmbeddingShard> shards, const LabelIndex& labels,
                                          const ClassTaxonomy& taxonomy, Exclusion exclusion = Exclusion::None) {
  PatchDatabase db;
  db.background_id = taxonomy.background_id;
  db.exclusion = exclusion;
  for (const auto& s : shards) {
    const auto it = labels.find(s.image_id);
    if (it == labels.end()) throw Error("no patch labels for image " + s.image_id);
    const auto& grid = it->second;
    if (grid.rows != s.shape.rows || grid.cols != s.shape.cols) {
      throw DimensionError("label grid of " + s.image_id + " does not match its shard grid");
    }
    for (std::uint32_t r = 0; r < grid.rows; ++r) {
      for (std::uint32_t c = 0; c < grid.cols; ++c) {
        const auto cls = grid.at(r, c);
        const auto super = cls == taxonomy.background_id ? -1 : taxonomy.supercategory(cls);
        db.add({s.image_id, r, c, cls, super}, s.patch(r, c));
      }
    }
  }
  return db;
}

/// One annotated patch of a (possibly transformed) image. `target` is the
/// corresponding original patch, if any.
struct RetrievalQuery {
  std::string image_id;  // the original image this query was derived from
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  std::vector<float> vector;
  std::int32_t class_id = 0;
  std::int32_t supercategory_id = -1;
  std::optional<PatchIndex> target;
};

struct RetrievalHit {
  RetrievalBucket bucket = RetrievalBucket::WrongOrBackground;
  std::size_t entry = 0;
};

inline RetrievalHit nearest_patch(const PatchDatabase& db, const RetrievalQuery& query) {
  if (query.class_id == db.background_id) {
    throw Error("retrieval query " + query.image_id + " (" + std::to_string(query.row) + "," +
                std::to_string(query.col) + ") is not annotated");
  }
  if (!db.vectors.empty() && query.vector.size() != db.vectors.cols()) {
    throw DimensionError("query dimension does not match database");
  }
  const bool exclude = db.exclusion == Exclusion::SameImage;
  std::size_t best = std::numeric_limits<std::size_t>::max();
  float best_d = std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < db.entries.size(); ++i) {
    if (exclude && db.entries[i].image_id == query.image_id) continue;
    const float d = squared_l2(query.vector, db.vectors.row(i));
    if (best == std::numeric_limits<std::size_t>::max() || d < best_d) {
      best = i;
      best_d = d;
    }
  }
  if (best == std::numeric_limits<std::size_t>::max()) {
    throw Error("no retrieval candidates for query from " + query.image_id);
  }
  const auto& e = db.entries[best];
  RetrievalHit hit{RetrievalBucket::WrongOrBackground, best};
  if (!exclude) {
    if (query.target && e.image_id == query.image_id && e.row == query.target->row && e.col == query.target->col) {
      hit.bucket = RetrievalBucket::SamePatch;
    } else if (e.class_id == query.class_id) {
      hit.bucket = RetrievalBucket::SameFineGrained;
    } else if (e.class_id != db.background_id && e.supercategory_id == query.supercategory_id) {
      hit.bucket = RetrievalBucket::SameSupercategory;
    }
  } else {
    if (e.class_id == db.background_id) {
      hit.bucket = RetrievalBucket::Background;
    } else if (e.class_id == query.class_id) {
      hit.bucket = RetrievalBucket::SameFineGrained;
    } else if (e.supercategory_id == query.supercategory_id) {
      hit.bucket = RetrievalBucket::SameSupercategory;
    } else {
      hit.bucket = RetrievalBucket::WrongSupercategory;
    }
  }
  return hit;
}

struct RetrievalLevel {
  std::string name;  // e.g. "rotate"
  double level = 0.0;
  bool geometric = false;
  std::vector<RetrievalQuery> queries;
};

struct LevelOutcome {
  std::string name;
  double level = 0.0;
  std::vector<std::pair<RetrievalBucket, std::size_t>> counts;
  std::size_t queries = 0;
  double upper_bound = 1.0;  // fraction of queries with a valid correspondence

  double fraction(RetrievalBucket b) const {
    for (const auto& [bucket, n] : counts) {
      if (bucket == b) return queries == 0 ? 0.0 : double(n) / double(queries);
    }
    return 0.0;
  }
};

inline std::vector<LevelOutcome> retrieval_curve(const PatchDatabase& db, std::span<const RetrievalLevel> levels,
                                                 unsigned workers = 1) {
  const auto buckets = buckets_for(db.exclusion);
  std::vector<LevelOutcome> out;
  for (const auto& level : levels) {
    std::vector<RetrievalBucket> hits(level.queries.size());
    parallel_for(level.queries.size(), workers, [&](std::size_t q0, std::size_t q1) {
      for (std::size_t q = q0; q < q1; ++q) hits[q] = nearest_patch(db, level.queries[q]).bucket;
    });
    LevelOutcome o{level.name, level.level, {}, level.queries.size(), 1.0};
    for (auto b : buckets) o.counts.emplace_back(b, std::size_t(std::count(hits.begin(), hits.end(), b)));
    if (level.geometric && !level.queries.empty()) {
      std::size_t valid = 0;
      for (const auto& q : level.queries) valid += q.target.has_value();
      o.upper_bound = double(valid) / double(level.queries.size());
    }
    out.push_back(std::move(o));
  }
  return out;
}

/// Annotated queries of one transformed image: boxes of the original image
/// are carried through the forward transform and rasterized on the
/// transformed grid; targets come from the correspondence map.
inline std::vector<RetrievalQuery> make_queries(const EmbeddingShard& transformed, std::span<const BoxAnnotation> boxes,
                                                const ClassTaxonomy& taxonomy, const CorruptionSpec& spec,
                                                int patch_pixels) {
  const double w = double(transformed.shape.cols) * patch_pixels;
  const double h = double(transformed.shape.rows) * patch_pixels;
  std::vector<BoxAnnotation> moved;
  for (const auto& b : boxes) moved.push_back(spec.geometric() ? transform_box(spec, b, w, h) : b);
  const auto grid = patch_object_labels(moved, taxonomy, transformed.shape, patch_pixels, transformed.image_id);
  const auto map = build_correspondence(spec, transformed.shape, patch_pixels);
  std::vector<RetrievalQuery> out;
  for (std::uint32_t r = 0; r < grid.rows; ++r) {
    for (std::uint32_t c = 0; c < grid.cols; ++c) {
      const auto cls = grid.at(r, c);
      if (cls == taxonomy.background_id) continue;
      const auto v = transformed.patch(r, c);
      out.push_back({transformed.image_id, r, c, {v.begin(), v.end()}, cls, taxonomy.supercategory(cls), map.at(r, c)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tracking association

struct TrackInstance {
  std::string video_id;
  std::int32_t frame_index = 0;
  std::int32_t instance_id = 0;
  std::int32_t class_id = 0;
  std::vector<float> pooled;
};

struct AssociationResult {
  int delta = 0;
  std::size_t queries = 0;     // instances at frames t with a populated frame t + delta
  std::size_t persisting = 0;  // queries whose instance is present at t + delta
  std::size_t instance_hits = 0;
  std::size_t category_hits = 0;

  double instance_accuracy() const {
    return persisting ? double(instance_hits) / double(persisting) : std::numeric_limits<double>::quiet_NaN();
  }
  double category_accuracy() const {
    return queries ? double(category_hits) / double(queries) : std::numeric_limits<double>::quiet_NaN();
  }
};

/// For each instance at frame t, retrieves the nearest pooled embedding in
/// frame t + delta of the same video (distance ties go to the lowest
/// instance id).
inline AssociationResult track_associate(std::span<const TrackInstance> instances, int delta) {
  if (delta <= 0) throw Error("frame gap must be positive");
  using FrameKey = std::pair<std::string, std::int32_t>;
  std::map<FrameKey, std::vector<const TrackInstance*>> frames;
  std::set<std::tuple<std::string, std::int32_t, std::int32_t>> seen;
  for (const auto& inst : instances) {
    if (!seen.emplace(inst.video_id, inst.frame_index, inst.instance_id).second) {
      throw Error("duplicate track instance " + inst.video_id + "/" + std::to_string(inst.frame_index) + "/" +
                  std::to_string(inst.instance_id));
    }
    frames[{inst.video_id, inst.frame_index}].push_back(&inst);
  }
  for (auto& [key, list] : frames) {
    std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->instance_id < b->instance_id; });
  }
  AssociationResult r;
  r.delta = delta;
  for (const auto& [key, list] : frames) {
    const auto next = frames.find({key.first, key.second + delta});
    if (next == frames.end() || next->second.empty()) continue;
    const auto& pool = next->second;
    for (const auto* q : list) {
      const TrackInstance* best = nullptr;
      float best_d = 0.0f;
      bool persists = false;
      for (const auto* c : pool) {
        if (c->pooled.size() != q->pooled.size()) throw DimensionError("pooled embedding dimensions differ");
        const float d = squared_l2(q->pooled, c->pooled);
        if (!best || d < best_d) {
          best = c;
          best_d = d;
        }
        persists |= c->instance_id == q->instance_id;
      }
      ++r.queries;
      if (best->class_id == q->class_id) ++r.category_hits;
      if (persists) {
        ++r.persisting;
        if (best->instance_id == q->instance_id) ++r.instance_hits;
      }
    }
  }
  return r;
}

inline std::vector<AssociationResult> track_curve(std::span<const TrackInstance> instances, std::span<const int> deltas) {
  std::vector<AssociationResult> rows;
  for (int d : deltas) rows.push_back(track_associate(instances, d));
  return rows;
}

/// Pools one embedding per box from the shard of its frame.
inline std::vector<TrackInstance> pool_instances(std::span<const EmbeddingShard> shards,
                                                 std::span<const BoxAnnotation> boxes, int patch_pixels,
                                                 unsigned workers = 1) {
  std::map<std::string, const EmbeddingShard*> by_id;
  for (const auto& s : shards) by_id[s.image_id] = &s;
  std::vector<TrackInstance> out(boxes.size());
  parallel_for(boxes.size(), workers, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t i = b0; i < b1; ++i) {
      const auto& b = boxes[i];
      const auto it = by_id.find(b.image_id);
      if (it == by_id.end()) throw Error("no shard for annotated image " + b.image_id);
      if (!b.instance_id || !b.frame_index) {
        throw FormatError("tracking box in " + b.image_id + " needs instance_id and frame_index");
      }
      out[i] = {b.video_id, *b.frame_index, *b.instance_id, b.class_id, roi_pool(*it->second, b, patch_pixels)};
    }
  });
  return out;
}

}  // namespace patchlens

#endif
