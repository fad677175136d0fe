#ifndef PATCHLENS_CLI_HPP
#define PATCHLENS_CLI_HPP

// `patchlens` command-line front end. Every subcommand writes
// <out>/<subcommand>.csv, whose '#' header lines echo the configuration
// (all flags except --out and --workers, defaults included).

#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "patchlens/corrupt.hpp"
#include "patchlens/embedset.hpp"
#include "patchlens/labels.hpp"
#include "patchlens/png_io.hpp"
#include "patchlens/probe.hpp"
#include "patchlens/report.hpp"
#include "patchlens/retrieval.hpp"
#include "patchlens/spectra.hpp"

namespace patchlens::cli {

namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  using Error::Error;
};

struct CommonOptions {
  std::uint64_t seed = 0;
  unsigned workers = default_workers();
  std::string out = ".";
};

struct DataOptions {
  std::string train;
  std::string val;
  std::string shards;
  std::string split;
  std::string labels;
  std::string taxonomy;
};

struct SplitData {
  EmbedManifest manifest;
  std::vector<EmbeddingShard> train;
  std::vector<EmbeddingShard> val;
  LabelIndex labels;
};

inline void merge_labels(LabelIndex& into, LabelIndex from) {
  for (auto& [id, grid] : from) {
    if (!into.emplace(id, std::move(grid)).second) throw FormatError("duplicate labels for image " + id);
  }
}

inline LabelIndex labels_near(const fs::path& dir, const std::string& override_path) {
  if (!override_path.empty()) return read_label_grids(override_path);
  const auto p = dir / "labels.jsonl";
  if (!fs::exists(p)) throw UsageError("no --labels given and " + p.string() + " does not exist");
  return read_label_grids(p);
}

inline std::vector<std::string> read_id_list(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("split file has no '") + key + "' list");
  return j.at(key).get<std::vector<std::string>>();
}

inline SplitData load_split(const DataOptions& o) {
  SplitData d;
  if (!o.train.empty() || !o.val.empty()) {
    if (o.train.empty() || o.val.empty()) throw UsageError("--train and --val must be given together");
    auto [mt, train] = read_shards(o.train);
    auto [mv, val] = read_shards(o.val);
    if (mt.feature_dim != mv.feature_dim || mt.patch_grid != mv.patch_grid) {
      throw DimensionError("train and val shards differ in dimension or grid");
    }
    d.manifest = mt;
    d.train = std::move(train);
    d.val = std::move(val);
    if (!o.labels.empty()) {
      d.labels = read_label_grids(o.labels);
    } else {
      d.labels = labels_near(o.train, "");
      merge_labels(d.labels, labels_near(o.val, ""));
    }
    return d;
  }
  if (o.shards.empty() || o.split.empty()) {
    throw UsageError("give either --train and --val, or --shards and --split");
  }
  auto [m, shards] = read_shards(o.shards);
  d.manifest = m;
  std::ifstream in(o.split, std::ios::binary);
  if (!in) throw Error("cannot open split file " + o.split);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(o.split + ": " + e.what());
  }
  std::map<std::string, EmbeddingShard*> by_id;
  for (auto& s : shards) by_id[s.image_id] = &s;
  auto take = [&](const char* key, std::vector<EmbeddingShard>& dst) {
    for (const auto& id : read_id_list(j, key)) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw Error("split image " + id + " not found in " + o.shards);
      dst.push_back(*it->second);
    }
  };
  take("train", d.train);
  take("val", d.val);
  d.labels = labels_near(o.shards, o.labels);
  return d;
}

inline ClassTaxonomy taxonomy_for(const std::string& path, const LabelIndex& labels) {
  if (!path.empty()) return read_taxonomy(path);
  std::int32_t max_id = 0;
  for (const auto& [id, g] : labels) {
    for (auto l : g.labels) max_id = std::max(max_id, l);
    if (g.image_label) max_id = std::max(max_id, *g.image_label);
  }
  return ClassTaxonomy::flat(std::size_t(max_id) + 1);
}

/// Mask removing the m highest-variance features of the given patch sample.
inline FeatureMask variance_mask(const FeatureMatrix& sample, std::size_t m, const EmbedManifest& manifest,
                                 unsigned workers) {
  if (m == 0) return FeatureMask::full(sample.cols());
  return top_variance_mask(feature_stats(sample, workers), m, manifest.dataset_id + "/" + manifest.model_id);
}

inline std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? sep : "") + parts[i];
  return s;
}

/// Every option of the subcommand except help, --out and --workers.
inline std::vector<std::pair<std::string, std::string>> config_echo(const CLI::App& sub) {
  std::vector<std::pair<std::string, std::string>> echo{{"command", sub.get_name()}};
  for (const auto* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "workers" || name == "out" || name.empty()) continue;
    std::string value;
    if (opt->count() > 0) {
      value = opt->get_type_size() == 0 ? "true" : join(opt->results(), ";");
    } else {
      value = opt->get_type_size() == 0 ? "false" : opt->get_default_str();
    }
    echo.emplace_back(name, value);
  }
  return echo;
}

inline fs::path prepare_out(const CommonOptions& c) {
  fs::create_directories(c.out);
  return c.out;
}

// ---------------------------------------------------------------------------
// Subcommand implementations

struct SynthOptions {
  int classes = 10;
  int signal_dims = 568;
  int noise_dims = 200;
  double noise_sigma = 50.0;
  double separation = 20.0;
  int images = 8;
  int val_images = 2;
  std::uint32_t rows = 14;
  std::uint32_t cols = 14;
  bool image_vectors = false;
};

inline int cmd_synth(const SynthOptions& o, const CommonOptions& c, const CLI::App& sub) {
  if (o.val_images < 0) throw UsageError("--val-images must be non-negative");
  SynthSpec spec;
  spec.classes = o.classes;
  spec.signal_dims = o.signal_dims;
  spec.noise_dims = o.noise_dims;
  spec.noise_sigma = o.noise_sigma;
  spec.class_separation = o.separation;
  spec.seed = c.seed;
  spec.images = o.images + o.val_images;
  spec.grid = {o.rows, o.cols};
  spec.image_vectors = o.image_vectors;
  auto data = synth_shards(spec);
  const auto out = prepare_out(c);

  EvalReport rep{"synth", config_echo(sub), {"split", "image_id", "patches", "image_label"}, {}};
  auto emit = [&](const std::string& split, std::size_t begin, std::size_t end) {
    EmbedManifest m = data.manifest;
    m.image_count = end - begin;
    std::vector<EmbeddingShard> shards(data.shards.begin() + std::ptrdiff_t(begin),
                                       data.shards.begin() + std::ptrdiff_t(end));
    std::vector<PatchLabelGrid> labels(data.labels.begin() + std::ptrdiff_t(begin),
                                       data.labels.begin() + std::ptrdiff_t(end));
    write_shards(m, shards, out / split);
    write_label_grids(labels, out / split / "labels.jsonl");
    for (const auto& l : labels) {
      rep.rows.push_back({split, l.image_id, std::int64_t(l.labels.size()), std::int64_t(l.image_label.value_or(-1))});
    }
  };
  emit("train", 0, std::size_t(o.images));
  if (o.val_images > 0) emit("val", std::size_t(o.images), data.shards.size());
  write_taxonomy(ClassTaxonomy::flat(std::size_t(o.classes)), out / "taxonomy.json");
  emit_csv(rep, out / "synth.csv");
  return 0;
}

inline int cmd_validate(const std::vector<std::string>& dirs, const std::string& labels_path, const CommonOptions& c,
                        const CLI::App& sub) {
  EvalReport rep{"validate",
                 config_echo(sub),
                 {"directory", "image_id", "file", "rows", "cols", "dim", "image_vector", "labels", "status"},
                 {}};
  bool ok = true;
  for (const auto& dir : dirs) {
    EmbedManifest m;
    std::vector<ManifestEntry> entries;
    try {
      std::tie(m, entries) = read_manifest(dir);
    } catch (const Error& e) {
      rep.rows.push_back({dir, std::string{}, std::string(kManifestFile), std::int64_t(0), std::int64_t(0),
                          std::int64_t(0), std::string{}, std::string{}, std::string("error: ") + e.what()});
      ok = false;
      continue;
    }
    std::optional<LabelIndex> labels;
    const fs::path label_file = labels_path.empty() ? fs::path(dir) / "labels.jsonl" : fs::path(labels_path);
    if (fs::exists(label_file)) labels = read_label_grids(label_file);
    for (const auto& e : entries) {
      std::string status = "ok", label_status = labels ? "missing" : "";
      std::int64_t rows = 0, cols = 0, dim = 0;
      std::string has_iv;
      try {
        const auto s = read_shard_file(fs::path(dir) / e.file);
        rows = s.shape.rows;
        cols = s.shape.cols;
        dim = s.dim;
        has_iv = s.image_vector ? "yes" : "no";
        if (s.image_id != e.image_id) throw FormatError("image_id does not match manifest entry " + e.image_id);
        validate_shard(m, s);
        if (labels) {
          const auto it = labels->find(s.image_id);
          if (it != labels->end()) {
            label_status = (it->second.rows == s.shape.rows && it->second.cols == s.shape.cols) ? "ok" : "mismatch";
          }
          if (label_status != "ok") ok = false;
        }
      } catch (const Error& err) {
        status = std::string("error: ") + err.what();
        ok = false;
      }
      rep.rows.push_back({dir, e.image_id, e.file, rows, cols, dim, has_iv, label_status, status});
    }
  }
  emit_csv(rep, prepare_out(c) / "validate.csv");
  return ok ? 0 : 1;
}

struct StatsOptions {
  std::vector<std::string> shards;
  std::string split;
  std::string stats_split = "all";
};

inline std::pair<EmbedManifest, FeatureMatrix> load_stats_sample(const StatsOptions& o) {
  if (o.shards.empty()) throw UsageError("--shards is required");
  if (o.stats_split != "all" && o.stats_split != "train") throw UsageError("--stats-split must be all or train");
  std::optional<std::set<std::string>> keep;
  if (!o.split.empty()) {
    std::ifstream in(o.split, std::ios::binary);
    if (!in) throw Error("cannot open split file " + o.split);
    const auto j = nlohmann::json::parse(in);
    std::set<std::string> ids;
    for (auto& id : read_id_list(j, "train")) ids.insert(id);
    if (o.stats_split == "all") {
      for (auto& id : read_id_list(j, "val")) ids.insert(id);
    }
    keep = std::move(ids);
  }
  EmbedManifest first;
  FeatureMatrix sample;
  for (std::size_t i = 0; i < o.shards.size(); ++i) {
    auto [m, shards] = read_shards(o.shards[i]);
    if (i == 0) {
      first = m;
      sample = FeatureMatrix(0, m.feature_dim);
    } else if (m.feature_dim != first.feature_dim) {
      throw DimensionError("shard directories differ in feature dimension");
    }
    for (const auto& s : shards) {
      if (keep && !keep->count(s.image_id)) continue;
      for (std::size_t p = 0; p < s.shape.patches(); ++p) sample.append(s.patch(p));
    }
  }
  return {first, std::move(sample)};
}

inline int cmd_stats(const StatsOptions& o, const CommonOptions& c, const CLI::App& sub) {
  auto [m, sample] = load_stats_sample(o);
  const auto stats = feature_stats(sample, c.workers);
  const auto out = prepare_out(c);
  {
    std::ofstream js(out / "stats.json", std::ios::binary);
    js << stats_to_json(stats, m.dataset_id + "/" + m.model_id).dump(2) << '\n';
  }
  const auto order = variance_ranking(stats);
  std::vector<std::int64_t> rank(stats.dim);
  for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = std::int64_t(i);
  EvalReport rep{"stats", config_echo(sub), {"feature", "mean", "variance", "variance_rank"}, {}};
  for (std::size_t i = 0; i < stats.dim; ++i) {
    rep.rows.push_back({std::int64_t(i), stats.mean[i], stats.variance[i], rank[i]});
  }
  emit_csv(rep, out / "stats.csv");
  return 0;
}

struct MaskOptions {
  StatsOptions source;
  std::string stats_file;
  std::size_t m = 0;
  std::string against;
};

inline int cmd_mask(const MaskOptions& o, const CommonOptions& c, const CLI::App& sub) {
  FeatureStats stats;
  std::string provenance;
  if (!o.stats_file.empty()) {
    std::ifstream in(o.stats_file, std::ios::binary);
    if (!in) throw Error("cannot open stats file " + o.stats_file);
    const auto j = nlohmann::json::parse(in);
    stats = stats_from_json(j);
    provenance = j.value("provenance", std::string{});
  } else {
    auto [m, sample] = load_stats_sample(o.source);
    stats = feature_stats(sample, c.workers);
    provenance = m.dataset_id + "/" + m.model_id;
  }
  const auto mask = top_variance_mask(stats, o.m, provenance);
  const auto out = prepare_out(c);
  {
    std::ofstream js(out / "mask.json", std::ios::binary);
    js << mask_to_json(mask).dump(2) << '\n';
  }
  const auto removed = mask.removed();
  const std::set<std::size_t> removed_set(removed.begin(), removed.end());
  EvalReport rep{"mask", config_echo(sub), {"feature", "variance", "removed"}, {}};
  for (std::size_t i = 0; i < stats.dim; ++i) {
    rep.rows.push_back({std::int64_t(i), stats.variance[i], std::int64_t(removed_set.count(i))});
  }
  emit_csv(rep, out / "mask.csv");
  if (!o.against.empty()) {
    const auto other = read_mask(o.against);
    EvalReport ov{"mask-overlap", config_echo(sub), {"dim", "removed_m", "overlap", "provenance_a", "provenance_b"}, {}};
    ov.rows.push_back({std::int64_t(mask.dim), std::int64_t(mask.removed_m), std::int64_t(mask_overlap(mask, other)),
                       mask.provenance, other.provenance});
    emit_csv(ov, out / "overlap.csv");
  }
  return 0;
}

struct SegOptions {
  DataOptions data;
  std::size_t m = 0;
  bool standardize = false;
  std::string metric = "l2";
  std::size_t k = 1;
  std::string stats_split = "all";
  ProbeConfig probe;
};

inline SegmentationConfig seg_config(const SegOptions& o, Evaluation e, const ClassTaxonomy& tax,
                                     const CommonOptions& c) {
  if (o.stats_split != "all" && o.stats_split != "train") throw UsageError("--stats-split must be all or train");
  SegmentationConfig cfg;
  cfg.evaluation = e;
  cfg.num_classes = tax.size();
  cfg.ignore_id = tax.ignore_id;
  cfg.remove_top = o.m;
  cfg.stats_include_val = o.stats_split == "all";
  cfg.k = o.k;
  cfg.metric = parse_metric(o.metric);
  cfg.probe = o.probe;
  cfg.probe.seed = c.seed;
  cfg.probe.standardize = o.standardize;
  return cfg;
}

inline int cmd_segment(const SegOptions& o, Evaluation e, const CommonOptions& c, const CLI::App& sub) {
  const auto data = load_split(o.data);
  const auto tax = taxonomy_for(o.data.taxonomy, data.labels);
  const auto cfg = seg_config(o, e, tax, c);
  LinearProbe probe;
  const auto cm = evaluate_segmentation(data.train, data.val, data.labels, cfg, c.workers, &probe);
  const auto out = prepare_out(c);
  if (e == Evaluation::Linear) save_probe(probe, out / "linear.probe");
  emit_csv(miou_report(cm, tax, sub.get_name(), config_echo(sub)), out / (sub.get_name() + ".csv"));
  return 0;
}

struct ImageKnnOptions {
  DataOptions data;
  std::string mode = "mean";
  std::size_t m = 0;
  std::size_t k = 1;
  std::string metric = "l2";
};

inline int cmd_image_knn(const ImageKnnOptions& o, const CommonOptions& c, const CLI::App& sub) {
  const auto data = load_split(o.data);
  const auto mode = parse_image_mode(o.mode);
  auto image_label = [&](const EmbeddingShard& s) {
    const auto it = data.labels.find(s.image_id);
    if (it == data.labels.end() || !it->second.image_label) throw Error("no image label for " + s.image_id);
    return *it->second.image_label;
  };
  std::optional<FeatureMask> mask;
  if (o.m > 0) {
    FeatureMatrix sample = all_patches(data.train);
    for (const auto& s : data.val) {
      for (std::size_t p = 0; p < s.shape.patches(); ++p) sample.append(s.patch(p));
    }
    mask = variance_mask(sample, o.m, data.manifest, c.workers);
  }
  std::vector<LabeledImage> train;
  for (const auto& s : data.train) train.push_back({&s, image_label(s)});
  std::vector<const EmbeddingShard*> queries;
  for (const auto& s : data.val) queries.push_back(&s);
  const auto pred = image_knn_classify(train, queries, mode, mask ? &*mask : nullptr, o.k, parse_metric(o.metric),
                                       c.workers);
  EvalReport rep{"image-knn", config_echo(sub), {"image_id", "label", "prediction", "correct"}, {}};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto truth = image_label(*queries[i]);
    correct += truth == pred[i];
    rep.rows.push_back({queries[i]->image_id, std::int64_t(truth), std::int64_t(pred[i]), std::int64_t(truth == pred[i])});
  }
  rep.rows.push_back({std::string("accuracy"), std::string{}, std::string{},
                      queries.empty() ? 0.0 : double(correct) / double(queries.size())});
  emit_csv(rep, prepare_out(c) / "image-knn.csv");
  return 0;
}

struct CorruptOptions {
  std::vector<std::string> inputs;
  std::string kind;
  std::vector<double> levels;
  int band = 0;
  int patch = 16;
};

inline int cmd_corrupt(const CorruptOptions& o, const CommonOptions& c, const CLI::App& sub) {
  const auto kind = parse_kind(o.kind);
  const auto out = prepare_out(c);
  EvalReport rep{"corrupt",
                 config_echo(sub),
                 {"input", "output", "kind", "level", "band", "seed", "reference_level", "mse", "psnr", "ssim",
                  "upper_bound"},
                 {}};
  for (const auto& input : o.inputs) {
    const auto img = read_png(input);
    for (double level : o.levels) {
      CorruptionSpec spec{kind, level, o.band, c.seed};
      validate_spec(spec);
      const auto result = corrupt_image(img, spec);
      std::string stem = fs::path(input).stem().string() + "__" + kind_name(kind) + "_" + format_number(level);
      if (kind == CorruptionKind::BandNoise) stem += "_b" + std::to_string(o.band);
      write_png(result, out / (stem + ".png"));
      {
        auto side = spec_to_json(spec);
        side["input"] = fs::path(input).filename().string();
        side["reference_level"] = is_reference_level(spec);
        std::ofstream js(out / (stem + ".json"), std::ios::binary);
        js << side.dump(2) << '\n';
      }
      const GridShape grid{std::uint32_t(img.height / o.patch), std::uint32_t(img.width / o.patch)};
      double upper = 1.0;
      if (grid.patches() > 0) {
        const auto map = build_correspondence(spec, grid, o.patch);
        upper = map.upper_bound;
        if (spec.geometric()) {
          EvalReport corr{"correspondence", config_echo(sub), {"row", "col", "target_row", "target_col", "valid"}, {}};
          for (std::uint32_t r = 0; r < grid.rows; ++r) {
            for (std::uint32_t cc = 0; cc < grid.cols; ++cc) {
              const auto& t = map.at(r, cc);
              corr.rows.push_back({std::int64_t(r), std::int64_t(cc), std::int64_t(t ? t->row : -1),
                                   std::int64_t(t ? t->col : -1), std::int64_t(t.has_value())});
            }
          }
          emit_csv(corr, out / (stem + ".correspondence.csv"));
        }
      }
      const bool ssim_ok = img.width >= 11 && img.height >= 11;
      rep.rows.push_back({input, (stem + ".png"), std::string(kind_name(kind)), level, std::int64_t(o.band),
                          std::int64_t(c.seed), std::int64_t(is_reference_level(spec)), mse(img, result),
                          psnr(img, result), ssim_ok ? ssim(img, result) : std::numeric_limits<double>::quiet_NaN(),
                          upper});
    }
  }
  emit_csv(rep, out / "corrupt.csv");
  return 0;
}

struct RetrieveOptions {
  std::string shards;
  std::string annotations;
  std::string taxonomy;
  std::vector<std::string> queries;
  std::string exclusion = "none";
  bool include_identity = true;
  std::size_t m = 0;
  bool standardize = false;
};

/// Parses KIND:LEVEL[:BAND]=DIR.
inline std::pair<CorruptionSpec, std::string> parse_query_arg(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos) throw UsageError("--queries expects KIND:LEVEL[:BAND]=DIR, got " + arg);
  const std::string head = arg.substr(0, eq);
  std::vector<std::string> parts;
  std::stringstream ss(head);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() < 2 || parts.size() > 3) throw UsageError("--queries expects KIND:LEVEL[:BAND]=DIR, got " + arg);
  CorruptionSpec spec;
  try {
    spec.kind = parse_kind(parts[0]);
    spec.level = std::stod(parts[1]);
    if (parts.size() == 3) spec.band = std::stoi(parts[2]);
  } catch (const std::logic_error&) {
    throw UsageError("bad number in --queries " + arg);
  }
  return {spec, arg.substr(eq + 1)};
}

inline void transform_features(std::vector<EmbeddingShard>& shards, const FeatureMask& mask,
                               const std::optional<Standardizer>& st) {
  for (auto& s : shards) {
    EmbeddingShard t(s.image_id, s.shape, std::uint32_t(mask.retained.size()));
    for (std::size_t p = 0; p < s.shape.patches(); ++p) {
      auto v = apply_mask(s.patch(p), mask);
      if (st) apply_standardizer_inplace(v, *st);
      std::copy(v.begin(), v.end(), t.grid.begin() + std::ptrdiff_t(p * t.dim));
    }
    t.source_tile = s.source_tile;
    s = std::move(t);
  }
}

inline int cmd_retrieve(const RetrieveOptions& o, const CommonOptions& c, const CLI::App& sub) {
  if (o.exclusion != "none" && o.exclusion != "same_image") throw UsageError("--exclusion must be none or same_image");
  const auto tax = read_taxonomy(o.taxonomy);
  const auto boxes = read_annotations(o.annotations);
  std::map<std::string, std::vector<BoxAnnotation>> boxes_by_image;
  for (const auto& b : boxes) boxes_by_image[b.image_id].push_back(b);
  auto [manifest, originals] = read_shards(o.shards);
  const int pp = int(manifest.patch_pixels);

  // Optional feature transform fit on the database patches.
  const auto sample = all_patches(originals);
  const auto mask = variance_mask(sample, o.m, manifest, c.workers);
  std::optional<Standardizer> st;
  if (o.standardize) st = fit_standardizer(apply_mask(sample, mask));
  transform_features(originals, mask, st);

  LabelIndex labels;
  for (const auto& s : originals) {
    const auto it = boxes_by_image.find(s.image_id);
    const std::span<const BoxAnnotation> bs =
        it == boxes_by_image.end() ? std::span<const BoxAnnotation>{} : std::span<const BoxAnnotation>(it->second);
    labels.emplace(s.image_id, patch_object_labels(bs, tax, s.shape, pp, s.image_id));
  }
  const auto exclusion = o.exclusion == "none" ? Exclusion::None : Exclusion::SameImage;
  const auto db = build_patch_database(originals, labels, tax, exclusion);

  auto queries_for = [&](std::vector<EmbeddingShard>& shards, const CorruptionSpec& spec) {
    std::vector<RetrievalQuery> qs;
    for (const auto& s : shards) {
      if (s.shape != manifest.patch_grid) throw DimensionError("query shard " + s.image_id + " has a different grid");
      const auto it = boxes_by_image.find(s.image_id);
      if (it == boxes_by_image.end()) continue;
      auto part = make_queries(s, it->second, tax, spec, pp);
      for (auto& q : part) qs.push_back(std::move(q));
    }
    return qs;
  };

  std::vector<RetrievalLevel> levels;
  if (o.include_identity) {
    levels.push_back({"none", 0.0, false, queries_for(originals, CorruptionSpec::gaussian_noise(0.0, 0))});
  }
  for (const auto& arg : o.queries) {
    auto [spec, dir] = parse_query_arg(arg);
    validate_spec(spec);
    auto [qm, shards] = read_shards(dir);
    if (qm.feature_dim != manifest.feature_dim) throw DimensionError("query shards in " + dir + " differ in dimension");
    transform_features(shards, mask, st);
    levels.push_back({kind_name(spec.kind), spec.level, spec.geometric(), queries_for(shards, spec)});
  }

  const auto outcomes = retrieval_curve(db, levels, c.workers);
  EvalReport rep{"retrieve", config_echo(sub), {"kind", "level", "queries"}, {}};
  for (auto b : buckets_for(exclusion)) rep.columns.push_back(bucket_name(b));
  rep.columns.push_back("upper_bound");
  for (const auto& oc : outcomes) {
    std::vector<Cell> row{oc.name, oc.level, std::int64_t(oc.queries)};
    for (const auto& [b, n] : oc.counts) row.push_back(oc.fraction(b));
    row.push_back(oc.upper_bound);
    rep.rows.push_back(std::move(row));
  }
  emit_csv(rep, prepare_out(c) / "retrieve.csv");
  return 0;
}

struct TrackOptions {
  std::string shards;
  std::string annotations;
  std::vector<int> deltas{1, 2, 4, 8};
  std::size_t m = 0;
};

inline int cmd_track(const TrackOptions& o, const CommonOptions& c, const CLI::App& sub) {
  auto [manifest, frames] = read_shards(o.shards);
  const auto boxes = read_annotations(o.annotations);
  if (o.m > 0) {
    const auto mask = variance_mask(all_patches(frames), o.m, manifest, c.workers);
    transform_features(frames, mask, std::nullopt);
  }
  const auto instances = pool_instances(frames, boxes, int(manifest.patch_pixels), c.workers);
  const auto rows = track_curve(instances, o.deltas);
  EvalReport rep{"track",
                 config_echo(sub),
                 {"delta", "queries", "persisting", "instance_accuracy", "category_accuracy"},
                 {}};
  for (const auto& r : rows) {
    rep.rows.push_back({std::int64_t(r.delta), std::int64_t(r.queries), std::int64_t(r.persisting),
                        r.instance_accuracy(), r.category_accuracy()});
  }
  emit_csv(rep, prepare_out(c) / "track.csv");
  return 0;
}

struct LayersOptions {
  std::vector<std::string> roots;
  std::string eval = "knn";
  SegOptions seg;
};

inline int cmd_layers(const LayersOptions& o, const CommonOptions& c, const CLI::App& sub) {
  std::vector<LayerData> layers;
  LabelIndex labels;
  for (const auto& root : o.roots) {
    DataOptions d = o.seg.data;
    d.train = (fs::path(root) / "train").string();
    d.val = (fs::path(root) / "val").string();
    auto data = load_split(d);
    if (labels.empty()) labels = std::move(data.labels);
    layers.push_back({data.manifest, std::move(data.train), std::move(data.val)});
  }
  std::sort(layers.begin(), layers.end(),
            [](const LayerData& a, const LayerData& b) { return a.manifest.layer < b.manifest.layer; });
  const auto tax = taxonomy_for(o.seg.data.taxonomy, labels);
  const auto cfg = seg_config(o.seg, parse_evaluation(o.eval), tax, c);
  const auto rows = layer_sweep(layers, labels, cfg, c.workers);
  EvalReport rep{"layers", config_echo(sub), {"layer", "miou", "pixel_accuracy"}, {}};
  for (std::size_t k = 0; k < tax.size(); ++k) rep.columns.push_back("iou_" + std::to_string(k));
  for (const auto& r : rows) {
    std::vector<Cell> row{std::int64_t(r.layer), r.miou.mean, r.accuracy};
    for (std::size_t k = 0; k < tax.size(); ++k) {
      row.push_back(k < r.miou.iou.size() && r.miou.iou[k] ? Cell(*r.miou.iou[k]) : Cell(std::string{}));
    }
    rep.rows.push_back(std::move(row));
  }
  emit_csv(rep, prepare_out(c) / "layers.csv");
  return 0;
}

struct R2Options {
  DataOptions data;
  std::vector<int> classes;
  double lambda = 1.0;
  std::size_t m = 0;
  std::string feature_set = "all";
};

/// Predicts each image's per-class patch fraction from its central patch.
inline int cmd_probe_r2(const R2Options& o, const CommonOptions& c, const CLI::App& sub) {
  const auto data = load_split(o.data);
  const std::size_t dim = data.manifest.feature_dim;
  std::vector<std::size_t> features(dim);
  std::iota(features.begin(), features.end(), std::size_t{0});
  if (o.feature_set != "all") {
    if (o.m == 0 || o.m >= dim) throw UsageError("--feature-set " + o.feature_set + " needs 0 < --m < D");
    if (o.feature_set == "random") {
      std::mt19937_64 rng(c.seed);
      std::shuffle(features.begin(), features.end(), rng);
      features.resize(o.m);
    } else {
      FeatureMatrix sample = all_patches(data.train);
      for (const auto& s : data.val) {
        for (std::size_t p = 0; p < s.shape.patches(); ++p) sample.append(s.patch(p));
      }
      const auto order = variance_ranking(feature_stats(sample, c.workers));
      if (o.feature_set == "drop-top") {
        features.assign(order.begin() + std::ptrdiff_t(o.m), order.end());
      } else if (o.feature_set == "top-only") {
        features.assign(order.begin(), order.begin() + std::ptrdiff_t(o.m));
      } else {
        throw UsageError("--feature-set must be all, drop-top, top-only or random");
      }
    }
    std::sort(features.begin(), features.end());
  }

  std::vector<int> classes = o.classes;
  if (classes.empty()) {
    std::map<std::int32_t, std::size_t> counts;
    for (const auto& s : data.train) {
      for (auto l : labels_for(data.labels, s).labels) ++counts[l];
    }
    std::vector<std::pair<std::int32_t, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second > b.second; });
    for (std::size_t i = 0; i < ranked.size() && i < 3; ++i) classes.push_back(ranked[i].first);
  }

  auto design = [&](std::span<const EmbeddingShard> shards) {
    Eigen::MatrixXd x(Eigen::Index(shards.size()), Eigen::Index(features.size()));
    for (std::size_t i = 0; i < shards.size(); ++i) {
      const auto v = shards[i].patch(shards[i].shape.rows / 2, shards[i].shape.cols / 2);
      for (std::size_t j = 0; j < features.size(); ++j) x(Eigen::Index(i), Eigen::Index(j)) = v[features[j]];
    }
    return x;
  };
  auto targets = [&](std::span<const EmbeddingShard> shards, int cls) {
    Eigen::VectorXd y(Eigen::Index(shards.size()));
    for (std::size_t i = 0; i < shards.size(); ++i) {
      const auto& g = labels_for(data.labels, shards[i]);
      y(Eigen::Index(i)) = double(std::count(g.labels.begin(), g.labels.end(), cls)) / double(g.labels.size());
    }
    return y;
  };
  const auto x_train = design(data.train), x_val = design(data.val);
  EvalReport rep{"probe-r2", config_echo(sub), {"class_id", "r2"}, {}};
  double sum = 0.0;
  for (int cls : classes) {
    const auto model = fit_ridge(x_train, targets(data.train, cls), o.lambda);
    const double r2 = r_squared(model, x_val, targets(data.val, cls));
    sum += r2;
    rep.rows.push_back({std::to_string(cls), r2});
  }
  rep.rows.push_back({std::string("mean"), classes.empty() ? 0.0 : sum / double(classes.size())});
  emit_csv(rep, prepare_out(c) / "probe-r2.csv");
  return 0;
}

inline int cmd_recon(const std::vector<std::string>& refs, const std::vector<std::string>& recs,
                     const CommonOptions& c, const CLI::App& sub) {
  if (refs.size() != recs.size()) throw UsageError("--reference and --reconstructed need the same number of files");
  EvalReport rep{"recon-metrics", config_echo(sub), {"reference", "reconstructed", "mse", "psnr", "ssim"}, {}};
  double s_mse = 0, s_psnr = 0, s_ssim = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto a = read_png(refs[i]);
    const auto b = read_png(recs[i]);
    const double e = mse(a, b), p = psnr(a, b), s = ssim(a, b);
    s_mse += e;
    s_psnr += p;
    s_ssim += s;
    rep.rows.push_back({refs[i], recs[i], e, p, s});
  }
  const double n = double(std::max<std::size_t>(1, refs.size()));
  rep.rows.push_back({std::string("mean"), std::string{}, s_mse / n, s_psnr / n, s_ssim / n});
  emit_csv(rep, prepare_out(c) / "recon-metrics.csv");
  return 0;
}

// ---------------------------------------------------------------------------

inline void add_common(CLI::App* sub, CommonOptions& c) {
  sub->add_option("--seed", c.seed, "Seed for every random draw");
  sub->add_option("--workers", c.workers, "Worker threads (output does not depend on this)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--out", c.out, "Output directory");
}

inline void add_data(CLI::App* sub, DataOptions& d) {
  sub->add_option("--train", d.train, "Training shard directory");
  sub->add_option("--val", d.val, "Validation shard directory");
  sub->add_option("--shards", d.shards, "Shard directory (with --split)");
  sub->add_option("--split", d.split, "Split file listing train/val image ids");
  sub->add_option("--labels", d.labels, "Patch label file (default: labels.jsonl next to the shards)");
  sub->add_option("--taxonomy", d.taxonomy, "Class taxonomy file");
}

inline void add_seg(CLI::App* sub, SegOptions& s) {
  add_data(sub, s.data);
  sub->add_option("--m", s.m, "Number of highest-variance features to remove");
  sub->add_flag("--standardize", s.standardize, "Standardize features with train statistics");
  sub->add_option("--metric", s.metric, "Distance metric")->check(CLI::IsMember({"l2", "cosine"}));
  sub->add_option("--stats-split", s.stats_split, "Patches used for variance ranking")
      ->check(CLI::IsMember({"all", "train"}));
}

inline void add_probe(CLI::App* sub, ProbeConfig& p) {
  sub->add_option("--lr", p.learning_rate, "Learning rate");
  sub->add_option("--epochs", p.epochs, "Training epochs");
  sub->add_option("--batch", p.batch_size, "Mini-batch size");
  sub->add_option("--momentum", p.momentum, "Momentum");
}

/// Runs the CLI. Returns 0 on success, 2 on usage errors, 1 on runtime errors.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"patchlens: evaluation engine for patch-level ViT embeddings", "patchlens"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  CommonOptions common;

  SynthOptions synth;
  auto* s_synth = app.add_subcommand("synth", "Write a synthetic shard dataset with planted high-variance features");
  s_synth->add_option("--classes", synth.classes);
  s_synth->add_option("--signal-dims", synth.signal_dims);
  s_synth->add_option("--noise-dims", synth.noise_dims);
  s_synth->add_option("--noise-sigma", synth.noise_sigma);
  s_synth->add_option("--separation", synth.separation, "Norm of each class mean");
  s_synth->add_option("--images", synth.images, "Training images");
  s_synth->add_option("--val-images", synth.val_images, "Validation images");
  s_synth->add_option("--rows", synth.rows);
  s_synth->add_option("--cols", synth.cols);
  s_synth->add_flag("--image-vectors", synth.image_vectors, "Also emit image-level vectors");
  add_common(s_synth, common);

  std::vector<std::string> validate_dirs;
  std::string validate_labels;
  auto* s_validate = app.add_subcommand("validate", "Check shard directories against their manifests");
  s_validate->add_option("--shards", validate_dirs, "Shard directories")->required();
  s_validate->add_option("--labels", validate_labels, "Patch label file");
  add_common(s_validate, common);

  StatsOptions stats;
  auto* s_stats = app.add_subcommand("stats", "Per-feature mean and variance");
  s_stats->add_option("--shards", stats.shards, "Shard directories")->required();
  s_stats->add_option("--split", stats.split, "Split file restricting the sample");
  s_stats->add_option("--stats-split", stats.stats_split)->check(CLI::IsMember({"all", "train"}));
  add_common(s_stats, common);

  MaskOptions mask;
  auto* s_mask = app.add_subcommand("mask", "Remove the m highest-variance features");
  s_mask->add_option("--shards", mask.source.shards, "Shard directories");
  s_mask->add_option("--split", mask.source.split);
  s_mask->add_option("--stats-split", mask.source.stats_split)->check(CLI::IsMember({"all", "train"}));
  s_mask->add_option("--stats", mask.stats_file, "Stats file from `stats`");
  s_mask->add_option("--m", mask.m)->required();
  s_mask->add_option("--against", mask.against, "Mask file to compute the removed-set overlap with");
  add_common(s_mask, common);

  SegOptions knn;
  auto* s_knn = app.add_subcommand("knn", "Few-shot k-NN patch classification");
  add_seg(s_knn, knn);
  s_knn->add_option("--k", knn.k)->check(CLI::PositiveNumber);
  add_common(s_knn, common);

  SegOptions linear;
  auto* s_linear = app.add_subcommand("linear", "Few-shot linear-probe patch classification");
  add_seg(s_linear, linear);
  add_probe(s_linear, linear.probe);
  add_common(s_linear, common);

  ImageKnnOptions iknn;
  auto* s_iknn = app.add_subcommand("image-knn", "Image-level k-NN on [CLS] or mean patch vectors");
  add_data(s_iknn, iknn.data);
  s_iknn->add_option("--mode", iknn.mode)->check(CLI::IsMember({"cls", "mean"}));
  s_iknn->add_option("--m", iknn.m);
  s_iknn->add_option("--k", iknn.k)->check(CLI::PositiveNumber);
  s_iknn->add_option("--metric", iknn.metric)->check(CLI::IsMember({"l2", "cosine"}));
  add_common(s_iknn, common);

  CorruptOptions corrupt;
  auto* s_corrupt = app.add_subcommand("corrupt", "Corrupt or transform PNG images");
  s_corrupt->add_option("--in", corrupt.inputs, "Input PNG files")->required();
  s_corrupt->add_option("--kind", corrupt.kind)
      ->required()
      ->check(CLI::IsMember({"blur", "gaussian", "band", "shift", "rotate", "scale"}));
  s_corrupt->add_option("--levels", corrupt.levels, "Comma-separated levels")->required()->delimiter(',');
  s_corrupt->add_option("--band", corrupt.band, "Frequency band for band noise")->check(CLI::Range(0, 3));
  s_corrupt->add_option("--patch", corrupt.patch, "Patch size for correspondence maps")->check(CLI::PositiveNumber);
  add_common(s_corrupt, common);

  RetrieveOptions retrieve;
  auto* s_retrieve = app.add_subcommand("retrieve", "Nearest-patch retrieval under image transforms");
  s_retrieve->add_option("--shards", retrieve.shards, "Original image shards (the database)")->required();
  s_retrieve->add_option("--annotations", retrieve.annotations, "Box annotation file")->required();
  s_retrieve->add_option("--taxonomy", retrieve.taxonomy, "Class taxonomy file")->required();
  s_retrieve->add_option("--queries", retrieve.queries, "KIND:LEVEL[:BAND]=DIR transformed shard sets");
  s_retrieve->add_option("--exclusion", retrieve.exclusion)->check(CLI::IsMember({"none", "same_image"}));
  s_retrieve->add_option("--identity", retrieve.include_identity, "Include untransformed queries as level 0");
  s_retrieve->add_option("--m", retrieve.m);
  s_retrieve->add_flag("--standardize", retrieve.standardize);
  add_common(s_retrieve, common);

  TrackOptions track;
  auto* s_track = app.add_subcommand("track", "Instance association across frame gaps");
  s_track->add_option("--shards", track.shards, "Frame shards")->required();
  s_track->add_option("--annotations", track.annotations, "Tracking boxes")->required();
  s_track->add_option("--deltas", track.deltas, "Comma-separated frame gaps")->delimiter(',');
  s_track->add_option("--m", track.m);
  add_common(s_track, common);

  LayersOptions layers;
  auto* s_layers = app.add_subcommand("layers", "Per-layer patch classification sweep");
  s_layers->add_option("--layer", layers.roots, "Layer roots, each holding train/ and val/")->required();
  s_layers->add_option("--eval", layers.eval)->check(CLI::IsMember({"knn", "linear"}));
  s_layers->add_option("--taxonomy", layers.seg.data.taxonomy);
  s_layers->add_option("--m", layers.seg.m);
  s_layers->add_flag("--standardize", layers.seg.standardize);
  s_layers->add_option("--metric", layers.seg.metric)->check(CLI::IsMember({"l2", "cosine"}));
  s_layers->add_option("--k", layers.seg.k)->check(CLI::PositiveNumber);
  add_probe(s_layers, layers.seg.probe);
  add_common(s_layers, common);

  R2Options r2;
  auto* s_r2 = app.add_subcommand("probe-r2", "Ridge probe of global class fractions from the central patch");
  add_data(s_r2, r2.data);
  s_r2->add_option("--classes", r2.classes, "Target class ids (default: 3 most frequent)")->delimiter(',');
  s_r2->add_option("--lambda", r2.lambda)->check(CLI::NonNegativeNumber);
  s_r2->add_option("--m", r2.m);
  s_r2->add_option("--feature-set", r2.feature_set)->check(CLI::IsMember({"all", "drop-top", "top-only", "random"}));
  add_common(s_r2, common);

  std::vector<std::string> refs, recs;
  auto* s_recon = app.add_subcommand("recon-metrics", "MSE, PSNR and SSIM between image pairs");
  s_recon->add_option("--reference", refs)->required();
  s_recon->add_option("--reconstructed", recs)->required();
  add_common(s_recon, common);

  std::vector<std::string> argv_store{"patchlens"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  try {
    if (s_synth->parsed()) return cmd_synth(synth, common, *s_synth);
    if (s_validate->parsed()) return cmd_validate(validate_dirs, validate_labels, common, *s_validate);
    if (s_stats->parsed()) return cmd_stats(stats, common, *s_stats);
    if (s_mask->parsed()) {
      if (mask.stats_file.empty() && mask.source.shards.empty()) throw UsageError("mask needs --shards or --stats");
      return cmd_mask(mask, common, *s_mask);
    }
    if (s_knn->parsed()) return cmd_segment(knn, Evaluation::Knn, common, *s_knn);
    if (s_linear->parsed()) return cmd_segment(linear, Evaluation::Linear, common, *s_linear);
    if (s_iknn->parsed()) return cmd_image_knn(iknn, common, *s_iknn);
    if (s_corrupt->parsed()) return cmd_corrupt(corrupt, common, *s_corrupt);
    if (s_retrieve->parsed()) return cmd_retrieve(retrieve, common, *s_retrieve);
    if (s_track->parsed()) return cmd_track(track, common, *s_track);
    if (s_layers->parsed()) return cmd_layers(layers, common, *s_layers);
    if (s_r2->parsed()) return cmd_probe_r2(r2, common, *s_r2);
    if (s_recon->parsed()) return cmd_recon(refs, recs, common, *s_recon);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace patchlens::cli

#endif
