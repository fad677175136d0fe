#ifndef PATCHLENS_TESTS_FIXTURES_HPP
#define PATCHLENS_TESTS_FIXTURES_HPP

// Hand-built inputs shared by the unit tests and the acceptance runner.

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "patchlens/cli.hpp"

namespace fixtures {

namespace fs = std::filesystem;
using namespace patchlens;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("patchlens_" + tag + "_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline RasterImage random_image(int w, int h, std::uint64_t seed) {
  RasterImage img(w, h);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255);
  // smooth-ish content so blur and transforms change something measurable
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int base = (x * 7 + y * 3 + c * 40) % 256;
        img.at(x, y, c) = std::uint8_t((base + px(rng) / 4) % 256);
      }
    }
  }
  return img;
}

/// Writes `data` split into train (first `train_images`) and val directories
/// under `root`, each with labels.jsonl.
inline void write_split(const SynthData& data, std::size_t train_images, const fs::path& root) {
  auto emit = [&](const std::string& name, std::size_t b, std::size_t e) {
    EmbedManifest m = data.manifest;
    m.image_count = e - b;
    std::vector<EmbeddingShard> shards(data.shards.begin() + std::ptrdiff_t(b), data.shards.begin() + std::ptrdiff_t(e));
    std::vector<PatchLabelGrid> labels(data.labels.begin() + std::ptrdiff_t(b), data.labels.begin() + std::ptrdiff_t(e));
    write_shards(m, shards, root / name);
    write_label_grids(labels, root / name / "labels.jsonl");
  };
  emit("train", 0, train_images);
  emit("val", train_images, data.shards.size());
}

inline SynthSpec small_spec(std::uint64_t seed) {
  SynthSpec s;
  s.classes = 4;
  s.signal_dims = 24;
  s.noise_dims = 8;
  s.noise_sigma = 20.0;
  s.class_separation = 8.0;
  s.seed = seed;
  s.images = 8;
  s.grid = {6, 6};
  s.image_vectors = true;
  return s;
}

/// Taxonomy with background 0 and two supercategories of two classes each.
inline ClassTaxonomy retrieval_taxonomy() {
  ClassTaxonomy t;
  t.background_id = 0;
  t.supercategories = {"vehicle", "building"};
  t.classes = {{0, "background", -1}, {1, "car", 0}, {2, "truck", 0}, {3, "house", 1}, {4, "tower", 1}};
  return t;
}

struct RetrievalFixture {
  EmbedManifest manifest;
  std::vector<EmbeddingShard> originals;
  std::vector<BoxAnnotation> boxes;
  ClassTaxonomy taxonomy;
};

/// Original shards whose patches carry a per-image, per-patch signature, with
/// two axis-aligned boxes per image.
inline RetrievalFixture retrieval_fixture(std::uint64_t seed, std::size_t images = 6, std::uint32_t dim = 32) {
  RetrievalFixture f;
  f.taxonomy = retrieval_taxonomy();
  const GridShape grid{6, 6};
  f.manifest = {"synth-retrieval", 12, dim, grid, 16, true, "retrieval-" + std::to_string(seed), images};
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  std::uniform_int_distribution<int> cls(1, 4);
  std::uniform_int_distribution<int> cell(0, 2);
  for (std::size_t i = 0; i < images; ++i) {
    const std::string id = "img_" + std::to_string(i);
    EmbeddingShard s(id, grid, dim);
    for (auto& v : s.grid) v = unit(rng);
    f.originals.push_back(std::move(s));
    const int x0 = 16 * cell(rng), y0 = 16 * cell(rng);
    f.boxes.push_back(BoxAnnotation::axis_aligned(x0, y0, x0 + 40, y0 + 40, cls(rng), id));
    f.boxes.push_back(BoxAnnotation::axis_aligned(56, 56, 92, 90, cls(rng), id));
  }
  return f;
}

/// Shards standing in for features of transformed images: each transformed
/// patch copies the original patch it corresponds to, plus noise; patches
/// without a correspondence get fresh noise.
inline std::vector<EmbeddingShard> transformed_shards(const RetrievalFixture& f, const CorruptionSpec& spec,
                                                      float noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  std::vector<EmbeddingShard> out;
  for (const auto& o : f.originals) {
    const auto map = build_correspondence(spec, o.shape, int(f.manifest.patch_pixels));
    EmbeddingShard t(o.image_id, o.shape, o.dim);
    for (std::uint32_t r = 0; r < o.shape.rows; ++r) {
      for (std::uint32_t c = 0; c < o.shape.cols; ++c) {
        auto dst = t.patch(r, c);
        const auto& target = map.at(r, c);
        for (std::size_t k = 0; k < dst.size(); ++k) {
          dst[k] = target ? o.patch(target->row, target->col)[k] + noise * unit(rng) : unit(rng);
        }
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

struct TrackFixture {
  EmbedManifest manifest;
  std::vector<EmbeddingShard> frames;
  std::vector<BoxAnnotation> boxes;
};

/// One video with three objects over eight frames; each object's patches
/// carry its own drifting signature.
inline TrackFixture track_fixture(std::uint64_t seed) {
  TrackFixture f;
  const GridShape grid{4, 4};
  constexpr std::uint32_t dim = 8;
  constexpr int frames = 8;
  f.manifest = {"synth-track", 12, dim, grid, 16, true, "track", frames};
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  std::vector<std::vector<float>> sig(3, std::vector<float>(dim));
  for (auto& s : sig) {
    for (auto& v : s) v = 3.0f * unit(rng);
  }
  for (int t = 0; t < frames; ++t) {
    const std::string id = "v0_f" + std::to_string(t);
    EmbeddingShard s(id, grid, dim);
    for (auto& v : s.grid) v = 0.1f * unit(rng);
    for (int obj = 0; obj < 3; ++obj) {
      if (obj == 2 && t >= 5) continue;  // object 2 leaves the scene
      for (auto& v : sig[std::size_t(obj)]) v += 0.3f * unit(rng);
      const std::uint32_t col = std::uint32_t(obj);
      for (std::uint32_t r = 0; r < 2; ++r) {
        auto p = s.patch(r + 1, col);
        std::copy(sig[std::size_t(obj)].begin(), sig[std::size_t(obj)].end(), p.begin());
      }
      auto b = BoxAnnotation::axis_aligned(16.0 * col, 16.0, 16.0 * col + 16.0, 48.0, obj == 1 ? 2 : 1, id);
      b.video_id = "v0";
      b.frame_index = t;
      b.instance_id = obj;
      f.boxes.push_back(b);
    }
    f.frames.push_back(std::move(s));
  }
  return f;
}

/// Builds every input the CLI subcommands need under `root`; returns one
/// argument list per subcommand (without --out/--workers).
inline std::vector<std::vector<std::string>> build_cli_inputs(const fs::path& root) {
  auto p = [&](const std::string& rel) { return (root / rel).string(); };

  auto data = synth_shards(small_spec(11));
  write_split(data, 6, root / "data");
  write_taxonomy(ClassTaxonomy::flat(4), root / "data" / "taxonomy.json");
  write_shards(data.manifest, data.shards, root / "data" / "all");
  write_label_grids(data.labels, root / "data" / "all" / "labels.jsonl");
  {
    nlohmann::json split;
    std::vector<std::string> train, val;
    for (std::size_t i = 0; i < data.shards.size(); ++i) (i < 6 ? train : val).push_back(data.shards[i].image_id);
    split["train"] = train;
    split["val"] = val;
    std::ofstream(root / "data" / "split.json") << split.dump() << '\n';
  }

  for (int layer : {4, 8}) {
    auto spec = small_spec(11);
    spec.class_separation = layer;
    auto d = synth_shards(spec);
    d.manifest.layer = layer;
    write_split(d, 6, root / ("layer" + std::to_string(layer)));
  }

  write_png(random_image(64, 48, 1), root / "image.png");
  write_png(random_image(32, 32, 2), root / "ref.png");
  write_png(corrupt_image(random_image(32, 32, 2), CorruptionSpec::gaussian_noise(10, 3)), root / "recon.png");

  auto rf = retrieval_fixture(5);
  write_shards(rf.manifest, rf.originals, root / "retrieval" / "orig");
  write_annotations(rf.boxes, root / "retrieval" / "boxes.jsonl");
  write_taxonomy(rf.taxonomy, root / "retrieval" / "taxonomy.json");
  const CorruptionSpec rot{CorruptionKind::Rotate, 10.0, 0, 0};
  write_shards(rf.manifest, transformed_shards(rf, rot, 0.3f, 9), root / "retrieval" / "rot10");

  auto tf = track_fixture(6);
  write_shards(tf.manifest, tf.frames, root / "track" / "frames");
  write_annotations(tf.boxes, root / "track" / "boxes.jsonl");

  return {
      {"synth", "--seed", "3", "--images", "4", "--val-images", "1", "--rows", "4", "--cols", "4", "--signal-dims", "8",
       "--noise-dims", "4", "--image-vectors"},
      {"validate", "--shards", p("data/train"), "--shards", p("data/val")},
      {"stats", "--shards", p("data/train"), "--shards", p("data/val")},
      {"mask", "--shards", p("data/train"), "--m", "8"},
      {"knn", "--train", p("data/train"), "--val", p("data/val"), "--taxonomy", p("data/taxonomy.json"), "--m", "8",
       "--k", "3"},
      {"linear", "--train", p("data/train"), "--val", p("data/val"), "--standardize", "--epochs", "5", "--batch", "32"},
      {"image-knn", "--train", p("data/train"), "--val", p("data/val"), "--mode", "cls", "--m", "4"},
      {"corrupt", "--in", p("image.png"), "--kind", "band", "--levels", "40", "--band", "2", "--seed", "5"},
      {"retrieve", "--shards", p("retrieval/orig"), "--annotations", p("retrieval/boxes.jsonl"), "--taxonomy",
       p("retrieval/taxonomy.json"), "--queries", "rotate:10=" + p("retrieval/rot10"), "--exclusion", "same_image"},
      {"track", "--shards", p("track/frames"), "--annotations", p("track/boxes.jsonl"), "--deltas", "1,2,4"},
      {"layers", "--layer", p("layer8"), "--layer", p("layer4"), "--eval", "knn", "--m", "4"},
      {"probe-r2", "--shards", p("data/all"), "--split", p("data/split.json"), "--feature-set", "drop-top", "--m", "8",
       "--lambda", "1"},
      {"recon-metrics", "--reference", p("ref.png"), "--reconstructed", p("recon.png")},
  };
}

}  // namespace fixtures

#endif
