#ifndef PATCHLENS_EMBEDSET_HPP
#define PATCHLENS_EMBEDSET_HPP

// Embedding shards: one image's patch grid of feature vectors, stored one
// binary file per image next to a JSON manifest.
//
// Shard layout (all integers little-endian):
//   "PLNS" | u16 version=1 | u16 flags (bit0: image vector present)
//   | u32 rows | u32 cols | u32 dim | u32 id_len | id bytes (UTF-8)
//   | [dim x f32 image vector] | rows*cols*dim x f32 grid (row-major, feature-minor)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchlens/common.hpp"
#include "patchlens/label_grid.hpp"

namespace patchlens {

struct GridShape {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::size_t patches() const { return std::size_t(rows) * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

struct EmbedManifest {
  std::string model_id;
  int layer = 12;
  std::uint32_t feature_dim = 0;
  GridShape patch_grid;
  std::uint32_t patch_pixels = 16;
  bool normalized = true;
  std::string dataset_id;
  std::size_t image_count = 0;

  friend bool operator==(const EmbedManifest&, const EmbedManifest&) = default;
};

struct SourceTile {
  double origin_x = 0.0;
  double origin_y = 0.0;
  std::string parent_image_id;
  friend bool operator==(const SourceTile&, const SourceTile&) = default;
};

struct EmbeddingShard {
  std::string image_id;
  GridShape shape;
  std::uint32_t dim = 0;
  std::vector<float> grid;  // rows * cols * dim
  std::optional<std::vector<float>> image_vector;
  std::optional<SourceTile> source_tile;

  EmbeddingShard() = default;
  EmbeddingShard(std::string id, GridShape s, std::uint32_t d)
      : image_id(std::move(id)), shape(s), dim(d), grid(s.patches() * d, 0.0f) {}

  std::span<const float> patch(std::uint32_t r, std::uint32_t c) const {
    return {grid.data() + (std::size_t(r) * shape.cols + c) * dim, dim};
  }
  std::span<float> patch(std::uint32_t r, std::uint32_t c) {
    return {grid.data() + (std::size_t(r) * shape.cols + c) * dim, dim};
  }
  std::span<const float> patch(std::size_t index) const {
    return {grid.data() + index * dim, dim};
  }

  friend bool operator==(const EmbeddingShard&, const EmbeddingShard&) = default;
};

inline constexpr char kShardMagic[4] = {'P', 'L', 'N', 'S'};
inline constexpr std::uint16_t kShardVersion = 1;
inline constexpr std::uint16_t kFlagImageVector = 1;
inline constexpr const char* kManifestFile = "manifest.json";

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v & 0xff));
  out.push_back(std::uint8_t(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xff));
}

inline void put_f32s(std::vector<std::uint8_t>& out, std::span<const float> values) {
  const std::size_t at = out.size();
  out.resize(at + values.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + at, values.data(), values.size() * 4);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) out[at + 4 * i + b] = std::uint8_t((bits >> (8 * b)) & 0xff);
    }
  }
}

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, const std::string& what)
      : bytes_(bytes), what_(what) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) throw CorruptionError(what_ + ": truncated shard");
  }

  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = std::uint16_t(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void f32s(std::span<float> out) {
    need(out.size() * 4);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), bytes_.data() + pos_, out.size() * 4);
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes_[pos_ + 4 * i + b]) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
      }
    }
    pos_ += out.size() * 4;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string shard_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "shard_%06zu.plns", index);
  return buf;
}

}  // namespace detail

inline void validate_manifest(const EmbedManifest& m) {
  if (m.layer < 1 || m.layer > 12) throw FormatError("manifest layer must be in [1, 12]");
  if (m.feature_dim == 0) throw FormatError("manifest feature_dim must be positive");
  if (m.patch_grid.rows == 0 || m.patch_grid.cols == 0) {
    throw FormatError("manifest patch_grid must be positive");
  }
  if (m.patch_pixels == 0) throw FormatError("manifest patch_pixels must be positive");
}

/// Checks one shard against the manifest dimensions and finiteness.
inline void validate_shard(const EmbedManifest& m, const EmbeddingShard& s) {
  if (s.shape != m.patch_grid || s.dim != m.feature_dim) {
    throw DimensionError("shard " + s.image_id + " is " + std::to_string(s.shape.rows) + "x" +
                         std::to_string(s.shape.cols) + "x" + std::to_string(s.dim) +
                         ", manifest expects " + std::to_string(m.patch_grid.rows) + "x" +
                         std::to_string(m.patch_grid.cols) + "x" + std::to_string(m.feature_dim));
  }
  if (s.grid.size() != s.shape.patches() * s.dim) {
    throw DimensionError("shard " + s.image_id + " grid buffer has wrong length");
  }
  if (s.image_vector && s.image_vector->size() != s.dim) {
    throw DimensionError("shard " + s.image_id + " image vector has wrong length");
  }
  if (!all_finite(s.grid) || (s.image_vector && !all_finite(*s.image_vector))) {
    throw DimensionError("shard " + s.image_id + " contains non-finite values");
  }
}

inline std::vector<std::uint8_t> encode_shard(const EmbeddingShard& s) {
  std::vector<std::uint8_t> out;
  out.reserve(24 + s.image_id.size() + (s.grid.size() + s.dim) * 4);
  out.insert(out.end(), std::begin(kShardMagic), std::end(kShardMagic));
  detail::put_u16(out, kShardVersion);
  detail::put_u16(out, s.image_vector ? kFlagImageVector : 0);
  detail::put_u32(out, s.shape.rows);
  detail::put_u32(out, s.shape.cols);
  detail::put_u32(out, s.dim);
  detail::put_u32(out, std::uint32_t(s.image_id.size()));
  out.insert(out.end(), s.image_id.begin(), s.image_id.end());
  if (s.image_vector) detail::put_f32s(out, *s.image_vector);
  detail::put_f32s(out, s.grid);
  return out;
}

inline EmbeddingShard decode_shard(std::span<const std::uint8_t> bytes,
                                   const std::string& what = "shard") {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kShardMagic, 4) != 0) {
    throw FormatError(what + ": bad magic (expected PLNS)");
  }
  detail::ByteReader in(bytes.subspan(4), what);
  const std::uint16_t version = in.u16();
  if (version != kShardVersion) {
    throw FormatError(what + ": unsupported shard version " + std::to_string(version));
  }
  const std::uint16_t flags = in.u16();
  if (flags & ~kFlagImageVector) throw FormatError(what + ": unknown flag bits");
  EmbeddingShard s;
  s.shape.rows = in.u32();
  s.shape.cols = in.u32();
  s.dim = in.u32();
  s.image_id = in.str(in.u32());
  const std::size_t floats = s.shape.patches() * s.dim + ((flags & kFlagImageVector) ? s.dim : 0);
  if (in.remaining() != floats * 4) {
    throw CorruptionError(what + ": payload is " + std::to_string(in.remaining()) +
                          " bytes, expected " + std::to_string(floats * 4));
  }
  if (flags & kFlagImageVector) {
    s.image_vector.emplace(s.dim);
    in.f32s(*s.image_vector);
  }
  s.grid.resize(s.shape.patches() * s.dim);
  in.f32s(s.grid);
  if (!all_finite(s.grid) || (s.image_vector && !all_finite(*s.image_vector))) {
    throw CorruptionError(what + ": non-finite values in payload");
  }
  return s;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline EmbeddingShard read_shard_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_shard(bytes, path.string());
}

inline nlohmann::ordered_json manifest_to_json(const EmbedManifest& m) {
  nlohmann::ordered_json j;
  j["format"] = "patchlens-manifest";
  j["version"] = 1;
  j["model_id"] = m.model_id;
  j["layer"] = m.layer;
  j["feature_dim"] = m.feature_dim;
  j["patch_grid"] = {m.patch_grid.rows, m.patch_grid.cols};
  j["patch_pixels"] = m.patch_pixels;
  j["normalized"] = m.normalized;
  j["dataset_id"] = m.dataset_id;
  j["image_count"] = m.image_count;
  return j;
}

inline void write_shards(const EmbedManifest& manifest, const std::vector<EmbeddingShard>& shards,
                         const std::filesystem::path& dir) {
  validate_manifest(manifest);
  if (manifest.image_count != shards.size()) {
    throw DimensionError("manifest image_count " + std::to_string(manifest.image_count) +
                         " does not match " + std::to_string(shards.size()) + " shards");
  }
  for (const auto& s : shards) validate_shard(manifest, s);

  std::filesystem::create_directories(dir);
  auto j = manifest_to_json(manifest);
  auto& list = j["shards"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < shards.size(); ++i) {
    const auto name = detail::shard_file_name(i);
    const auto bytes = encode_shard(shards[i]);
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / name).string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw Error("write failed for " + (dir / name).string());

    nlohmann::ordered_json entry;
    entry["file"] = name;
    entry["image_id"] = shards[i].image_id;
    if (const auto& t = shards[i].source_tile) {
      entry["source_tile"] = {{"origin_x", t->origin_x},
                              {"origin_y", t->origin_y},
                              {"parent_image_id", t->parent_image_id}};
    }
    list.push_back(std::move(entry));
  }
  std::ofstream out(dir / kManifestFile, std::ios::binary);
  if (!out) throw Error("cannot write manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

struct ManifestEntry {
  std::string file;
  std::string image_id;
  std::optional<SourceTile> source_tile;
};

inline std::pair<EmbedManifest, std::vector<ManifestEntry>> read_manifest(
    const std::filesystem::path& dir) {
  const auto path = dir / kManifestFile;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  EmbedManifest m;
  std::vector<ManifestEntry> entries;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.value("format", "") != "patchlens-manifest") {
      throw FormatError(path.string() + ": not a patchlens manifest");
    }
    if (j.at("version").get<int>() != 1) {
      throw FormatError(path.string() + ": unsupported manifest version");
    }
    m.model_id = j.at("model_id").get<std::string>();
    m.layer = j.at("layer").get<int>();
    m.feature_dim = j.at("feature_dim").get<std::uint32_t>();
    m.patch_grid.rows = j.at("patch_grid").at(0).get<std::uint32_t>();
    m.patch_grid.cols = j.at("patch_grid").at(1).get<std::uint32_t>();
    m.patch_pixels = j.at("patch_pixels").get<std::uint32_t>();
    m.normalized = j.at("normalized").get<bool>();
    m.dataset_id = j.at("dataset_id").get<std::string>();
    m.image_count = j.at("image_count").get<std::size_t>();
    for (const auto& e : j.at("shards")) {
      ManifestEntry entry{e.at("file").get<std::string>(), e.at("image_id").get<std::string>(), {}};
      if (e.contains("source_tile")) {
        const auto& t = e.at("source_tile");
        entry.source_tile = SourceTile{t.at("origin_x").get<double>(), t.at("origin_y").get<double>(),
                                       t.at("parent_image_id").get<std::string>()};
      }
      entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  validate_manifest(m);
  if (entries.size() != m.image_count) {
    throw FormatError(path.string() + ": image_count does not match shard list");
  }
  return {m, entries};
}

inline std::pair<EmbedManifest, std::vector<EmbeddingShard>> read_shards(
    const std::filesystem::path& dir) {
  auto [m, entries] = read_manifest(dir);
  std::vector<EmbeddingShard> shards;
  shards.reserve(entries.size());
  for (auto& e : entries) {
    auto s = read_shard_file(dir / e.file);
    if (s.image_id != e.image_id) {
      throw FormatError((dir / e.file).string() + ": image_id '" + s.image_id +
                        "' does not match manifest entry '" + e.image_id + "'");
    }
    s.source_tile = std::move(e.source_tile);
    validate_shard(m, s);
    shards.push_back(std::move(s));
  }
  return {m, std::move(shards)};
}

// ---------------------------------------------------------------------------
// Synthetic fixture

/// Isotropic Gaussian mixture over signal dims plus class-independent
/// high-variance noise dims. Noise dims occupy the trailing indices
/// [signal_dims, signal_dims + noise_dims).
struct SynthSpec {
  int classes = 10;
  int signal_dims = 568;
  int noise_dims = 200;
  double noise_sigma = 50.0;
  double class_separation = 20.0;
  std::uint64_t seed = 0;
  int images = 10;
  GridShape grid{14, 14};
  bool image_vectors = false;
};

struct SynthData {
  EmbedManifest manifest;
  std::vector<EmbeddingShard> shards;
  std::vector<PatchLabelGrid> labels;
};

inline void validate_synth_spec(const SynthSpec& spec) {
  if (spec.classes <= 0 || spec.signal_dims <= 0 || spec.noise_dims < 0 || spec.images <= 0 ||
      spec.grid.rows == 0 || spec.grid.cols == 0 || !(spec.noise_sigma > 0.0) ||
      !(spec.class_separation > 0.0)) {
    throw Error("invalid synth spec");
  }
}

inline SynthData synth_shards(const SynthSpec& spec) {
  validate_synth_spec(spec);
  const std::size_t signal = std::size_t(spec.signal_dims);
  const std::uint32_t dim = std::uint32_t(spec.signal_dims + spec.noise_dims);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  std::uniform_int_distribution<int> pick_class(0, spec.classes - 1);

  std::vector<std::vector<double>> means(std::size_t(spec.classes), std::vector<double>(signal));
  for (auto& mean : means) {
    double norm2 = 0.0;
    for (auto& x : mean) {
      x = unit(rng);
      norm2 += x * x;
    }
    const double scale = spec.class_separation / std::sqrt(norm2);
    for (auto& x : mean) x *= scale;
  }

  SynthData out;
  out.manifest.model_id = "synth";
  out.manifest.layer = 12;
  out.manifest.feature_dim = dim;
  out.manifest.patch_grid = spec.grid;
  out.manifest.patch_pixels = 16;
  out.manifest.normalized = true;
  out.manifest.dataset_id = "synth-" + std::to_string(spec.seed);
  out.manifest.image_count = std::size_t(spec.images);

  for (int img = 0; img < spec.images; ++img) {
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%06d", img);
    EmbeddingShard shard(id, spec.grid, dim);
    PatchLabelGrid labels(id, spec.grid.rows, spec.grid.cols);
    std::vector<std::size_t> counts(std::size_t(spec.classes), 0);
    for (std::size_t p = 0; p < spec.grid.patches(); ++p) {
      const int cls = pick_class(rng);
      labels.labels[p] = cls;
      ++counts[std::size_t(cls)];
      float* v = shard.grid.data() + p * dim;
      const auto& mean = means[std::size_t(cls)];
      for (std::size_t i = 0; i < signal; ++i) v[i] = float(mean[i] + unit(rng));
      for (std::size_t i = signal; i < dim; ++i) v[i] = float(noise(rng));
    }
    labels.image_label = std::int32_t(std::max_element(counts.begin(), counts.end()) - counts.begin());
    if (spec.image_vectors) {
      std::vector<float> iv(dim);
      for (std::size_t i = 0; i < dim; ++i) {
        double sum = 0.0;
        for (std::size_t p = 0; p < spec.grid.patches(); ++p) sum += shard.grid[p * dim + i];
        iv[i] = float(sum / double(spec.grid.patches()) + unit(rng));
      }
      shard.image_vector = std::move(iv);
    }
    out.shards.push_back(std::move(shard));
    out.labels.push_back(std::move(labels));
  }
  return out;
}

}  // namespace patchlens

#endif
