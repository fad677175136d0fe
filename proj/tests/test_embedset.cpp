#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace patchlens;
using fixtures::TempDir;
namespace fs = std::filesystem;

namespace {

EmbedManifest manifest_for(std::uint32_t dim, GridShape grid, std::size_t count) {
  return {"model", 9, dim, grid, 16, true, "dataset", count};
}

std::vector<EmbeddingShard> random_shards(const EmbedManifest& m, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 3.0f);
  std::vector<EmbeddingShard> out;
  for (std::size_t i = 0; i < n; ++i) {
    EmbeddingShard s("img" + std::to_string(i), m.patch_grid, m.feature_dim);
    for (auto& v : s.grid) v = g(rng);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(ShardFormat, OneByOneByTwoPayloadBytes) {
  EmbeddingShard s("xy", {1, 1}, 2);
  s.grid = {1.0f, 2.0f};
  const auto bytes = encode_shard(s);
  // 24-byte fixed header + 2-byte id, then the payload.
  ASSERT_EQ(bytes.size(), 24u + 2u + 8u);
  const std::vector<std::uint8_t> payload(bytes.end() - 8, bytes.end());
  EXPECT_EQ(payload, (std::vector<std::uint8_t>{0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40}));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PLNS");
}

TEST(ShardFormat, ImageVectorPrecedesGridAndSetsFlag) {
  EmbeddingShard s("a", {1, 1}, 1);
  s.grid = {3.0f};
  s.image_vector = std::vector<float>{-1.0f};
  const auto bytes = encode_shard(s);
  EXPECT_EQ(bytes[6], 1);  // flags, low byte
  EXPECT_EQ(bytes.size(), 24u + 1u + 4u + 4u);
  float iv = 0, g = 0;
  std::memcpy(&iv, bytes.data() + 25, 4);
  std::memcpy(&g, bytes.data() + 29, 4);
  EXPECT_EQ(iv, -1.0f);
  EXPECT_EQ(g, 3.0f);
}

TEST(ShardFormat, PayloadSizeIsHeaderPlusGrid) {
  const auto m = manifest_for(7, {3, 5}, 1);
  const auto s = random_shards(m, 1, 1).front();
  EXPECT_EQ(encode_shard(s).size(), 24 + s.image_id.size() + 3 * 5 * 7 * 4);
}

TEST(ShardFormat, DecodeRoundTrip) {
  const auto m = manifest_for(5, {2, 3}, 1);
  auto s = random_shards(m, 1, 3).front();
  s.image_vector = std::vector<float>(5, 0.25f);
  EXPECT_EQ(decode_shard(encode_shard(s), "mem"), s);
}

TEST(ShardFormat, BadMagicIsFormatError) {
  EmbeddingShard s("a", {1, 1}, 2);
  auto bytes = encode_shard(s);
  bytes[0] = 'X';
  EXPECT_THROW(decode_shard(bytes, "mem"), FormatError);
}

TEST(ShardFormat, BadVersionIsFormatError) {
  EmbeddingShard s("a", {1, 1}, 2);
  auto bytes = encode_shard(s);
  bytes[4] = 2;
  EXPECT_THROW(decode_shard(bytes, "mem"), FormatError);
}

TEST(ShardFormat, TruncatedPayloadIsCorruptionError) {
  EmbeddingShard s("a", {2, 2}, 3);
  auto bytes = encode_shard(s);
  bytes.resize(bytes.size() - 4);
  EXPECT_THROW(decode_shard(bytes, "mem"), CorruptionError);
  bytes.resize(10);
  EXPECT_THROW(decode_shard(bytes, "mem"), CorruptionError);
}

TEST(ShardFormat, NonFiniteRejected) {
  EmbeddingShard s("a", {1, 1}, 2);
  s.grid = {1.0f, std::numeric_limits<float>::quiet_NaN()};
  EXPECT_THROW(decode_shard(encode_shard(s), "mem"), CorruptionError);
}

TEST(ShardDirectory, RoundTripIsBitExact) {
  TempDir dir("embedset_rt");
  const auto m = manifest_for(6, {3, 4}, 3);
  auto shards = random_shards(m, 3, 9);
  shards[1].image_vector = std::vector<float>(6, 1.5f);
  shards[2].source_tile = SourceTile{256, 0, "city_0001"};
  write_shards(m, shards, dir.path());
  const auto [m2, back] = read_shards(dir.path());
  EXPECT_EQ(m2, m);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i], shards[i]);
    EXPECT_EQ(std::memcmp(back[i].grid.data(), shards[i].grid.data(), shards[i].grid.size() * 4), 0);
  }
}

TEST(ShardDirectory, WrongDimensionNamesImage) {
  TempDir dir("embedset_dim");
  const auto m = manifest_for(2, {1, 1}, 2);
  auto shards = random_shards(m, 2, 1);
  shards[1] = EmbeddingShard("odd_one", {1, 1}, 3);
  try {
    write_shards(m, shards, dir.path());
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("odd_one"), std::string::npos);
  }
}

TEST(ShardDirectory, NonFiniteRejectedOnWrite) {
  TempDir dir("embedset_nan");
  const auto m = manifest_for(2, {1, 1}, 1);
  auto shards = random_shards(m, 1, 1);
  shards[0].grid[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(write_shards(m, shards, dir.path()), Error);
}

TEST(ShardDirectory, CountMismatchRejected) {
  TempDir dir("embedset_count");
  const auto m = manifest_for(2, {1, 1}, 5);
  EXPECT_THROW(write_shards(m, random_shards(m, 2, 1), dir.path()), Error);
}

TEST(ShardDirectory, LayerOutsideRangeRejected) {
  TempDir dir("embedset_layer");
  auto m = manifest_for(2, {1, 1}, 1);
  m.layer = 13;
  EXPECT_THROW(write_shards(m, random_shards(m, 1, 1), dir.path()), Error);
}

TEST(ShardDirectory, TruncatedFileOnDiskIsCorruptionError) {
  TempDir dir("embedset_trunc");
  const auto m = manifest_for(4, {2, 2}, 1);
  write_shards(m, random_shards(m, 1, 2), dir.path());
  const auto file = dir.path() / detail::shard_file_name(0);
  fs::resize_file(file, fs::file_size(file) - 3);
  EXPECT_THROW(read_shards(dir.path()), CorruptionError);
}

TEST(Synth, SameSeedSameBytes) {
  auto spec = fixtures::small_spec(42);
  const auto a = synth_shards(spec), b = synth_shards(spec);
  ASSERT_EQ(a.shards.size(), b.shards.size());
  for (std::size_t i = 0; i < a.shards.size(); ++i) EXPECT_EQ(encode_shard(a.shards[i]), encode_shard(b.shards[i]));
  EXPECT_EQ(a.labels, b.labels);
  spec.seed = 43;
  EXPECT_NE(encode_shard(synth_shards(spec).shards[0]), encode_shard(a.shards[0]));
}

TEST(Synth, DimensionIsSignalPlusNoise) {
  const auto d = synth_shards(fixtures::small_spec(1));
  EXPECT_EQ(d.manifest.feature_dim, 32u);
  EXPECT_EQ(d.shards.front().dim, 32u);
  EXPECT_EQ(d.manifest.image_count, d.shards.size());
}

TEST(Synth, NoNoiseDimsHaveUnitScaleVariance) {
  // Between-class spread adds about separation^2 / signal_dims per feature.
  SynthSpec spec;
  spec.noise_dims = 0;
  spec.class_separation = 4.0;
  spec.images = 12;
  spec.grid = {10, 10};
  spec.seed = 3;
  const auto d = synth_shards(spec);
  // Sample-variance oracle, two-pass in long double.
  const std::size_t dim = 568;
  std::vector<long double> mean(dim, 0), var(dim, 0);
  std::size_t n = 0;
  for (const auto& s : d.shards) {
    for (std::size_t p = 0; p < s.shape.patches(); ++p, ++n) {
      for (std::size_t i = 0; i < dim; ++i) mean[i] += s.patch(p)[i];
    }
  }
  ASSERT_GE(n, 1000u);
  for (auto& m : mean) m /= n;
  for (const auto& s : d.shards) {
    for (std::size_t p = 0; p < s.shape.patches(); ++p) {
      for (std::size_t i = 0; i < dim; ++i) var[i] += (s.patch(p)[i] - mean[i]) * (s.patch(p)[i] - mean[i]);
    }
  }
  for (std::size_t i = 0; i < dim; ++i) {
    const double v = double(var[i] / n);
    EXPECT_GE(v, 0.5) << "feature " << i;
    EXPECT_LE(v, 1.5) << "feature " << i;
  }
}

TEST(Synth, NoiseDimsTopTheVarianceRanking) {
  SynthSpec spec;
  spec.seed = 5;
  spec.images = 12;
  spec.grid = {10, 10};
  const auto d = synth_shards(spec);
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < 768; ++i) {
    long double sum = 0, sq = 0;
    std::size_t n = 0;
    for (const auto& s : d.shards) {
      for (std::size_t p = 0; p < s.shape.patches(); ++p, ++n) {
        sum += s.patch(p)[i];
        sq += (long double)s.patch(p)[i] * s.patch(p)[i];
      }
    }
    ranked.emplace_back(-double(sq / n - (sum / n) * (sum / n)), i);
  }
  std::sort(ranked.begin(), ranked.end());
  for (std::size_t r = 0; r < 200; ++r) EXPECT_GE(ranked[r].second, 568u);
}

TEST(Synth, ImageLabelIsModalClass) {
  const auto d = synth_shards(fixtures::small_spec(8));
  for (const auto& l : d.labels) {
    std::map<int, int> counts;
    for (auto c : l.labels) ++counts[c];
    int best = -1, best_n = -1;
    for (auto [c, n] : counts) {
      if (n > best_n) best = c, best_n = n;
    }
    ASSERT_TRUE(l.image_label);
    EXPECT_EQ(*l.image_label, best);
  }
}

TEST(Synth, InvalidSpecRejected) {
  auto spec = fixtures::small_spec(1);
  spec.noise_sigma = 0.0;
  EXPECT_THROW(synth_shards(spec), Error);
  spec = fixtures::small_spec(1);
  spec.images = 0;
  EXPECT_THROW(synth_shards(spec), Error);
}

TEST(LabelFile, RoundTrip) {
  TempDir dir("labels_rt");
  const auto d = synth_shards(fixtures::small_spec(2));
  write_label_grids(d.labels, dir / "labels.jsonl");
  const auto back = read_label_grids(dir / "labels.jsonl");
  ASSERT_EQ(back.size(), d.labels.size());
  for (const auto& l : d.labels) EXPECT_EQ(back.at(l.image_id), l);
}
