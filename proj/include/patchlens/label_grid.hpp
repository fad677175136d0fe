#ifndef PATCHLENS_LABEL_GRID_HPP
#define PATCHLENS_LABEL_GRID_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchlens/common.hpp"

namespace patchlens {

/// Per-patch class ids for one image, row-major. image_label is the
/// image-level class used by image k-NN, when the dataset defines one.
struct PatchLabelGrid {
  std::string image_id;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::int32_t> labels;
  std::optional<std::int32_t> image_label;

  PatchLabelGrid() = default;
  PatchLabelGrid(std::string id, std::uint32_t r, std::uint32_t c, std::int32_t fill = 0)
      : image_id(std::move(id)), rows(r), cols(c), labels(std::size_t(r) * c, fill) {}

  std::int32_t at(std::uint32_t r, std::uint32_t c) const { return labels[std::size_t(r) * cols + c]; }
  std::int32_t& at(std::uint32_t r, std::uint32_t c) { return labels[std::size_t(r) * cols + c]; }

  friend bool operator==(const PatchLabelGrid&, const PatchLabelGrid&) = default;
};

using LabelIndex = std::map<std::string, PatchLabelGrid>;

// One JSON object per line: {"image_id", "rows", "cols", "labels", ["image_label"]}.

inline void write_label_grids(const std::vector<PatchLabelGrid>& grids,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write label file " + path.string());
  for (const auto& g : grids) {
    nlohmann::ordered_json j;
    j["image_id"] = g.image_id;
    j["rows"] = g.rows;
    j["cols"] = g.cols;
    j["labels"] = g.labels;
    if (g.image_label) j["image_label"] = *g.image_label;
    out << j.dump() << '\n';
  }
}

inline LabelIndex read_label_grids(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read label file " + path.string());
  LabelIndex index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PatchLabelGrid g;
      g.image_id = j.at("image_id").get<std::string>();
      g.rows = j.at("rows").get<std::uint32_t>();
      g.cols = j.at("cols").get<std::uint32_t>();
      g.labels = j.at("labels").get<std::vector<std::int32_t>>();
      if (j.contains("image_label")) g.image_label = j.at("image_label").get<std::int32_t>();
      if (g.labels.size() != std::size_t(g.rows) * g.cols) {
        throw DimensionError("label count does not match " + std::to_string(g.rows) + "x" +
                             std::to_string(g.cols) + " for " + g.image_id);
      }
      const std::string id = g.image_id;
      if (!index.emplace(id, std::move(g)).second) {
        throw FormatError("duplicate image_id " + id);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return index;
}

}  // namespace patchlens

#endif
