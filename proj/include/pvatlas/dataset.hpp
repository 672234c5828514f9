#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvatlas/geo_ingest.hpp"
#include "pvatlas/imagery.hpp"
#include "pvatlas/prompting.hpp"
#include "pvatlas/schema.hpp"

namespace pvatlas {

struct DatasetSplit {
  std::string name;
  RegionRole role = RegionRole::CrossRegionalTest;
  std::vector<std::string> tile_ids;
  std::string region_name;
};

/// Seeded Fisher-Yates shuffle of `tile_ids` truncated to `cap`. Uses only
/// raw mt19937_64 output, so a (tiles, seed, cap) triple gives the same split
/// on every platform. Throws Error{InsufficientTiles} when cap exceeds the
/// input and Error{InvalidArgument} on duplicate ids.
DatasetSplit assign_split(std::span<const std::string> tile_ids, const RegionSpec& region,
                          std::uint64_t seed, std::size_t cap);

/// A tile may appear in at most one fine-tune split. Throws Error{InvalidArgument}.
void check_fine_tune_exclusive(std::span<const DatasetSplit> splits);

void to_json(nlohmann::json& j, const DatasetSplit& s);
void from_json(const nlohmann::json& j, DatasetSplit& s);

/// Annotation interchange record: tile_id, present, location, quantity,
/// annotator_id, labeled_at.
nlohmann::ordered_json annotation_record(const TileLabel& label);
/// Strict vocabulary; throws Error{ParseError} (with `line` when given) and
/// Error{InconsistentLabel}.
TileLabel label_from_annotation(const nlohmann::json& record, std::optional<int> line = std::nullopt);

/// Reads an annotation JSONL file; blank lines are skipped but counted.
/// Errors carry the 1-based line number.
std::vector<TileLabel> import_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, std::span<const TileLabel> labels);

/// Single-writer, multi-reader label store. When backed by a directory,
/// every accepted change is appended to <dir>/labels.jsonl (last record per
/// tile wins on reload), so re-submitting a label never duplicates state.
class LabelStore {
 public:
  enum class PutResult { Inserted, Updated, Unchanged };

  LabelStore() = default;
  explicit LabelStore(std::filesystem::path dir);

  /// Validates, then records the label. Throws Error{InconsistentLabel}.
  PutResult put(const TileLabel& label);
  std::optional<TileLabel> get(const std::string& tile_id) const;
  bool contains(const std::string& tile_id) const;
  std::vector<TileLabel> all() const;  // ordered by tile_id
  std::size_t size() const;
  /// Rewrites the log with one record per tile.
  void compact();

 private:
  mutable std::shared_mutex mu_;
  std::map<std::string, TileLabel> labels_;
  std::optional<std::filesystem::path> log_path_;
};

/// Writes one chat-format training record per split tile, in split order:
/// system prompt, user message (instruction + base64 PNG data URL),
/// assistant target JSON. Returns the record count. Throws
/// Error{MissingLabel|MissingTile|IoError}.
std::size_t export_training_jsonl(const DatasetSplit& split, const LabelStore& labels,
                                  const TileStore& tiles, const PromptTemplate& tmpl,
                                  const std::filesystem::path& path);

/// Parses every assistant target of a training file back into predictions
/// through the model-output parser. Throws Error{ParseError} with the line.
std::vector<ModelPrediction> read_training_targets(const std::filesystem::path& path);

}  // namespace pvatlas
