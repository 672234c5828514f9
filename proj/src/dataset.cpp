#include "pvatlas/dataset.hpp"

#include <fstream>
#include <mutex>
#include <random>
#include <set>
#include <sstream>

#include "pvatlas/core/error.hpp"
#include "pvatlas/core/files.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace pvatlas {

namespace {

// Unbiased draw in [0, n) by rejection.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = rng();
    if (r >= threshold) return r % n;
  }
}

}  // namespace

DatasetSplit assign_split(std::span<const std::string> tile_ids, const RegionSpec& region,
                          std::uint64_t seed, std::size_t cap) {
  if (cap > tile_ids.size()) {
    throw Error(ErrorCode::InsufficientTiles,
                "region '" + region.name + "' has " + std::to_string(tile_ids.size()) +
                    " tiles, split needs " + std::to_string(cap));
  }
  std::set<std::string_view> seen;
  for (const auto& id : tile_ids) {
    if (!seen.insert(id).second) {
      throw Error(ErrorCode::InvalidArgument, "duplicate tile id '" + id + "' in split input");
    }
  }
  std::vector<std::string> ids(tile_ids.begin(), tile_ids.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(bounded(rng, i));
    std::swap(ids[i - 1], ids[j]);
  }
  ids.resize(cap);

  DatasetSplit split;
  split.name = region.name + "-" + std::string(role_name(region.role));
  split.role = region.role;
  split.tile_ids = std::move(ids);
  split.region_name = region.name;
  return split;
}

void check_fine_tune_exclusive(std::span<const DatasetSplit> splits) {
  std::map<std::string, std::string> owner;
  for (const auto& s : splits) {
    if (s.role != RegionRole::FineTune) continue;
    for (const auto& id : s.tile_ids) {
      auto [it, inserted] = owner.emplace(id, s.name);
      if (!inserted) {
        throw Error(ErrorCode::InvalidArgument, "tile '" + id + "' is in fine-tune splits '" +
                                                    it->second + "' and '" + s.name + "'");
      }
    }
  }
}

void to_json(json& j, const DatasetSplit& s) {
  j = json{{"name", s.name},
           {"role", role_name(s.role)},
           {"region_name", s.region_name},
           {"tile_ids", s.tile_ids}};
}

void from_json(const json& j, DatasetSplit& s) {
  s.name = j.at("name").get<std::string>();
  s.role = parse_role(j.at("role").get<std::string>());
  s.region_name = j.at("region_name").get<std::string>();
  s.tile_ids = j.at("tile_ids").get<std::vector<std::string>>();
}

ordered_json annotation_record(const TileLabel& label) {
  ordered_json j;
  j["tile_id"] = label.tile_id;
  j["present"] = label.present;
  j["location"] = std::string(wire_string(label.location));
  j["quantity"] = std::string(wire_string(label.quantity));
  j["annotator_id"] = label.annotator_id;
  j["labeled_at"] = format_utc(label.labeled_at);
  return j;
}

TileLabel label_from_annotation(const json& record, std::optional<int> line) {
  const auto fail = [&](const std::string& msg) -> Error {
    return Error(ErrorCode::ParseError, msg, line);
  };
  if (!record.is_object()) throw fail("annotation record is not an object");
  const auto string_field = [&](const char* name) -> std::string {
    auto it = record.find(name);
    if (it == record.end() || !it->is_string()) {
      throw fail(std::string("missing or non-string field '") + name + "'");
    }
    return it->get<std::string>();
  };

  TileLabel label;
  label.tile_id = string_field("tile_id");
  if (label.tile_id.empty()) throw fail("empty tile_id");
  auto present = record.find("present");
  if (present == record.end() || !present->is_boolean()) {
    throw fail("missing or non-boolean field 'present'");
  }
  label.present = present->get<bool>();
  const std::string loc = string_field("location");
  const auto location = location_from_wire(loc);
  if (!location) throw fail("unknown location '" + loc + "'");
  label.location = *location;
  const std::string qty = string_field("quantity");
  const auto quantity = quantity_from_wire(qty);
  if (!quantity) throw fail("unknown quantity '" + qty + "'");
  label.quantity = *quantity;
  label.annotator_id = string_field("annotator_id");
  try {
    label.labeled_at = parse_utc(string_field("labeled_at"));
  } catch (const Error& e) {
    if (e.line()) throw;
    throw fail(e.what());
  }
  try {
    validate_label(label);
  } catch (const Error& e) {
    throw Error(ErrorCode::InconsistentLabel, e.what(), line);
  }
  return label;
}

std::vector<TileLabel> import_annotations(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<TileLabel> labels;
  std::string text;
  int line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;
    json record = json::parse(text, nullptr, false);
    if (record.is_discarded()) throw Error(ErrorCode::ParseError, "malformed JSON", line_no);
    labels.push_back(label_from_annotation(record, line_no));
  }
  return labels;
}

void write_annotations(const fs::path& path, std::span<const TileLabel> labels) {
  std::string out;
  for (const auto& l : labels) out += annotation_record(l).dump() + "\n";
  write_file_atomic(path, out);
}

LabelStore::LabelStore(fs::path dir) {
  fs::create_directories(dir);
  log_path_ = dir / "labels.jsonl";
  if (!fs::exists(*log_path_)) return;

  std::ifstream in(*log_path_, std::ios::binary);
  std::string text;
  int line_no = 0;
  bool torn_tail = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    if (torn_tail) {
      throw Error(ErrorCode::ParseError, "corrupt label log " + log_path_->string(), line_no - 1);
    }
    json record = json::parse(text, nullptr, false);
    if (record.is_discarded()) {
      // Only a torn final append (interrupted write) is tolerated.
      torn_tail = true;
      continue;
    }
    TileLabel l = label_from_annotation(record, line_no);
    labels_.insert_or_assign(l.tile_id, std::move(l));
  }
  if (torn_tail) compact();
}

LabelStore::PutResult LabelStore::put(const TileLabel& label) {
  validate_label(label);
  std::unique_lock lock(mu_);
  auto it = labels_.find(label.tile_id);
  PutResult result = PutResult::Inserted;
  if (it != labels_.end()) {
    if (it->second == label) return PutResult::Unchanged;
    result = PutResult::Updated;
  }
  if (log_path_) {
    std::ofstream out(*log_path_, std::ios::binary | std::ios::app);
    out << annotation_record(label).dump() << '\n';
    out.flush();
    if (!out) throw Error(ErrorCode::IoError, "append to " + log_path_->string() + " failed");
  }
  labels_.insert_or_assign(label.tile_id, label);
  return result;
}

std::optional<TileLabel> LabelStore::get(const std::string& tile_id) const {
  std::shared_lock lock(mu_);
  auto it = labels_.find(tile_id);
  if (it == labels_.end()) return std::nullopt;
  return it->second;
}

bool LabelStore::contains(const std::string& tile_id) const {
  std::shared_lock lock(mu_);
  return labels_.count(tile_id) != 0;
}

std::vector<TileLabel> LabelStore::all() const {
  std::shared_lock lock(mu_);
  std::vector<TileLabel> out;
  out.reserve(labels_.size());
  for (const auto& [id, l] : labels_) out.push_back(l);
  return out;
}

std::size_t LabelStore::size() const {
  std::shared_lock lock(mu_);
  return labels_.size();
}

void LabelStore::compact() {
  std::unique_lock lock(mu_);
  if (!log_path_) return;
  std::string out;
  for (const auto& [id, l] : labels_) out += annotation_record(l).dump() + "\n";
  write_file_atomic(*log_path_, out);
}

std::size_t export_training_jsonl(const DatasetSplit& split, const LabelStore& labels,
                                  const TileStore& tiles, const PromptTemplate& tmpl,
                                  const fs::path& path) {
  const ordered_json system = system_message(build_system_prompt(tmpl));
  std::string out;
  for (const auto& id : split.tile_ids) {
    const auto label = labels.get(id);
    if (!label) throw Error(ErrorCode::MissingLabel, "tile '" + id + "' has no label");
    const Tile* tile = tiles.find(id);
    if (tile == nullptr) throw Error(ErrorCode::MissingTile, "tile '" + id + "' is not in the tile store");

    ordered_json record;
    record["messages"] = ordered_json::array(
        {system, user_message(build_user_payload(*tile, tmpl)),
         ordered_json{{"role", "assistant"}, {"content", target_json_for_label(*label)}}});
    out += record.dump() + "\n";
  }
  write_file_atomic(path, out);
  return split.tile_ids.size();
}

std::vector<ModelPrediction> read_training_targets(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<ModelPrediction> out;
  std::string text;
  int line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    const json record = json::parse(text, nullptr, false);
    if (record.is_discarded() || !record.contains("messages") || !record["messages"].is_array()) {
      throw Error(ErrorCode::ParseError, "not a training record", line_no);
    }
    const json* assistant = nullptr;
    for (const auto& m : record["messages"]) {
      if (m.is_object() && m.value("role", "") == "assistant") assistant = &m;
    }
    if (assistant == nullptr || !(*assistant)["content"].is_string()) {
      throw Error(ErrorCode::ParseError, "record has no assistant target", line_no);
    }
    const ParseResult r = parse_model_output((*assistant)["content"].get<std::string>());
    if (!r.ok()) throw Error(ErrorCode::ParseError, r.error().message, line_no);
    out.push_back(r.prediction());
  }
  return out;
}

}  // namespace pvatlas
