#include "pvatlas/prompting.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/error.hpp"
#include "pvatlas/core/files.hpp"

using nlohmann::json;
using nlohmann::ordered_json;

namespace pvatlas {

PromptTemplate default_prompt_template() {
  PromptTemplate t;
  t.version = "pv-schema-v1";
  t.task_decomposition =
      "Determine whether solar panels appear in this satellite image of residential rooftops, "
      "and if they do, where in the image they are and how many there are.\n"
      "Each image may or may not contain a rooftop solar installation. Inspect it and detect "
      "any solar panels.\n"
      "Steps:\n"
      "1. **Image Analysis**: Look over the whole image for objects that resemble solar "
      "panels.\n"
      "2. **Panel Location**: Decide which part of the image the panels occupy.\n"
      "3. **Panel Quantification**: Estimate how many panels there are from their size and "
      "arrangement.";
  t.few_shot = {
      {"Solar",
       "{ \"solar_panels_present\": true,\n  \"location\": \"top-left\",\n  \"quantity\": \"0 to "
       "1\",\n  \"likelihood_of_solar_panels_present\": 0.98,\n  "
       "\"confidence_of_solar_panels_present\": 0.90 }"},
      {"No Solar",
       "{ \"solar_panels_present\": false,\n  \"location\": \"NA\",\n  \"quantity\": \"NA\",\n  "
       "\"likelihood_of_solar_panels_present\": 0.21,\n  "
       "\"confidence_of_solar_panels_present\": 0.87 }"},
  };
  t.user_instruction =
      "Analyze this satellite image tile and answer with the JSON object described above.";
  return t;
}

void validate_template(const PromptTemplate& tmpl) {
  if (tmpl.version.empty()) throw Error(ErrorCode::InvalidArgument, "prompt template has no version");
  if (tmpl.task_decomposition.empty()) {
    throw Error(ErrorCode::InvalidArgument, "prompt template has no task decomposition");
  }
  if (tmpl.user_instruction.empty()) {
    throw Error(ErrorCode::InvalidArgument, "prompt template has no user instruction");
  }
  for (const auto& ex : tmpl.few_shot) {
    const ParseResult r = parse_model_output(ex.target_json);
    if (!r.ok() || r.prediction().parse_path != ParsePath::Strict) {
      throw Error(ErrorCode::InvalidArgument,
                  "few-shot example '" + ex.description + "' is not a strictly valid target");
    }
  }
}

namespace {

template <typename Range>
std::string value_list(const Range& values) {
  std::string out = "[";
  bool first = true;
  for (auto v : values) {
    if (!first) out += ", ";
    first = false;
    out += wire_string(v);
  }
  return out + "]";
}

}  // namespace

std::string build_system_prompt(const PromptTemplate& tmpl) {
  std::string out;
  out += "Task Decomposition\n";
  out += tmpl.task_decomposition;
  out += "\n\nOutput Standardization\n";
  out += "The output must be a single JSON object with the fields below; each field is "
         "restricted to the listed values:\n";
  out += "\"solar_panels_present\": A boolean indicating whether solar panels are detected.\n";
  out += "Possible values: [true, false]\n";
  out += "\"location\": Where in the image the panels are located.\n";
  out += "Possible values: " + value_list(kLocationClasses) + "\n";
  out += "\"quantity\": The number of solar panels detected in the image.\n";
  out += "Possible values: " + value_list(kQuantityBins) + "\n";
  out += "\"likelihood_of_solar_panels_present\": The probability that solar panels are present.\n";
  out += "Possible values: A decimal range from 0.00 to 1.00\n";
  out += "\"confidence_of_solar_panels_present\": The confidence in this prediction.\n";
  out += "Possible values: A decimal range from 0.00 to 1.00\n";
  if (!tmpl.few_shot.empty()) {
    out += "\nFew-shot Prompting\n";
    for (std::size_t i = 0; i < tmpl.few_shot.size(); ++i) {
      out += "Example " + std::to_string(i + 1) + " (" + tmpl.few_shot[i].description + "):\n";
      out += tmpl.few_shot[i].target_json + "\n";
    }
  }
  return out;
}

UserPayload build_user_payload(const Tile& tile, const PromptTemplate& tmpl) {
  const auto png = encode_png(tile.pixels);
  UserPayload p;
  p.text = tmpl.user_instruction;
  p.image_data_url = "data:image/png;base64," + base64_encode(png);
  p.png_bytes = png.size();
  p.payload_bytes = p.text.size() + p.image_data_url.size();
  return p;
}

ordered_json system_message(const std::string& system_prompt) {
  return {{"role", "system"}, {"content", system_prompt}};
}

ordered_json user_message(const UserPayload& payload) {
  ordered_json text_part{{"type", "text"}, {"text", payload.text}};
  ordered_json image_part{{"type", "image_url"},
                          {"image_url", ordered_json{{"url", payload.image_data_url}}}};
  return {{"role", "user"}, {"content", ordered_json::array({text_part, image_part})}};
}

std::string_view parse_path_name(ParsePath path) {
  return path == ParsePath::Strict ? "Strict" : "Repaired";
}

bool ModelPrediction::same_payload(const ModelPrediction& o) const {
  return present == o.present && location == o.location && quantity == o.quantity &&
         likelihood == o.likelihood && confidence == o.confidence;
}

std::string_view error_kind_name(PredictionErrorKind kind) {
  switch (kind) {
    case PredictionErrorKind::MalformedOutput: return "MalformedOutput";
    case PredictionErrorKind::MissingField: return "MissingField";
    case PredictionErrorKind::UnknownEnumValue: return "UnknownEnumValue";
    case PredictionErrorKind::OutOfRange: return "OutOfRange";
    case PredictionErrorKind::NoResponse: return "NoResponse";
  }
  return "Unknown";
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

bool is_na_alias(const std::string& folded) {
  return folded == "na" || folded == "n/a" || folded == "none" || folded == "null" ||
         folded == "not applicable";
}

}  // namespace

std::optional<LocationClass> canonicalize_location(std::string_view text) {
  if (auto exact = location_from_wire(text)) return exact;
  const std::string folded = lower(trim(text));
  if (is_na_alias(folded)) return LocationClass::NA;
  std::string compact;
  for (char c : folded) {
    if (c != ' ' && c != '-' && c != '_') compact += c;
  }
  if (compact == "centre") return LocationClass::Center;
  for (auto l : kLocationClasses) {
    std::string w;
    for (char c : lower(wire_string(l))) {
      if (c != '-') w += c;
    }
    if (w == compact) return l;
  }
  return std::nullopt;
}

std::optional<QuantityBin> canonicalize_quantity(std::string_view text) {
  if (auto exact = quantity_from_wire(text)) return exact;
  const std::string folded = lower(trim(text));
  if (is_na_alias(folded)) return QuantityBin::NA;
  std::string compact;
  for (char c : folded) {
    if (c != ' ') compact += c;
  }
  for (const char* from : {"infinity", "\xe2\x88\x9e"}) {
    if (auto pos = compact.find(from); pos != std::string::npos) {
      compact.replace(pos, std::string_view(from).size(), "inf");
    }
  }
  if (auto pos = compact.find('-'); pos != std::string::npos) compact.replace(pos, 1, "to");
  if (compact == "0to1") return QuantityBin::ZeroToOne;
  if (compact == "1to5") return QuantityBin::OneToFive;
  if (compact == "5to10") return QuantityBin::FiveToTen;
  if (compact == "10toinf" || compact == "10+" || compact == ">10") return QuantityBin::TenPlus;
  return std::nullopt;
}

namespace {

std::optional<bool> canonical_bool(const json& v) {
  if (v.is_boolean()) return v.get<bool>();
  if (!v.is_string()) return std::nullopt;
  const std::string f = lower(trim(v.get_ref<const std::string&>()));
  if (f == "true" || f == "yes") return true;
  if (f == "false" || f == "no") return false;
  return std::nullopt;
}

std::optional<double> canonical_number(const json& v) {
  if (v.is_number()) return v.get<double>();
  if (!v.is_string()) return std::nullopt;
  const std::string s = trim(v.get_ref<const std::string&>());
  double out = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return out;
}

// Finds the member whose key matches `name`, exactly or case-insensitively.
const json* find_field(const json& obj, std::string_view name, bool* case_folded) {
  if (auto it = obj.find(std::string(name)); it != obj.end()) {
    *case_folded = false;
    return &*it;
  }
  for (const auto& [k, v] : obj.items()) {
    if (lower(trim(k)) == name) {
      *case_folded = true;
      return &v;
    }
  }
  return nullptr;
}

}  // namespace

CanonicalFields canonicalize_fields(const json& object) {
  CanonicalFields out;
  out.fields = json::object();
  if (!object.is_object()) return out;

  const auto take = [&](std::string_view name, auto&& normalize) {
    bool folded = false;
    const json* v = find_field(object, name, &folded);
    if (v == nullptr) return;
    const std::string key(name);
    std::optional<json> canonical = normalize(*v);
    if (!canonical) {
      out.fields[key] = *v;
      out.unmappable.push_back(key);
      return;
    }
    if (folded || *canonical != *v) out.changed.push_back(key);
    out.fields[key] = *canonical;
  };

  take(kFieldPresent, [](const json& v) -> std::optional<json> {
    if (auto b = canonical_bool(v)) return json(*b);
    return std::nullopt;
  });
  take(kFieldLocation, [](const json& v) -> std::optional<json> {
    if (v.is_null()) return json(std::string(wire_string(LocationClass::NA)));
    if (!v.is_string()) return std::nullopt;
    if (auto l = canonicalize_location(v.get_ref<const std::string&>())) {
      return json(std::string(wire_string(*l)));
    }
    return std::nullopt;
  });
  take(kFieldQuantity, [](const json& v) -> std::optional<json> {
    if (v.is_null()) return json(std::string(wire_string(QuantityBin::NA)));
    if (!v.is_string()) return std::nullopt;
    if (auto q = canonicalize_quantity(v.get_ref<const std::string&>())) {
      return json(std::string(wire_string(*q)));
    }
    return std::nullopt;
  });
  for (auto name : {kFieldLikelihood, kFieldConfidence}) {
    take(name, [](const json& v) -> std::optional<json> {
      if (auto d = canonical_number(v)) return json(*d);
      return std::nullopt;
    });
  }
  return out;
}

namespace {

constexpr int kMaxNesting = 256;

bool nesting_within_limit(std::string_view text) {
  int depth = 0;
  for (char c : text) {
    if (c == '{' || c == '[') {
      if (++depth > kMaxNesting) return false;
    } else if (c == '}' || c == ']') {
      depth = std::max(0, depth - 1);
    }
  }
  return true;
}

std::optional<json> try_parse_object(std::string_view text) {
  json j = json::parse(text.begin(), text.end(), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

std::string strip_code_fences(std::string_view text) {
  const auto open = text.find("```");
  if (open == std::string_view::npos) return std::string(text);
  auto body_start = text.find('\n', open + 3);
  body_start = (body_start == std::string_view::npos) ? text.size() : body_start + 1;
  // A fence with no newline after it: "```{...}```".
  if (body_start == text.size()) {
    body_start = open + 3;
    while (body_start < text.size() && std::isalpha(static_cast<unsigned char>(text[body_start]))) {
      ++body_start;
    }
  }
  const auto close = text.find("```", body_start);
  return std::string(text.substr(body_start, close == std::string_view::npos
                                                 ? std::string_view::npos
                                                 : close - body_start));
}

std::string extract_first_object(std::string_view text) {
  for (auto start = text.find('{'); start != std::string_view::npos;
       start = text.find('{', start + 1)) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      const char c = text[i];
      if (in_string) {
        if (escaped) {
          escaped = false;
        } else if (c == '\\') {
          escaped = true;
        } else if (c == '"') {
          in_string = false;
        }
        continue;
      }
      if (c == '"') {
        in_string = true;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}') {
        if (--depth == 0) return std::string(text.substr(start, i - start + 1));
      }
    }
  }
  return std::string(text);
}

std::string normalize_boolean_case(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool in_string = false;
  bool escaped = false;
  std::size_t i = 0;
  const auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
  while (i < text.size()) {
    const char c = text[i];
    if (in_string) {
      out += c;
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      ++i;
      continue;
    }
    if (c == '"') {
      in_string = true;
      out += c;
      ++i;
      continue;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) && (i == 0 || !is_word(text[i - 1]))) {
      std::size_t j = i;
      while (j < text.size() && is_word(text[j])) ++j;
      const std::string word(text.substr(i, j - i));
      const std::string folded = lower(word);
      out += (folded == "true" || folded == "false") ? folded : word;
      i = j;
      continue;
    }
    out += c;
    ++i;
  }
  return out;
}

// Depth-first search for the first object carrying the presence field.
const json* find_schema_object(const json& j, int depth = 0) {
  if (depth > kMaxNesting) return nullptr;
  if (j.is_object()) {
    bool folded = false;
    if (find_field(j, kFieldPresent, &folded) != nullptr) return &j;
  }
  if (j.is_object() || j.is_array()) {
    for (const auto& child : j) {
      if (const json* hit = find_schema_object(child, depth + 1)) return hit;
    }
  }
  return nullptr;
}

PredictionError make_error(PredictionErrorKind kind, std::string field, std::string value,
                           std::string message, std::string_view raw) {
  return {kind, std::move(field), std::move(value), std::move(message), std::string(raw)};
}

ParseResult interpret(const json& top, std::string_view raw, std::vector<std::string> repairs) {
  const json* obj = find_schema_object(top);
  if (obj == nullptr) {
    obj = &top;
  } else if (obj != &top) {
    repairs.push_back("unwrap_nested_object");
  }

  const CanonicalFields canon = canonicalize_fields(*obj);
  for (auto name : {kFieldPresent, kFieldLocation, kFieldQuantity, kFieldLikelihood, kFieldConfidence}) {
    const std::string key(name);
    if (!canon.fields.contains(key)) {
      return make_error(PredictionErrorKind::MissingField, key, "", "missing field '" + key + "'", raw);
    }
    if (std::find(canon.unmappable.begin(), canon.unmappable.end(), key) != canon.unmappable.end()) {
      const json& v = canon.fields[key];
      const bool numeric = name == kFieldLikelihood || name == kFieldConfidence;
      if (numeric && v.is_null()) {
        return make_error(PredictionErrorKind::MissingField, key, "null", "field '" + key + "' is null", raw);
      }
      const std::string shown = v.is_string() ? v.get<std::string>() : safe_dump(v);
      return make_error(PredictionErrorKind::UnknownEnumValue, key, shown,
                        "value '" + shown + "' is outside the vocabulary of '" + key + "'", raw);
    }
  }

  ModelPrediction p;
  p.present = canon.fields[std::string(kFieldPresent)].get<bool>();
  p.location = *location_from_wire(canon.fields[std::string(kFieldLocation)].get<std::string>());
  p.quantity = *quantity_from_wire(canon.fields[std::string(kFieldQuantity)].get<std::string>());
  p.likelihood = canon.fields[std::string(kFieldLikelihood)].get<double>();
  p.confidence = canon.fields[std::string(kFieldConfidence)].get<double>();
  for (auto [name, value] : {std::pair{kFieldLikelihood, p.likelihood},
                             std::pair{kFieldConfidence, p.confidence}}) {
    if (!(value >= 0.0 && value <= 1.0)) {
      return make_error(PredictionErrorKind::OutOfRange, std::string(name), format_double(value),
                        "'" + std::string(name) + "' must lie in [0, 1]", raw);
    }
  }
  if (!canon.changed.empty()) repairs.push_back("canonicalize_fields");
  p.raw_text = std::string(raw);
  p.parse_path = repairs.empty() ? ParsePath::Strict : ParsePath::Repaired;
  p.repairs = std::move(repairs);
  return p;
}

}  // namespace

ParseResult parse_model_output(std::string_view raw) {
  try {
    if (trim(raw).empty()) {
      return make_error(PredictionErrorKind::MalformedOutput, "", "", "empty output", raw);
    }
    if (!nesting_within_limit(raw)) {
      return make_error(PredictionErrorKind::MalformedOutput, "", "", "nesting too deep", raw);
    }
    if (auto strict = try_parse_object(raw)) return interpret(*strict, raw, {});

    std::string text(raw);
    std::vector<std::string> repairs;
    using Repair = std::string (*)(std::string_view);
    const std::pair<const char*, Repair> tiers[] = {
        {"strip_code_fences", &strip_code_fences},
        {"extract_first_object", &extract_first_object},
        {"normalize_boolean_case", &normalize_boolean_case},
    };
    for (const auto& [name, repair] : tiers) {
      std::string next = repair(text);
      if (next == text) continue;
      text = std::move(next);
      repairs.emplace_back(name);
      if (auto obj = try_parse_object(text)) return interpret(*obj, raw, repairs);
    }
    return make_error(PredictionErrorKind::MalformedOutput, "", "",
                      "no JSON object could be recovered", raw);
  } catch (const std::exception& e) {
    return make_error(PredictionErrorKind::MalformedOutput, "", "",
                      std::string("parser failure: ") + e.what(), raw);
  }
}

std::string target_json(bool present, LocationClass location, QuantityBin quantity,
                        double likelihood, double confidence) {
  ordered_json j;
  j[std::string(kFieldPresent)] = present;
  j[std::string(kFieldLocation)] = std::string(wire_string(location));
  j[std::string(kFieldQuantity)] = std::string(wire_string(quantity));
  j[std::string(kFieldLikelihood)] = likelihood;
  j[std::string(kFieldConfidence)] = confidence;
  return j.dump();
}

std::string serialize_prediction(const ModelPrediction& p) {
  return target_json(p.present, p.location, p.quantity, p.likelihood, p.confidence);
}

std::string target_json_for_label(const TileLabel& label) {
  validate_label(label);
  return label.present ? target_json(true, label.location, label.quantity, 0.98, 0.90)
                       : target_json(false, LocationClass::NA, QuantityBin::NA, 0.21, 0.87);
}

std::string safe_dump(const ordered_json& j) {
  return j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

std::string safe_dump(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

ordered_json audit_record(const std::string& tile_id, const ParseResult& result) {
  ordered_json j;
  j["tile_id"] = tile_id;
  if (const auto* p = result.if_prediction()) {
    j["raw_text"] = p->raw_text;
    j["parse_path"] = std::string(parse_path_name(p->parse_path));
    j["repairs"] = p->repairs;
    j["prediction"] = ordered_json::parse(serialize_prediction(*p));
  } else {
    const auto& e = result.error();
    if (e.kind == PredictionErrorKind::NoResponse) {
      j["raw_text"] = nullptr;
    } else {
      j["raw_text"] = e.raw_text;
    }
    j["parse_path"] = nullptr;
    j["error"] = {{"kind", std::string(error_kind_name(e.kind))},
                  {"field", e.field},
                  {"value", e.value},
                  {"message", e.message}};
  }
  return j;
}

ParseResult result_from_audit_record(const json& record) {
  const auto& raw = record.at("raw_text");
  if (raw.is_string()) return parse_model_output(raw.get<std::string>());
  PredictionError e;
  e.kind = PredictionErrorKind::NoResponse;
  if (auto it = record.find("error"); it != record.end() && it->is_object()) {
    e.message = it->value("message", "");
  }
  return e;
}

}  // namespace pvatlas
