#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pvatlas/imagery.hpp"
#include "pvatlas/schema.hpp"

namespace pvatlas {

// Output field names, in schema order.
inline constexpr std::string_view kFieldPresent = "solar_panels_present";
inline constexpr std::string_view kFieldLocation = "location";
inline constexpr std::string_view kFieldQuantity = "quantity";
inline constexpr std::string_view kFieldLikelihood = "likelihood_of_solar_panels_present";
inline constexpr std::string_view kFieldConfidence = "confidence_of_solar_panels_present";

struct FewShotExample {
  std::string description;  // e.g. "Solar"
  std::string target_json;
};

/// The three-part system prompt: task decomposition, output
/// standardization (rendered from the closed vocabularies) and optional
/// few-shot examples.
struct PromptTemplate {
  std::string version;
  std::string task_decomposition;
  std::vector<FewShotExample> few_shot;
  std::string user_instruction;
};

/// Template with the two reference examples (one solar, one empty).
PromptTemplate default_prompt_template();

/// Throws Error{InvalidArgument} when a field is empty or a few-shot target
/// does not parse strictly.
void validate_template(const PromptTemplate& tmpl);

std::string build_system_prompt(const PromptTemplate& tmpl);

struct UserPayload {
  std::string text;
  std::string image_data_url;  // data:image/png;base64,...
  std::size_t png_bytes = 0;
  std::size_t payload_bytes = 0;  // text + data URL
};

/// Throws Error{EncodeError} for empty rasters.
UserPayload build_user_payload(const Tile& tile, const PromptTemplate& tmpl);

/// Chat messages in the OpenAI multimodal shape.
nlohmann::ordered_json system_message(const std::string& system_prompt);
nlohmann::ordered_json user_message(const UserPayload& payload);

enum class ParsePath { Strict, Repaired };
std::string_view parse_path_name(ParsePath path);

struct ModelPrediction {
  bool present = false;
  LocationClass location = LocationClass::NA;
  QuantityBin quantity = QuantityBin::NA;
  double likelihood = 0;
  double confidence = 0;
  std::string raw_text;
  ParsePath parse_path = ParsePath::Strict;
  std::vector<std::string> repairs;  // applied repairs, in order

  /// Field-by-field equality of the five schema fields.
  bool same_payload(const ModelPrediction& other) const;
};

enum class PredictionErrorKind {
  MalformedOutput,
  MissingField,
  UnknownEnumValue,
  OutOfRange,
  NoResponse,  // inference produced no text (transport/upstream/empty completion)
};
std::string_view error_kind_name(PredictionErrorKind kind);

struct PredictionError {
  PredictionErrorKind kind = PredictionErrorKind::MalformedOutput;
  std::string field;
  std::string value;
  std::string message;
  std::string raw_text;
};

/// A prediction or the typed reason there is none.
class ParseResult {
 public:
  ParseResult(ModelPrediction p) : value_(std::move(p)) {}  // NOLINT
  ParseResult(PredictionError e) : value_(std::move(e)) {}  // NOLINT

  bool ok() const noexcept { return std::holds_alternative<ModelPrediction>(value_); }
  const ModelPrediction& prediction() const { return std::get<ModelPrediction>(value_); }
  const PredictionError& error() const { return std::get<PredictionError>(value_); }
  const ModelPrediction* if_prediction() const { return std::get_if<ModelPrediction>(&value_); }

 private:
  std::variant<ModelPrediction, PredictionError> value_;
};

/// Strict JSON parse first; otherwise the ordered text repairs (strip code
/// fences, extract the first balanced {...}, lowercase bare booleans), then
/// field canonicalization. Never throws.
ParseResult parse_model_output(std::string_view raw);

/// Near-miss normalization of the five schema fields of `object`.
struct CanonicalFields {
  nlohmann::json fields;            // the object with mappable values rewritten
  std::vector<std::string> changed;    // fields whose value was rewritten
  std::vector<std::string> unmappable; // fields with values outside the vocabulary
};
CanonicalFields canonicalize_fields(const nlohmann::json& object);

std::optional<LocationClass> canonicalize_location(std::string_view text);
std::optional<QuantityBin> canonicalize_quantity(std::string_view text);

/// Compact JSON with the five fields in schema order.
std::string serialize_prediction(const ModelPrediction& prediction);
std::string target_json(bool present, LocationClass location, QuantityBin quantity,
                        double likelihood, double confidence);

/// Training target for a ground-truth label: the exemplar likelihood and
/// confidence values (0.98/0.90 solar, 0.21/0.87 no solar).
std::string target_json_for_label(const TileLabel& label);

/// Audit-log record {tile_id, raw_text, parse_path, prediction | error}.
nlohmann::ordered_json audit_record(const std::string& tile_id, const ParseResult& result);
/// Rebuilds a result from an audit record (re-parsing raw_text when present).
ParseResult result_from_audit_record(const nlohmann::json& record);

/// Dump that tolerates invalid UTF-8 in model text.
std::string safe_dump(const nlohmann::ordered_json& j);
std::string safe_dump(const nlohmann::json& j);

}  // namespace pvatlas
