#include "pvatlas/core/error.hpp"

namespace pvatlas {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidRegion: return "InvalidRegion";
    case ErrorCode::TransportError: return "TransportError";
    case ErrorCode::UpstreamError: return "UpstreamError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::EncodeError: return "EncodeError";
    case ErrorCode::IndivisibleScene: return "IndivisibleScene";
    case ErrorCode::LatitudeOutOfRange: return "LatitudeOutOfRange";
    case ErrorCode::InconsistentLabel: return "InconsistentLabel";
    case ErrorCode::InsufficientTiles: return "InsufficientTiles";
    case ErrorCode::MissingLabel: return "MissingLabel";
    case ErrorCode::MissingTile: return "MissingTile";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::UploadFailed: return "UploadFailed";
    case ErrorCode::JobCreateFailed: return "JobCreateFailed";
    case ErrorCode::JobFailed: return "JobFailed";
    case ErrorCode::JobTimeout: return "JobTimeout";
    case ErrorCode::EmptyCompletion: return "EmptyCompletion";
    case ErrorCode::InvalidProbability: return "InvalidProbability";
    case ErrorCode::IllegalTransition: return "IllegalTransition";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InputOutOfRange: return "InputOutOfRange";
    case ErrorCode::MissingSourceRegion: return "MissingSourceRegion";
    case ErrorCode::NoParsedPredictions: return "NoParsedPredictions";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::UsageError: return "UsageError";
    case ErrorCode::PortInUse: return "PortInUse";
  }
  return "Unknown";
}

namespace {

std::string decorate(ErrorCode code, const std::string& message,
                     std::optional<int> line, std::optional<int> status) {
  std::string out(error_code_name(code));
  if (line) out += "(line=" + std::to_string(*line) + ")";
  if (status) out += "(status=" + std::to_string(*status) + ")";
  out += ": ";
  out += message;
  return out;
}

}  // namespace

Error::Error(ErrorCode code, const std::string& message, std::optional<int> line,
             std::optional<int> status)
    : std::runtime_error(decorate(code, message, line, status)),
      code_(code),
      line_(line),
      status_(status) {}

}  // namespace pvatlas
