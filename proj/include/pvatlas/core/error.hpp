#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pvatlas {

enum class ErrorCode {
  InvalidArgument,
  InvalidRegion,
  TransportError,
  UpstreamError,
  ParseError,
  DecodeError,
  EncodeError,
  IndivisibleScene,
  LatitudeOutOfRange,
  InconsistentLabel,
  InsufficientTiles,
  MissingLabel,
  MissingTile,
  IoError,
  UploadFailed,
  JobCreateFailed,
  JobFailed,
  JobTimeout,
  EmptyCompletion,
  InvalidProbability,
  IllegalTransition,
  EmptyInput,
  InputOutOfRange,
  MissingSourceRegion,
  NoParsedPredictions,
  ConfigError,
  UsageError,
  PortInUse,
};

std::string_view error_code_name(ErrorCode code);

// Single exception type for the library. `line` is set for line-oriented
// inputs (JSONL), `status` for HTTP failures.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<int> line = std::nullopt,
        std::optional<int> status = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  std::optional<int> line() const noexcept { return line_; }
  std::optional<int> status() const noexcept { return status_; }

 private:
  ErrorCode code_;
  std::optional<int> line_;
  std::optional<int> status_;
};

}  // namespace pvatlas
