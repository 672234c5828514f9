#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pvatlas/core/clock.hpp"
#include "pvatlas/core/error.hpp"
#include "pvatlas/core/http.hpp"
#include "pvatlas/core/retry.hpp"
#include "pvatlas/imagery.hpp"
#include "pvatlas/prompting.hpp"

namespace pvatlas {

struct FineTuneConfig {
  std::string base_model = "gpt-4o-2024-08-06";
  int n_epochs = 5;
  int batch_size = 8;
  double learning_rate = 1.0;  // sent as the service's learning-rate multiplier
  double temperature = 0.0;    // inference temperature; must stay 0
  std::chrono::seconds poll_interval{30};
  std::chrono::seconds job_timeout{6 * 3600};
  RetryPolicy retry;
};

/// Throws Error{InvalidArgument}.
void validate_config(const FineTuneConfig& config);

enum class JobStatus { Uploaded, Queued, Running, Succeeded, Failed, TimedOut };

std::string_view status_name(JobStatus status);
bool is_terminal(JobStatus status);
/// Uploaded->Queued->Running->{Succeeded|Failed}; Queued->Failed (rejected
/// before start); Queued|Running->TimedOut. Nothing leaves a terminal state.
bool transition_allowed(JobStatus from, JobStatus to);

/// Maps service status strings (validating_files, queued, running,
/// succeeded, failed, cancelled) onto the local lifecycle.
std::optional<JobStatus> map_remote_status(std::string_view remote);

class FineTuneJob {
 public:
  struct Event {
    Timestamp at;
    JobStatus status;
  };

  FineTuneJob(std::string training_file_id, Timestamp uploaded_at);

  const std::string& job_id() const { return job_id_; }
  void set_job_id(std::string id) { job_id_ = std::move(id); }
  const std::string& training_file_id() const { return training_file_id_; }
  JobStatus status() const { return status_; }
  const std::optional<std::string>& fine_tuned_model() const { return fine_tuned_model_; }
  const std::vector<Event>& history() const { return history_; }

  /// Throws Error{IllegalTransition} for disallowed moves, for Succeeded
  /// (use succeed()), and for timestamps earlier than the last event.
  void transition(JobStatus to, Timestamp at);
  void succeed(std::string model, Timestamp at);

 private:
  void append(JobStatus to, Timestamp at);

  std::string job_id_;
  std::string training_file_id_;
  JobStatus status_ = JobStatus::Uploaded;
  std::optional<std::string> fine_tuned_model_;
  std::vector<Event> history_;
};

nlohmann::ordered_json job_to_json(const FineTuneJob& job);

/// Raised for JobFailed / JobTimeout; carries the job and its history.
class FineTuneError : public Error {
 public:
  FineTuneError(ErrorCode code, const std::string& message, FineTuneJob job)
      : Error(code, message), job_(std::move(job)) {}
  const FineTuneJob& job() const { return job_; }

 private:
  FineTuneJob job_;
};

struct RemoteJobState {
  std::string job_id;
  std::string status;
  std::optional<std::string> fine_tuned_model;
  std::string error_message;
};

struct ChatRequest {
  std::string model;
  double temperature = 0.0;
  nlohmann::ordered_json messages = nlohmann::ordered_json::array();
};

/// Remote fine-tuning and chat service. Transport failures surface as
/// Error{TransportError}; HTTP failures as Error{UpstreamError} with status.
class LlmBackend {
 public:
  virtual ~LlmBackend() = default;
  virtual std::string upload_training_file(const std::filesystem::path& jsonl) = 0;
  virtual RemoteJobState create_job(const std::string& training_file_id,
                                    const FineTuneConfig& config) = 0;
  virtual RemoteJobState retrieve_job(const std::string& job_id) = 0;
  /// Returns the completion text (possibly empty).
  virtual std::string chat_completion(const ChatRequest& request) = 0;
};

/// OpenAI-compatible REST backend: /files, /fine_tuning/jobs,
/// /chat/completions under `base_url`. Requests and responses are appended to
/// an audit JSONL when a path is given; the API key is never written, and
/// image data URLs are replaced by their digest.
class OpenAiBackend final : public LlmBackend {
 public:
  OpenAiBackend(HttpClient& http, std::string base_url, std::string api_key,
                std::optional<std::filesystem::path> audit_path = std::nullopt);

  std::string upload_training_file(const std::filesystem::path& jsonl) override;
  RemoteJobState create_job(const std::string& training_file_id, const FineTuneConfig& config) override;
  RemoteJobState retrieve_job(const std::string& job_id) override;
  std::string chat_completion(const ChatRequest& request) override;

 private:
  HttpResponse send_logged(HttpRequest request, const std::string& loggable_body);
  void audit(const nlohmann::ordered_json& entry);

  HttpClient& http_;
  std::string base_url_;
  std::string api_key_;
  std::optional<std::filesystem::path> audit_path_;
  std::mutex audit_mu_;
};

/// Pixel digest -> verbatim completion text.
using FixtureMap = std::map<std::string, std::string>;

/// Deterministic pixel heuristic: the largest 4-connected region of dark,
/// low-chroma, blue-leaning pixels counts as panels when it is big enough
/// and roughly rectangular. Always returns schema-valid JSON.
std::string heuristic_response(const RgbRaster& tile);

/// Fixture lookup by pixel digest, then the heuristic when enabled.
std::optional<std::string> mock_respond(const RgbRaster& tile, const FixtureMap& fixtures,
                                        bool heuristic_enabled);

/// Offline backend: scripted fine-tune job lifecycle plus fixture-driven
/// chat responses keyed by the pixel digest of the submitted image.
class MockBackend final : public LlmBackend {
 public:
  struct Options {
    /// Remote statuses returned by create_job and then each retrieve_job;
    /// the last entry repeats forever.
    std::vector<std::string> job_script{"queued", "running", "succeeded"};
    std::string fine_tuned_model = "ft:gpt-4o-2024-08-06:pv-atlas:mock";
    FixtureMap fixtures;
    bool heuristic_enabled = false;
    /// Per pixel digest: number of HTTP 429 responses before answering.
    std::map<std::string, int> transient_failures;
    bool fail_upload = false;
    bool fail_create = false;
  };

  explicit MockBackend(Options options);

  std::string upload_training_file(const std::filesystem::path& jsonl) override;
  RemoteJobState create_job(const std::string& training_file_id, const FineTuneConfig& config) override;
  RemoteJobState retrieve_job(const std::string& job_id) override;
  std::string chat_completion(const ChatRequest& request) override;

  int chat_calls() const { return chat_calls_.load(); }
  int retrieve_calls() const { return retrieve_calls_.load(); }
  std::optional<FineTuneConfig> last_job_config() const;

 private:
  Options options_;
  mutable std::mutex mu_;
  std::size_t script_pos_ = 0;
  std::optional<FineTuneConfig> last_config_;
  std::atomic<int> chat_calls_{0};
  std::atomic<int> retrieve_calls_{0};
};

/// Pulls the first image data URL out of chat messages and decodes it.
/// Throws Error{DecodeError}.
RgbRaster image_from_messages(const nlohmann::ordered_json& messages);

/// Checks every line is a chat training record with a strictly parseable
/// assistant target. Returns the record count; throws Error{UploadFailed}
/// with the offending line.
std::size_t validate_training_file(const std::filesystem::path& jsonl);

/// Upload, create, then poll every poll_interval until a terminal status or
/// job_timeout. Transient service errors are retried per config.retry.
/// Throws FineTuneError (JobFailed, JobTimeout), Error{UploadFailed,
/// JobCreateFailed, TransportError}.
FineTuneJob upload_and_finetune(const std::filesystem::path& jsonl, const FineTuneConfig& config,
                                LlmBackend& backend, Clock& clock);

struct InferResult {
  std::string raw_text;
  int attempts = 1;
};

/// System prompt + user payload at temperature 0, retried on transient
/// failures. Throws Error{TransportError|UpstreamError|EmptyCompletion}.
InferResult infer_tile(const Tile& tile, const std::string& model_id, const PromptTemplate& tmpl,
                       LlmBackend& backend, Clock& clock, const RetryPolicy& retry = {});

struct BatchOptions {
  int parallelism = 4;
  double requests_per_second = 0;  // <= 0: unlimited
  RetryPolicy retry;
};

struct TileOutcome {
  std::optional<std::string> raw_text;
  std::optional<ErrorCode> error_code;
  std::string error_message;
  int attempts = 0;

  bool ok() const { return raw_text.has_value(); }
  friend bool operator==(const TileOutcome&, const TileOutcome&) = default;
};

/// Every input tile gets an entry; per-tile failures are captured, never
/// thrown. Result is ordered by tile_id.
std::map<std::string, TileOutcome> batch_infer(std::span<const Tile> tiles,
                                               const std::string& model_id,
                                               const PromptTemplate& tmpl, LlmBackend& backend,
                                               const BatchOptions& options, Clock& clock);

/// Per-sequence target-token probabilities.
struct TokenLossInput {
  std::vector<std::vector<double>> sequences;
};

/// Mean over sequences of the mean negative log-probability per token
/// (natural log). Throws Error{InvalidProbability} for p <= 0 or p > 1 and
/// Error{InvalidArgument} for empty input or empty sequences.
double lm_cross_entropy(const TokenLossInput& input);

}  // namespace pvatlas
