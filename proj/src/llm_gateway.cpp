#include "pvatlas/llm_gateway.hpp"

#include <cmath>
#include <fstream>

#include "pvatlas/core/concurrency.hpp"
#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/files.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace pvatlas {

void validate_config(const FineTuneConfig& c) {
  if (c.base_model.empty()) throw Error(ErrorCode::InvalidArgument, "base_model is empty");
  if (c.n_epochs < 1) throw Error(ErrorCode::InvalidArgument, "n_epochs must be >= 1");
  if (c.batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 1");
  if (!(c.learning_rate > 0)) throw Error(ErrorCode::InvalidArgument, "learning_rate must be > 0");
  if (c.temperature != 0.0) {
    throw Error(ErrorCode::InvalidArgument, "inference temperature must be 0");
  }
  if (c.poll_interval.count() < 0 || c.job_timeout.count() < 0) {
    throw Error(ErrorCode::InvalidArgument, "poll_interval and job_timeout must be >= 0");
  }
  if (c.retry.max_attempts < 1) throw Error(ErrorCode::InvalidArgument, "retry.max_attempts must be >= 1");
}

std::string_view status_name(JobStatus s) {
  switch (s) {
    case JobStatus::Uploaded: return "uploaded";
    case JobStatus::Queued: return "queued";
    case JobStatus::Running: return "running";
    case JobStatus::Succeeded: return "succeeded";
    case JobStatus::Failed: return "failed";
    case JobStatus::TimedOut: return "timed_out";
  }
  return "unknown";
}

bool is_terminal(JobStatus s) {
  return s == JobStatus::Succeeded || s == JobStatus::Failed || s == JobStatus::TimedOut;
}

bool transition_allowed(JobStatus from, JobStatus to) {
  switch (from) {
    case JobStatus::Uploaded: return to == JobStatus::Queued;
    case JobStatus::Queued:
      return to == JobStatus::Running || to == JobStatus::Failed || to == JobStatus::TimedOut;
    case JobStatus::Running:
      return to == JobStatus::Succeeded || to == JobStatus::Failed || to == JobStatus::TimedOut;
    case JobStatus::Succeeded:
    case JobStatus::Failed:
    case JobStatus::TimedOut: return false;
  }
  return false;
}

std::optional<JobStatus> map_remote_status(std::string_view remote) {
  if (remote == "validating_files" || remote == "queued" || remote == "pending") return JobStatus::Queued;
  if (remote == "running") return JobStatus::Running;
  if (remote == "succeeded") return JobStatus::Succeeded;
  if (remote == "failed" || remote == "cancelled") return JobStatus::Failed;
  return std::nullopt;
}

FineTuneJob::FineTuneJob(std::string training_file_id, Timestamp uploaded_at)
    : training_file_id_(std::move(training_file_id)) {
  history_.push_back({uploaded_at, JobStatus::Uploaded});
}

void FineTuneJob::append(JobStatus to, Timestamp at) {
  if (!transition_allowed(status_, to)) {
    throw Error(ErrorCode::IllegalTransition, "job " + job_id_ + ": " +
                                                  std::string(status_name(status_)) + " -> " +
                                                  std::string(status_name(to)));
  }
  if (!history_.empty() && at < history_.back().at) {
    throw Error(ErrorCode::IllegalTransition, "job " + job_id_ + ": history must be time-ordered");
  }
  status_ = to;
  history_.push_back({at, to});
}

void FineTuneJob::transition(JobStatus to, Timestamp at) {
  if (to == JobStatus::Succeeded) {
    throw Error(ErrorCode::IllegalTransition, "use succeed() to record the fine-tuned model");
  }
  append(to, at);
}

void FineTuneJob::succeed(std::string model, Timestamp at) {
  if (model.empty()) throw Error(ErrorCode::IllegalTransition, "succeeded without a model id");
  append(JobStatus::Succeeded, at);
  fine_tuned_model_ = std::move(model);
}

ordered_json job_to_json(const FineTuneJob& job) {
  ordered_json j;
  j["job_id"] = job.job_id();
  j["training_file_id"] = job.training_file_id();
  j["status"] = std::string(status_name(job.status()));
  j["fine_tuned_model"] = job.fine_tuned_model() ? ordered_json(*job.fine_tuned_model()) : ordered_json();
  ordered_json hist = ordered_json::array();
  for (const auto& e : job.history()) {
    hist.push_back({{"at", format_utc(e.at)}, {"status", std::string(status_name(e.status))}});
  }
  j["history"] = std::move(hist);
  return j;
}

// ---------------------------------------------------------------------------
// OpenAI-compatible backend

namespace {

std::string trim_slash(std::string s) {
  while (!s.empty() && s.back() == '/') s.pop_back();
  return s;
}

void elide_data_urls(ordered_json& j) {
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (s.rfind("data:", 0) == 0 && s.size() > 64) {
      j = "<data-url sha256=" + sha256_hex(s) + " bytes=" + std::to_string(s.size()) + ">";
    }
  } else if (j.is_structured()) {
    for (auto& child : j) elide_data_urls(child);
  }
}

Error upstream_error(const std::string& what, const HttpResponse& resp) {
  return Error(ErrorCode::UpstreamError,
               what + " returned HTTP " + std::to_string(resp.status) + ": " + resp.body.substr(0, 512),
               std::nullopt, resp.status);
}

json parse_body(const std::string& what, const HttpResponse& resp) {
  json j = json::parse(resp.body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw Error(ErrorCode::UpstreamError, what + " returned a non-JSON body", std::nullopt, resp.status);
  }
  return j;
}

RemoteJobState job_state_from(const json& j) {
  RemoteJobState s;
  s.job_id = j.value("id", "");
  s.status = j.value("status", "");
  if (auto m = j.find("fine_tuned_model"); m != j.end() && m->is_string()) s.fine_tuned_model = m->get<std::string>();
  if (auto e = j.find("error"); e != j.end() && e->is_object()) s.error_message = e->value("message", "");
  return s;
}

}  // namespace

OpenAiBackend::OpenAiBackend(HttpClient& http, std::string base_url, std::string api_key,
                             std::optional<fs::path> audit_path)
    : http_(http),
      base_url_(trim_slash(std::move(base_url))),
      api_key_(std::move(api_key)),
      audit_path_(std::move(audit_path)) {}

void OpenAiBackend::audit(const ordered_json& entry) {
  if (!audit_path_) return;
  std::lock_guard lock(audit_mu_);
  if (audit_path_->has_parent_path()) fs::create_directories(audit_path_->parent_path());
  std::ofstream out(*audit_path_, std::ios::binary | std::ios::app);
  out << safe_dump(entry) << '\n';
}

HttpResponse OpenAiBackend::send_logged(HttpRequest request, const std::string& loggable_body) {
  request.headers.emplace_back("Authorization", "Bearer " + api_key_);
  ordered_json entry;
  entry["method"] = request.method;
  entry["url"] = request.url;
  entry["headers"] = {{"Authorization", "Bearer <redacted>"}};
  entry["request_body"] = loggable_body;
  try {
    HttpResponse resp = http_.send(request);
    entry["status"] = resp.status;
    entry["response_body"] = resp.body.size() > 65536 ? resp.body.substr(0, 65536) + "...<truncated>" : resp.body;
    audit(entry);
    return resp;
  } catch (const Error& e) {
    entry["transport_error"] = e.what();
    audit(entry);
    throw;
  }
}

std::string OpenAiBackend::upload_training_file(const fs::path& jsonl) {
  const std::string content = read_text_file(jsonl);
  const std::string boundary = "pvatlas-" + sha256_hex(content).substr(0, 24);
  std::string body;
  body += "--" + boundary + "\r\nContent-Disposition: form-data; name=\"purpose\"\r\n\r\nfine-tune\r\n";
  body += "--" + boundary + "\r\nContent-Disposition: form-data; name=\"file\"; filename=\"" +
          jsonl.filename().string() + "\"\r\nContent-Type: application/jsonl\r\n\r\n";
  body += content;
  body += "\r\n--" + boundary + "--\r\n";

  HttpRequest req;
  req.method = "POST";
  req.url = base_url_ + "/files";
  req.content_type = "multipart/form-data; boundary=" + boundary;
  req.body = std::move(body);
  const HttpResponse resp = send_logged(std::move(req), "<multipart purpose=fine-tune file=" +
                                                            jsonl.filename().string() + " sha256=" +
                                                            sha256_hex(content) + ">");
  if (resp.status < 200 || resp.status >= 300) throw upstream_error("file upload", resp);
  const json j = parse_body("file upload", resp);
  const std::string id = j.value("id", "");
  if (id.empty()) throw Error(ErrorCode::UploadFailed, "file upload response has no id");
  return id;
}

RemoteJobState OpenAiBackend::create_job(const std::string& training_file_id,
                                         const FineTuneConfig& config) {
  ordered_json body;
  body["training_file"] = training_file_id;
  body["model"] = config.base_model;
  body["hyperparameters"] = {{"n_epochs", config.n_epochs},
                             {"batch_size", config.batch_size},
                             {"learning_rate_multiplier", config.learning_rate}};
  HttpRequest req;
  req.method = "POST";
  req.url = base_url_ + "/fine_tuning/jobs";
  req.content_type = "application/json";
  req.body = body.dump();
  const HttpResponse resp = send_logged(req, req.body);
  if (resp.status < 200 || resp.status >= 300) throw upstream_error("fine-tuning job create", resp);
  return job_state_from(parse_body("fine-tuning job create", resp));
}

RemoteJobState OpenAiBackend::retrieve_job(const std::string& job_id) {
  HttpRequest req;
  req.url = base_url_ + "/fine_tuning/jobs/" + url_encode(job_id);
  const HttpResponse resp = send_logged(req, "");
  if (resp.status < 200 || resp.status >= 300) throw upstream_error("fine-tuning job retrieve", resp);
  return job_state_from(parse_body("fine-tuning job retrieve", resp));
}

std::string OpenAiBackend::chat_completion(const ChatRequest& request) {
  ordered_json body;
  body["model"] = request.model;
  body["temperature"] = request.temperature;
  body["messages"] = request.messages;
  HttpRequest req;
  req.method = "POST";
  req.url = base_url_ + "/chat/completions";
  req.content_type = "application/json";
  req.body = body.dump();
  ordered_json loggable = body;
  elide_data_urls(loggable);
  const HttpResponse resp = send_logged(req, safe_dump(loggable));
  if (resp.status < 200 || resp.status >= 300) throw upstream_error("chat completion", resp);
  const json j = parse_body("chat completion", resp);
  const auto choices = j.find("choices");
  if (choices == j.end() || !choices->is_array() || choices->empty()) return {};
  const json& message = (*choices)[0].value("message", json::object());
  const auto content = message.find("content");
  if (content == message.end() || !content->is_string()) return {};
  return content->get<std::string>();
}

// ---------------------------------------------------------------------------
// Mock backend

namespace {

bool panel_like(Rgb c) {
  const int mx = std::max({c.r, c.g, c.b});
  const int mn = std::min({c.r, c.g, c.b});
  return mx <= 100 && mx - mn <= 70 && c.b > c.r && c.b >= c.g;
}

constexpr int kMinPanelArea = 40;          // px
constexpr double kMinRectangularity = 0.6; // area / bbox area
constexpr double kPanelAreaPx = 76.0;      // ~1.7 m^2 at 0.149 m/px

struct Component {
  int area = 0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive bbox
  double sum_x = 0, sum_y = 0;
  double rectangularity() const {
    return static_cast<double>(area) / ((x1 - x0 + 1) * (y1 - y0 + 1));
  }
};

std::vector<Component> panel_components(const RgbRaster& img) {
  const int w = img.width();
  const int h = img.height();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) mask[y * w + x] = panel_like(img.at(x, y)) ? 1 : 0;
  }
  std::vector<Component> out;
  std::vector<int> stack;
  for (int start = 0; start < w * h; ++start) {
    if (mask[start] != 1) continue;
    Component c;
    c.x0 = c.x1 = start % w;
    c.y0 = c.y1 = start / w;
    mask[start] = 2;
    stack.push_back(start);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int x = p % w;
      const int y = p / w;
      ++c.area;
      c.sum_x += x;
      c.sum_y += y;
      c.x0 = std::min(c.x0, x);
      c.x1 = std::max(c.x1, x);
      c.y0 = std::min(c.y0, y);
      c.y1 = std::max(c.y1, y);
      const int nbr[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[1] < 0 || n[0] >= w || n[1] >= h) continue;
        const int q = n[1] * w + n[0];
        if (mask[q] == 1) {
          mask[q] = 2;
          stack.push_back(q);
        }
      }
    }
    out.push_back(c);
  }
  return out;
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

LocationClass cell_location(int row, int col) {
  static constexpr LocationClass kGrid[3][3] = {
      {LocationClass::TopLeft, LocationClass::Top, LocationClass::TopRight},
      {LocationClass::Left, LocationClass::Center, LocationClass::Right},
      {LocationClass::BottomLeft, LocationClass::Bottom, LocationClass::BottomRight}};
  return kGrid[row][col];
}

}  // namespace

std::string heuristic_response(const RgbRaster& tile) {
  if (tile.empty()) return target_json(false, LocationClass::NA, QuantityBin::NA, 0.0, 0.5);
  const auto components = panel_components(tile);
  const Component* largest = nullptr;
  int panel_area = 0;
  int largest_any = 0;
  for (const auto& c : components) {
    largest_any = std::max(largest_any, c.area);
    if (c.area < kMinPanelArea || c.rectangularity() < kMinRectangularity) continue;
    panel_area += c.area;
    if (largest == nullptr || c.area > largest->area) largest = &c;
  }
  if (largest == nullptr) {
    const double likelihood = round2(std::min(0.49, 0.5 * largest_any / kMinPanelArea));
    return target_json(false, LocationClass::NA, QuantityBin::NA, likelihood, 0.85);
  }
  const double cx = largest->sum_x / largest->area;
  const double cy = largest->sum_y / largest->area;
  const int col = std::min(2, static_cast<int>(3.0 * (cx + 0.5) / tile.width()));
  const int row = std::min(2, static_cast<int>(3.0 * (cy + 0.5) / tile.height()));
  const double likelihood = round2(0.5 + 0.5 * std::min(1.0, panel_area / 400.0));
  const double confidence = round2(0.6 + 0.3 * largest->rectangularity());
  return target_json(true, cell_location(row, col), quantity_bin_for_count(panel_area / kPanelAreaPx),
                     likelihood, confidence);
}

std::optional<std::string> mock_respond(const RgbRaster& tile, const FixtureMap& fixtures,
                                        bool heuristic_enabled) {
  if (auto it = fixtures.find(pixel_digest(tile)); it != fixtures.end()) return it->second;
  if (heuristic_enabled) return heuristic_response(tile);
  return std::nullopt;
}

MockBackend::MockBackend(Options options) : options_(std::move(options)) {
  if (options_.job_script.empty()) options_.job_script = {"queued", "running", "succeeded"};
}

std::string MockBackend::upload_training_file(const fs::path& jsonl) {
  if (options_.fail_upload) {
    throw Error(ErrorCode::UpstreamError, "mock upload rejected", std::nullopt, 400);
  }
  return "file-" + sha256_hex(read_text_file(jsonl)).substr(0, 24);
}

RemoteJobState MockBackend::create_job(const std::string& training_file_id, const FineTuneConfig& config) {
  if (options_.fail_create) {
    throw Error(ErrorCode::UpstreamError, "mock job create rejected", std::nullopt, 400);
  }
  std::lock_guard lock(mu_);
  last_config_ = config;
  script_pos_ = 0;
  RemoteJobState s;
  s.job_id = "ftjob-" + sha256_hex(training_file_id + config.base_model).substr(0, 24);
  s.status = options_.job_script[0];
  if (s.status == "succeeded") s.fine_tuned_model = options_.fine_tuned_model;
  return s;
}

RemoteJobState MockBackend::retrieve_job(const std::string& job_id) {
  ++retrieve_calls_;
  std::lock_guard lock(mu_);
  if (script_pos_ + 1 < options_.job_script.size()) ++script_pos_;
  RemoteJobState s;
  s.job_id = job_id;
  s.status = options_.job_script[script_pos_];
  if (s.status == "succeeded") s.fine_tuned_model = options_.fine_tuned_model;
  if (s.status == "failed") s.error_message = "mock training failure";
  return s;
}

std::optional<FineTuneConfig> MockBackend::last_job_config() const {
  std::lock_guard lock(mu_);
  return last_config_;
}

std::string MockBackend::chat_completion(const ChatRequest& request) {
  ++chat_calls_;
  const RgbRaster image = image_from_messages(request.messages);
  const std::string digest = pixel_digest(image);
  {
    std::lock_guard lock(mu_);
    if (auto it = options_.transient_failures.find(digest);
        it != options_.transient_failures.end() && it->second > 0) {
      --it->second;
      throw Error(ErrorCode::UpstreamError, "mock rate limit", std::nullopt, 429);
    }
  }
  return mock_respond(image, options_.fixtures, options_.heuristic_enabled).value_or("");
}

RgbRaster image_from_messages(const ordered_json& messages) {
  static constexpr std::string_view kPrefix = "data:image/png;base64,";
  for (const auto& m : messages) {
    if (!m.is_object() || !m.contains("content") || !m["content"].is_array()) continue;
    for (const auto& part : m["content"]) {
      if (!part.is_object() || part.value("type", "") != "image_url") continue;
      const std::string url = part.at("image_url").value("url", "");
      if (url.rfind(kPrefix, 0) != 0) {
        throw Error(ErrorCode::DecodeError, "image part is not a base64 PNG data URL");
      }
      return decode_png(base64_decode(std::string_view(url).substr(kPrefix.size())));
    }
  }
  throw Error(ErrorCode::DecodeError, "no image in chat messages");
}

// ---------------------------------------------------------------------------
// Orchestration

std::size_t validate_training_file(const fs::path& jsonl) {
  std::ifstream in(jsonl, std::ios::binary);
  if (!in) throw Error(ErrorCode::UploadFailed, "cannot open training file " + jsonl.string());
  std::string text;
  int line_no = 0;
  std::size_t records = 0;
  while (std::getline(in, text)) {
    ++line_no;
    const json rec = json::parse(text, nullptr, false);
    if (rec.is_discarded() || !rec.is_object() || !rec.contains("messages") || !rec["messages"].is_array()) {
      throw Error(ErrorCode::UploadFailed, "line is not a chat training record", line_no);
    }
    bool has_system = false, has_user = false, has_target = false;
    for (const auto& m : rec["messages"]) {
      const std::string role = m.is_object() ? m.value("role", "") : "";
      has_system |= role == "system";
      has_user |= role == "user";
      if (role == "assistant" && m.contains("content") && m["content"].is_string()) {
        const ParseResult r = parse_model_output(m["content"].get<std::string>());
        has_target = r.ok() && r.prediction().parse_path == ParsePath::Strict;
      }
    }
    if (!has_system || !has_user || !has_target) {
      throw Error(ErrorCode::UploadFailed, "record lacks a system/user message or a valid assistant target",
                  line_no);
    }
    ++records;
  }
  if (records == 0) throw Error(ErrorCode::UploadFailed, "training file is empty");
  return records;
}

namespace {

// Moves the job forward to the observed remote status, passing through the
// intermediate lifecycle states a coarse poll may have skipped.
void advance(FineTuneJob& job, const RemoteJobState& remote, Timestamp at) {
  const auto target = map_remote_status(remote.status);
  if (!target) {
    throw Error(ErrorCode::JobFailed, "job " + job.job_id() + " reported unknown status '" + remote.status + "'");
  }
  while (job.status() != *target && !is_terminal(job.status())) {
    JobStatus next;
    switch (job.status()) {
      case JobStatus::Uploaded: next = JobStatus::Queued; break;
      case JobStatus::Queued:
        if (*target == JobStatus::Failed) {
          next = JobStatus::Failed;
        } else if (*target == JobStatus::Queued) {
          return;
        } else {
          next = JobStatus::Running;
        }
        break;
      case JobStatus::Running:
        if (*target == JobStatus::Queued) return;  // stale report; keep local state
        next = *target;
        break;
      default: return;
    }
    if (next == JobStatus::Succeeded) {
      if (!remote.fine_tuned_model || remote.fine_tuned_model->empty()) {
        job.transition(JobStatus::Failed, at);
        return;
      }
      job.succeed(*remote.fine_tuned_model, at);
    } else {
      job.transition(next, at);
    }
  }
}

std::uint64_t seed_from(std::string_view text) {
  return std::stoull(sha256_hex(text).substr(0, 16), nullptr, 16);
}

}  // namespace

FineTuneJob upload_and_finetune(const fs::path& jsonl, const FineTuneConfig& config,
                                LlmBackend& backend, Clock& clock) {
  validate_config(config);
  validate_training_file(jsonl);

  std::string file_id;
  try {
    file_id = run_with_retry(config.retry, clock, 1, [&] { return backend.upload_training_file(jsonl); }).value;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::TransportError) throw;
    throw Error(ErrorCode::UploadFailed, e.what(), std::nullopt, e.status());
  }
  FineTuneJob job(file_id, clock.now());

  RemoteJobState remote;
  try {
    remote = run_with_retry(config.retry, clock, 2, [&] { return backend.create_job(file_id, config); }).value;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::TransportError) throw;
    throw Error(ErrorCode::JobCreateFailed, e.what(), std::nullopt, e.status());
  }
  if (remote.job_id.empty()) throw Error(ErrorCode::JobCreateFailed, "service returned no job id");
  job.set_job_id(remote.job_id);

  const auto started = clock.monotonic();
  const auto timeout = std::chrono::duration_cast<std::chrono::milliseconds>(config.job_timeout);
  const auto poll = std::chrono::duration_cast<std::chrono::milliseconds>(config.poll_interval);
  const std::uint64_t seed = seed_from(remote.job_id);
  for (;;) {
    advance(job, remote, clock.now());
    if (job.status() == JobStatus::Succeeded) return job;
    if (job.status() == JobStatus::Failed) {
      const std::string reason = remote.error_message.empty() ? "" : ": " + remote.error_message;
      throw FineTuneError(ErrorCode::JobFailed, "fine-tuning job " + job.job_id() + " failed" + reason, job);
    }
    const auto elapsed = clock.monotonic() - started;
    if (elapsed >= timeout) {
      if (job.status() == JobStatus::Uploaded) job.transition(JobStatus::Queued, clock.now());
      job.transition(JobStatus::TimedOut, clock.now());
      throw FineTuneError(ErrorCode::JobTimeout,
                          "fine-tuning job " + job.job_id() + " did not finish within " +
                              std::to_string(config.job_timeout.count()) + " s",
                          job);
    }
    clock.sleep_for(std::max(std::chrono::milliseconds(1), std::min(poll, timeout - elapsed)));
    remote = run_with_retry(config.retry, clock, seed, [&] { return backend.retrieve_job(job.job_id()); }).value;
  }
}

InferResult infer_tile(const Tile& tile, const std::string& model_id, const PromptTemplate& tmpl,
                       LlmBackend& backend, Clock& clock, const RetryPolicy& retry) {
  if (model_id.empty()) throw Error(ErrorCode::InvalidArgument, "model id is empty");
  ChatRequest req;
  req.model = model_id;
  req.temperature = 0.0;
  req.messages = ordered_json::array(
      {system_message(build_system_prompt(tmpl)), user_message(build_user_payload(tile, tmpl))});
  auto attempted = run_with_retry(retry, clock, seed_from(tile.tile_id),
                                  [&] { return backend.chat_completion(req); });
  if (attempted.value.empty()) {
    throw Error(ErrorCode::EmptyCompletion, "no completion for tile " + tile.tile_id);
  }
  return {std::move(attempted.value), attempted.attempts};
}

std::map<std::string, TileOutcome> batch_infer(std::span<const Tile> tiles, const std::string& model_id,
                                               const PromptTemplate& tmpl, LlmBackend& backend,
                                               const BatchOptions& options, Clock& clock) {
  if (options.parallelism < 1) throw Error(ErrorCode::InvalidArgument, "parallelism must be >= 1");
  TokenBucket limiter(clock, options.requests_per_second, std::max(1, options.parallelism));
  std::vector<TileOutcome> outcomes(tiles.size());

  // Attempts are counted here so rate limiting applies to every retry too.
  parallel_for(tiles.size(), options.parallelism, [&](std::size_t i) {
    TileOutcome& out = outcomes[i];
    try {
      RetryPolicy single = options.retry;
      single.max_attempts = 1;
      auto attempted = run_with_retry(options.retry, clock, seed_from(tiles[i].tile_id), [&] {
        limiter.acquire();
        ++out.attempts;
        return infer_tile(tiles[i], model_id, tmpl, backend, clock, single).raw_text;
      });
      out.raw_text = std::move(attempted.value);
    } catch (const Error& e) {
      out.error_code = e.code();
      out.error_message = e.what();
    } catch (const std::exception& e) {
      out.error_code = ErrorCode::TransportError;
      out.error_message = e.what();
    }
  });

  std::map<std::string, TileOutcome> result;
  for (std::size_t i = 0; i < tiles.size(); ++i) result.insert_or_assign(tiles[i].tile_id, std::move(outcomes[i]));
  return result;
}

double lm_cross_entropy(const TokenLossInput& input) {
  if (input.sequences.empty()) throw Error(ErrorCode::InvalidArgument, "no sequences");
  double total = 0.0;
  for (const auto& seq : input.sequences) {
    if (seq.empty()) throw Error(ErrorCode::InvalidArgument, "empty token sequence");
    double seq_sum = 0.0;
    for (double p : seq) {
      if (!(p > 0.0 && p <= 1.0)) {
        throw Error(ErrorCode::InvalidProbability, "token probability " + format_double(p) + " outside (0, 1]");
      }
      seq_sum += std::log(p);
    }
    total += seq_sum / static_cast<double>(seq.size());
  }
  return -total / static_cast<double>(input.sequences.size());
}

}  // namespace pvatlas
