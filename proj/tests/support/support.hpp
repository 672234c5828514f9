#pragma once

#include <cstdlib>
#include <deque>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pvatlas/core/error.hpp"
#include "pvatlas/core/http.hpp"
#include "pvatlas/prompting.hpp"
#include "pvatlas/schema.hpp"

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "pvatlas-test-XXXXXX").string();
    if (mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

// Replays a script of responses (or transport failures) and records requests.
class ScriptedHttpClient final : public pvatlas::HttpClient {
 public:
  struct TransportFailure {};
  using Step = std::variant<pvatlas::HttpResponse, TransportFailure>;

  void push(int status, std::string body, std::string content_type = "application/json") {
    steps_.push_back(pvatlas::HttpResponse{status, std::move(body), std::move(content_type)});
  }
  void push_transport_failure() { steps_.push_back(TransportFailure{}); }

  pvatlas::HttpResponse send(const pvatlas::HttpRequest& request) override {
    std::lock_guard lock(mu_);
    requests.push_back(request);
    if (steps_.empty()) throw std::runtime_error("scripted client exhausted at " + request.url);
    Step step = std::move(steps_.front());
    steps_.pop_front();
    if (std::holds_alternative<TransportFailure>(step)) {
      throw pvatlas::Error(pvatlas::ErrorCode::TransportError, "scripted transport failure");
    }
    return std::get<pvatlas::HttpResponse>(std::move(step));
  }

  std::vector<pvatlas::HttpRequest> requests;

 private:
  std::mutex mu_;
  std::deque<Step> steps_;
};

inline pvatlas::TileLabel label(const std::string& id, bool present,
                                pvatlas::LocationClass loc = pvatlas::LocationClass::NA,
                                pvatlas::QuantityBin qty = pvatlas::QuantityBin::NA) {
  pvatlas::TileLabel l;
  l.tile_id = id;
  l.present = present;
  if (present && loc == pvatlas::LocationClass::NA) loc = pvatlas::LocationClass::Center;
  if (present && qty == pvatlas::QuantityBin::NA) qty = pvatlas::QuantityBin::OneToFive;
  l.location = loc;
  l.quantity = qty;
  l.annotator_id = "tester";
  l.labeled_at = pvatlas::parse_utc("2024-06-01T12:00:00Z");
  return l;
}

inline pvatlas::ModelPrediction prediction(bool present, pvatlas::LocationClass loc, pvatlas::QuantityBin qty,
                                           double likelihood = 0.5, double confidence = 0.5) {
  pvatlas::ModelPrediction p;
  p.present = present;
  p.location = loc;
  p.quantity = qty;
  p.likelihood = likelihood;
  p.confidence = confidence;
  return p;
}

inline pvatlas::PredictionError parse_failure() {
  pvatlas::PredictionError e;
  e.kind = pvatlas::PredictionErrorKind::MalformedOutput;
  e.message = "synthetic failure";
  return e;
}

}  // namespace testsupport
