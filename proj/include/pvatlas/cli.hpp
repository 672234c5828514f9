#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvatlas/core/clock.hpp"
#include "pvatlas/dataset.hpp"
#include "pvatlas/geo_ingest.hpp"
#include "pvatlas/imagery.hpp"
#include "pvatlas/llm_gateway.hpp"

namespace pvatlas {

struct OverpassConfig {
  std::string endpoint = "https://overpass-api.de/api/interpreter";
  /// When set, <fixture_dir>/<region>.json replaces the live endpoint.
  std::filesystem::path fixture_dir;
  TagFilter tags;  // config: [["key", "value"], ...]
};

struct ImageryConfig {
  std::string provider = "static_maps";  // static_maps | fixture | synthetic
  std::string base_url = "https://maps.googleapis.com/maps/api/staticmap";
  std::string key_env = "GOOGLE_MAPS_API_KEY";
  std::filesystem::path fixture_dir;
  int parallelism = 4;
  double requests_per_second = 10;
};

struct LlmConfig {
  std::string backend = "mock";  // remote | mock
  std::string base_url = "https://api.openai.com/v1";
  std::string key_env = "OPENAI_API_KEY";
  /// Mock only: JSONL of {"pixel_digest": ..., "response": ...}.
  std::filesystem::path fixtures;
  bool heuristic = true;  // mock only
};

struct InferenceConfig {
  int parallelism = 4;
  double requests_per_second = 0;
};

struct PipelineConfig {
  std::filesystem::path workdir;
  std::vector<RegionSpec> regions;
  std::string source_region;  // defaults to the fine-tune region
  OverpassConfig overpass;
  ImageryConfig imagery;
  double dedupe_radius_m = 25.0;
  LlmConfig llm;
  FineTuneConfig finetune;
  InferenceConfig inference;
  std::uint64_t seed = 0;
  int ece_bins = 10;

  const RegionSpec& region(const std::string& name) const;
};

/// Relative paths resolve against `base_dir`. Throws Error{ConfigError}.
PipelineConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
PipelineConfig load_config(const std::filesystem::path& path);

/// Reads a secret from the environment. Throws Error{ConfigError}.
std::string resolve_secret(const std::string& env_name, const std::string& purpose);

/// Mock fixture file: pixel digest -> response text.
FixtureMap load_fixture_map(const std::filesystem::path& path);

/// Entry point behind the pv-atlas binary; args exclude the program name.
/// Exit codes: 0 ok, 1 operational error, 2 usage, 3 configuration.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Local labeling API over a tile store and a label store:
///   GET  /api/tiles?status=unlabeled|labeled|all&region=R&page=P&page_size=S
///   GET  /api/tiles/{id}/image.png
///   POST /api/tiles/{id}/label
///   GET  /api/progress
///   GET  /  (static assets when a directory is given)
class AnnotationServer {
 public:
  AnnotationServer(const TileStore& tiles, LabelStore& labels, Clock& clock,
                   std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~AnnotationServer();
  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  /// Port 0 picks a free port. Returns the bound port; throws Error{PortInUse}.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void serve();
  void stop();
  /// Waits until serve() is accepting connections.
  void wait_until_ready();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace pvatlas
