#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvatlas/core/clock.hpp"
#include "pvatlas/core/concurrency.hpp"
#include "pvatlas/core/http.hpp"
#include "pvatlas/core/raster.hpp"
#include "pvatlas/geo_ingest.hpp"

namespace pvatlas {

inline constexpr int kSceneZoom = 20;
inline constexpr int kSceneSizePx = 400;
inline constexpr int kTileGrid = 4;
inline constexpr int kTileSizePx = kSceneSizePx / kTileGrid;
inline constexpr double kMaxMercatorLat = 85.05113;

struct LatLon {
  double lat = 0;
  double lon = 0;
};

/// Parameters of one static-map request. Pipeline scenes always use the
/// defaults below.
struct SceneRequest {
  double center_lat = 0;
  double center_lon = 0;
  int zoom = kSceneZoom;
  int width_px = kSceneSizePx;
  int height_px = kSceneSizePx;
  std::string maptype = "satellite";

  /// Canonical text of the request with coordinates rounded to 1e-6 degrees.
  std::string cache_key() const;
  /// First 16 hex digits of sha256(cache_key()).
  std::string scene_id() const;
  std::map<std::string, std::string> provider_params() const;
};

SceneRequest scene_request_for(const PvSiteRecord& site);

struct SceneImage {
  std::string scene_id;
  double center_lat = 0;
  double center_lon = 0;
  int zoom = kSceneZoom;
  int width_px = 0;
  int height_px = 0;
  RgbRaster pixels;
  Timestamp fetched_at{};
  std::map<std::string, std::string> provider_params;
};

struct Tile {
  std::string tile_id;  // "<scene_id>_r<row>c<col>"
  std::string scene_id;
  std::string region_name;  // carried through from the site; may be empty
  int row = 0;
  int col = 0;
  RgbRaster pixels;
  double geo_center_lat = 0;
  double geo_center_lon = 0;
};

std::string make_tile_id(const std::string& scene_id, int row, int col);

/// Source of encoded scene bytes.
class ImageryProvider {
 public:
  virtual ~ImageryProvider() = default;
  /// Returns the encoded image. Throws Error{TransportError|UpstreamError}.
  virtual std::vector<std::uint8_t> fetch(const SceneRequest& request, const std::string& api_key) = 0;
};

/// Static-Maps-compatible HTTP endpoint (center, zoom, size, maptype, key).
class StaticMapsProvider final : public ImageryProvider {
 public:
  StaticMapsProvider(HttpClient& http, std::string base_url)
      : http_(http), base_url_(std::move(base_url)) {}
  std::vector<std::uint8_t> fetch(const SceneRequest& request, const std::string& api_key) override;
  std::string request_url(const SceneRequest& request, const std::string& api_key) const;

 private:
  HttpClient& http_;
  std::string base_url_;
};

/// Directory of "<scene_id>.png" files; a missing file maps to HTTP 404.
class FixtureDirectoryProvider final : public ImageryProvider {
 public:
  explicit FixtureDirectoryProvider(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::vector<std::uint8_t> fetch(const SceneRequest& request, const std::string& api_key) override;

 private:
  std::filesystem::path dir_;
};

/// Deterministic synthetic rooftops: a pure function of (seed, scene_id).
/// Some roofs carry dark-blue panel blocks.
class SyntheticProvider final : public ImageryProvider {
 public:
  explicit SyntheticProvider(std::uint64_t seed) : seed_(seed) {}
  std::vector<std::uint8_t> fetch(const SceneRequest& request, const std::string& api_key) override;
  RgbRaster render(const SceneRequest& request) const;

 private:
  std::uint64_t seed_;
};

/// On-disk scene cache: <dir>/<scene_id>.png plus <scene_id>.json metadata.
/// Concurrent readers; writers are serialized per key.
class SceneCache {
 public:
  explicit SceneCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::optional<SceneImage> get(const std::string& scene_id) const;
  void put(const SceneImage& scene);
  std::mutex& key_mutex(const std::string& scene_id);

 private:
  std::filesystem::path dir_;
  std::mutex table_mu_;
  std::map<std::string, std::unique_ptr<std::mutex>> key_mu_;
};

struct FetchOutcome {
  SceneImage scene;
  bool cache_hit = false;
};

/// Cache lookup, then provider fetch (through `limiter` when given), PNG
/// decode and cache fill. Throws Error{TransportError|UpstreamError|DecodeError}.
FetchOutcome fetch_scene(const PvSiteRecord& site, const std::string& api_key,
                         ImageryProvider& provider, SceneCache& cache, Clock& clock,
                         TokenBucket* limiter = nullptr);

/// 16 tiles in row-major order. Throws Error{IndivisibleScene}.
std::vector<Tile> slice_scene(const SceneImage& scene);

/// Inverse of slice_scene for a complete row-major tile set.
RgbRaster assemble_tiles(std::span<const Tile> tiles);

/// Web Mercator (256 px tiles) world pixel coordinates at `zoom`.
struct WorldPixel {
  double x = 0;
  double y = 0;
};
WorldPixel latlon_to_world_px(double lat, double lon, int zoom);
LatLon world_px_to_latlon(double x, double y, int zoom);

/// Geographic center of tile (row, col): the scene center shifted by the
/// tile's pixel offset in Web Mercator space at the scene zoom.
LatLon tile_geo_center(const SceneImage& scene, int row, int col);

/// 156543.03392 * cos(lat) / 2^zoom. Throws Error{LatitudeOutOfRange}.
double ground_resolution(double lat, int zoom);

/// Sliced tiles grouped by region, persisted as
/// <root>/<region>/<tile_id>.png plus <root>/<region>/index.json.
class TileStore {
 public:
  void add(Tile tile);
  const Tile* find(const std::string& tile_id) const;
  std::vector<std::string> tile_ids(const std::string& region_name) const;
  std::vector<std::string> regions() const;
  std::size_t size() const { return tiles_.size(); }

  void save(const std::filesystem::path& root) const;
  /// Loads every region under root (missing root -> empty store).
  static TileStore load(const std::filesystem::path& root);

 private:
  std::map<std::string, Tile> tiles_;
};

void to_json(nlohmann::json& j, const SceneImage& s);  // metadata only

}  // namespace pvatlas
