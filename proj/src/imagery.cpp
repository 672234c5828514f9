#include "pvatlas/imagery.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/error.hpp"
#include "pvatlas/core/files.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pvatlas {

namespace {

std::string fixed6(double v) {
  double r = std::round(v * 1e6) / 1e6;
  if (r == 0.0) r = 0.0;  // no "-0.000000"
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", r);
  return buf;
}

}  // namespace

std::string SceneRequest::cache_key() const {
  return "lat=" + fixed6(center_lat) + ";lon=" + fixed6(center_lon) +
         ";zoom=" + std::to_string(zoom) + ";size=" + std::to_string(width_px) + "x" +
         std::to_string(height_px) + ";maptype=" + maptype;
}

std::string SceneRequest::scene_id() const { return sha256_hex(cache_key()).substr(0, 16); }

std::map<std::string, std::string> SceneRequest::provider_params() const {
  return {{"center", fixed6(center_lat) + "," + fixed6(center_lon)},
          {"zoom", std::to_string(zoom)},
          {"size", std::to_string(width_px) + "x" + std::to_string(height_px)},
          {"maptype", maptype},
          {"format", "png"}};
}

SceneRequest scene_request_for(const PvSiteRecord& site) {
  if (!(std::abs(site.lat) < kMaxMercatorLat) || !(std::abs(site.lon) <= 180.0)) {
    throw Error(ErrorCode::InvalidArgument, "site " + site.site_id + " has invalid coordinates");
  }
  SceneRequest req;
  req.center_lat = site.lat;
  req.center_lon = site.lon;
  return req;
}

std::string make_tile_id(const std::string& scene_id, int row, int col) {
  return scene_id + "_r" + std::to_string(row) + "c" + std::to_string(col);
}

std::string StaticMapsProvider::request_url(const SceneRequest& request,
                                            const std::string& api_key) const {
  std::string url = base_url_;
  url += (url.find('?') == std::string::npos) ? '?' : '&';
  bool first = true;
  for (const auto& [k, v] : request.provider_params()) {
    if (!first) url += '&';
    first = false;
    url += k + "=" + url_encode(v);
  }
  url += "&key=" + url_encode(api_key);
  return url;
}

std::vector<std::uint8_t> StaticMapsProvider::fetch(const SceneRequest& request,
                                                    const std::string& api_key) {
  if (api_key.empty()) throw Error(ErrorCode::InvalidArgument, "static maps API key is empty");
  HttpRequest req;
  req.url = request_url(request, api_key);
  const HttpResponse resp = http_.send(req);
  if (resp.status < 200 || resp.status >= 300) {
    throw Error(ErrorCode::UpstreamError,
                "static maps returned HTTP " + std::to_string(resp.status) + " for scene " +
                    request.scene_id(),
                std::nullopt, resp.status);
  }
  return {resp.body.begin(), resp.body.end()};
}

std::vector<std::uint8_t> FixtureDirectoryProvider::fetch(const SceneRequest& request,
                                                          const std::string&) {
  const fs::path p = dir_ / (request.scene_id() + ".png");
  if (!fs::exists(p)) {
    throw Error(ErrorCode::UpstreamError, "no fixture for scene " + request.scene_id(),
                std::nullopt, 404);
  }
  return read_binary_file(p);
}

RgbRaster SyntheticProvider::render(const SceneRequest& request) const {
  const std::string digest = sha256_hex(request.cache_key());
  std::uint64_t mix = seed_ * 0x9E3779B97F4A7C15ULL;
  for (std::size_t i = 0; i < 16; ++i) {
    mix = (mix << 4) ^ (mix >> 60) ^ static_cast<std::uint64_t>(digest[i]);
  }
  std::mt19937_64 rng(mix);
  // Raw engine output only: std distributions differ across standard libraries.
  const auto uniform = [&rng](int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };
  const auto clamp8 = [](int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); };

  const int w = request.width_px;
  const int h = request.height_px;
  RgbRaster img(w, h);
  const Rgb ground{static_cast<std::uint8_t>(uniform(95, 125)),
                   static_cast<std::uint8_t>(uniform(110, 140)),
                   static_cast<std::uint8_t>(uniform(80, 100))};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int n = uniform(-10, 10);
      img.set(x, y, {clamp8(ground.r + n), clamp8(ground.g + n), clamp8(ground.b + n)});
    }
  }

  const int roofs = uniform(5, 9);
  for (int i = 0; i < roofs; ++i) {
    const int rw = uniform(w / 10, w / 3);
    const int rh = uniform(h / 10, h / 3);
    const int rx = uniform(0, w - rw);
    const int ry = uniform(0, h - rh);
    const bool tile_roof = uniform(0, 2) == 0;
    const Rgb roof = tile_roof ? Rgb{185, 110, 80} : Rgb{200, 200, 195};
    for (int y = ry; y < ry + rh; ++y) {
      for (int x = rx; x < rx + rw; ++x) {
        const int n = uniform(-6, 6);
        img.set(x, y, {clamp8(roof.r + n), clamp8(roof.g + n), clamp8(roof.b + n)});
      }
    }
    if (uniform(0, 1) == 0 && rw > 16 && rh > 12) {
      const int pw = uniform(8, std::min(40, rw - 4));
      const int ph = uniform(6, std::min(30, rh - 4));
      const int px = rx + uniform(2, rw - pw - 2);
      const int py = ry + uniform(2, rh - ph - 2);
      for (int y = py; y < py + ph; ++y) {
        for (int x = px; x < px + pw; ++x) {
          const int n = uniform(-4, 4);
          img.set(x, y, {clamp8(30 + n), clamp8(42 + n), clamp8(80 + n)});
        }
      }
    }
  }
  return img;
}

std::vector<std::uint8_t> SyntheticProvider::fetch(const SceneRequest& request,
                                                   const std::string&) {
  return encode_png(render(request));
}

std::mutex& SceneCache::key_mutex(const std::string& scene_id) {
  std::lock_guard lock(table_mu_);
  auto& slot = key_mu_[scene_id];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

std::optional<SceneImage> SceneCache::get(const std::string& scene_id) const {
  const fs::path png = dir_ / (scene_id + ".png");
  const fs::path meta = dir_ / (scene_id + ".json");
  if (!fs::exists(png) || !fs::exists(meta)) return std::nullopt;
  const json j = json::parse(read_text_file(meta));
  SceneImage s;
  s.scene_id = j.at("scene_id").get<std::string>();
  s.center_lat = j.at("center_lat").get<double>();
  s.center_lon = j.at("center_lon").get<double>();
  s.zoom = j.at("zoom").get<int>();
  s.width_px = j.at("width_px").get<int>();
  s.height_px = j.at("height_px").get<int>();
  s.fetched_at = parse_utc(j.at("fetched_at").get<std::string>());
  s.provider_params = j.at("provider_params").get<std::map<std::string, std::string>>();
  s.pixels = decode_png(read_binary_file(png));
  if (s.pixels.width() != s.width_px || s.pixels.height() != s.height_px) {
    throw Error(ErrorCode::DecodeError, "cached scene " + scene_id + " has wrong dimensions");
  }
  return s;
}

void SceneCache::put(const SceneImage& scene) {
  write_file_atomic(dir_ / (scene.scene_id + ".png"), encode_png(scene.pixels));
  // Sidecar last: get() requires both files.
  write_file_atomic(dir_ / (scene.scene_id + ".json"), json(scene).dump(2) + "\n");
}

void to_json(json& j, const SceneImage& s) {
  j = json{{"scene_id", s.scene_id},
           {"center_lat", s.center_lat},
           {"center_lon", s.center_lon},
           {"zoom", s.zoom},
           {"width_px", s.width_px},
           {"height_px", s.height_px},
           {"fetched_at", format_utc(s.fetched_at)},
           {"provider_params", s.provider_params}};
}

FetchOutcome fetch_scene(const PvSiteRecord& site, const std::string& api_key,
                         ImageryProvider& provider, SceneCache& cache, Clock& clock,
                         TokenBucket* limiter) {
  const SceneRequest req = scene_request_for(site);
  const std::string id = req.scene_id();
  std::lock_guard key_lock(cache.key_mutex(id));
  if (auto hit = cache.get(id)) return {std::move(*hit), true};

  if (limiter != nullptr) limiter->acquire();
  const std::vector<std::uint8_t> bytes = provider.fetch(req, api_key);

  SceneImage scene;
  scene.scene_id = id;
  scene.center_lat = req.center_lat;
  scene.center_lon = req.center_lon;
  scene.zoom = req.zoom;
  scene.pixels = decode_png(bytes);
  scene.width_px = scene.pixels.width();
  scene.height_px = scene.pixels.height();
  scene.fetched_at = clock.now();
  scene.provider_params = req.provider_params();
  cache.put(scene);
  return {std::move(scene), false};
}

std::vector<Tile> slice_scene(const SceneImage& scene) {
  const int w = scene.pixels.width();
  const int h = scene.pixels.height();
  if (w == 0 || h == 0 || w % kTileGrid != 0 || h % kTileGrid != 0) {
    throw Error(ErrorCode::IndivisibleScene, "scene " + scene.scene_id + " is " +
                                                 std::to_string(w) + "x" + std::to_string(h) +
                                                 ", not divisible into a 4x4 grid");
  }
  const int tw = w / kTileGrid;
  const int th = h / kTileGrid;
  std::vector<Tile> tiles;
  tiles.reserve(kTileGrid * kTileGrid);
  for (int row = 0; row < kTileGrid; ++row) {
    for (int col = 0; col < kTileGrid; ++col) {
      Tile t;
      t.tile_id = make_tile_id(scene.scene_id, row, col);
      t.scene_id = scene.scene_id;
      t.row = row;
      t.col = col;
      t.pixels = scene.pixels.crop(col * tw, row * th, tw, th);
      const LatLon c = tile_geo_center(scene, row, col);
      t.geo_center_lat = c.lat;
      t.geo_center_lon = c.lon;
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

RgbRaster assemble_tiles(std::span<const Tile> tiles) {
  if (tiles.size() != kTileGrid * kTileGrid) {
    throw Error(ErrorCode::InvalidArgument, "need exactly 16 tiles to assemble a scene");
  }
  const int tw = tiles[0].pixels.width();
  const int th = tiles[0].pixels.height();
  RgbRaster out(tw * kTileGrid, th * kTileGrid);
  for (const auto& t : tiles) {
    if (t.pixels.width() != tw || t.pixels.height() != th) {
      throw Error(ErrorCode::InvalidArgument, "tiles differ in size");
    }
    out.blit(t.pixels, t.col * tw, t.row * th);
  }
  return out;
}

WorldPixel latlon_to_world_px(double lat, double lon, int zoom) {
  const double world = 256.0 * std::ldexp(1.0, zoom);
  const double s = std::sin(lat * std::numbers::pi / 180.0);
  return {(lon + 180.0) / 360.0 * world,
          (0.5 - std::log((1.0 + s) / (1.0 - s)) / (4.0 * std::numbers::pi)) * world};
}

LatLon world_px_to_latlon(double x, double y, int zoom) {
  const double world = 256.0 * std::ldexp(1.0, zoom);
  const double lon = x / world * 360.0 - 180.0;
  const double merc = std::numbers::pi * (1.0 - 2.0 * y / world);
  const double lat = std::atan(std::sinh(merc)) * 180.0 / std::numbers::pi;
  return {lat, lon};
}

LatLon tile_geo_center(const SceneImage& scene, int row, int col) {
  if (row < 0 || row >= kTileGrid || col < 0 || col >= kTileGrid) {
    throw Error(ErrorCode::InvalidArgument, "tile row/col outside [0,3]");
  }
  const double w = scene.width_px > 0 ? scene.width_px : scene.pixels.width();
  const double h = scene.height_px > 0 ? scene.height_px : scene.pixels.height();
  const double tw = w / kTileGrid;
  const double th = h / kTileGrid;
  const double dx = col * tw + tw / 2 - w / 2;
  const double dy = row * th + th / 2 - h / 2;
  const WorldPixel c = latlon_to_world_px(scene.center_lat, scene.center_lon, scene.zoom);
  return world_px_to_latlon(c.x + dx, c.y + dy, scene.zoom);
}

double ground_resolution(double lat, int zoom) {
  if (!(std::abs(lat) < kMaxMercatorLat)) {
    throw Error(ErrorCode::LatitudeOutOfRange, "latitude outside the Web Mercator range");
  }
  return 156543.03392 * std::cos(lat * std::numbers::pi / 180.0) / std::ldexp(1.0, zoom);
}

void TileStore::add(Tile tile) {
  auto id = tile.tile_id;
  tiles_.insert_or_assign(std::move(id), std::move(tile));
}

const Tile* TileStore::find(const std::string& tile_id) const {
  auto it = tiles_.find(tile_id);
  return it == tiles_.end() ? nullptr : &it->second;
}

std::vector<std::string> TileStore::tile_ids(const std::string& region_name) const {
  std::vector<std::string> ids;
  for (const auto& [id, t] : tiles_) {
    if (t.region_name == region_name) ids.push_back(id);
  }
  return ids;
}

std::vector<std::string> TileStore::regions() const {
  std::vector<std::string> out;
  for (const auto& [id, t] : tiles_) {
    if (std::find(out.begin(), out.end(), t.region_name) == out.end()) {
      out.push_back(t.region_name);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void TileStore::save(const fs::path& root) const {
  std::map<std::string, json> index;
  for (const auto& [id, t] : tiles_) {
    const fs::path dir = root / t.region_name;
    const fs::path png = dir / (id + ".png");
    if (!fs::exists(png)) write_file_atomic(png, encode_png(t.pixels));
    auto& arr = index[t.region_name];
    if (arr.is_null()) arr = json::array();
    arr.push_back({{"tile_id", id},
                   {"scene_id", t.scene_id},
                   {"row", t.row},
                   {"col", t.col},
                   {"geo_center_lat", t.geo_center_lat},
                   {"geo_center_lon", t.geo_center_lon}});
  }
  for (const auto& [region, arr] : index) {
    write_file_atomic(root / region / "index.json", arr.dump(2) + "\n");
  }
}

TileStore TileStore::load(const fs::path& root) {
  TileStore store;
  if (!fs::exists(root)) return store;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "index.json")) {
      dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    const json arr = json::parse(read_text_file(dir / "index.json"));
    for (const auto& j : arr) {
      Tile t;
      t.tile_id = j.at("tile_id").get<std::string>();
      t.scene_id = j.at("scene_id").get<std::string>();
      t.region_name = dir.filename().string();
      t.row = j.at("row").get<int>();
      t.col = j.at("col").get<int>();
      t.geo_center_lat = j.at("geo_center_lat").get<double>();
      t.geo_center_lon = j.at("geo_center_lon").get<double>();
      t.pixels = decode_png(read_binary_file(dir / (t.tile_id + ".png")));
      store.add(std::move(t));
    }
  }
  return store;
}

}  // namespace pvatlas
