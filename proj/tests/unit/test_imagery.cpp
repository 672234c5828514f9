#include <doctest.h>

#include <cmath>
#include <numbers>

#include "pvatlas/core/encoding.hpp"
#include "pvatlas/imagery.hpp"
#include "support.hpp"

using namespace pvatlas;

namespace {

// Independent Web Mercator forward projection.
WorldPixel mercator_oracle(double lat, double lon, int zoom) {
  const double size = 256.0 * std::pow(2.0, zoom);
  const double s = std::sin(lat * std::numbers::pi / 180.0);
  return {(lon + 180.0) / 360.0 * size,
          (0.5 - std::log((1 + s) / (1 - s)) / (4 * std::numbers::pi)) * size};
}

RgbRaster patterned(int w, int h, std::uint32_t seed) {
  RgbRaster r(w, h);
  std::uint32_t x = seed * 2654435761u + 1;
  for (int y = 0; y < h; ++y) {
    for (int c = 0; c < w; ++c) {
      x ^= x << 13;
      x ^= x >> 17;
      x ^= x << 5;
      r.set(c, y, {static_cast<std::uint8_t>(x), static_cast<std::uint8_t>(x >> 8), static_cast<std::uint8_t>(x >> 16)});
    }
  }
  return r;
}

SceneImage scene_of(RgbRaster px, double lat = 33.74, double lon = -117.87) {
  SceneImage s;
  s.scene_id = "0123456789abcdef";
  s.center_lat = lat;
  s.center_lon = lon;
  s.width_px = px.width();
  s.height_px = px.height();
  s.pixels = std::move(px);
  return s;
}

PvSiteRecord site_at(double lat, double lon) {
  PvSiteRecord s;
  s.site_id = "node/7";
  s.lat = lat;
  s.lon = lon;
  s.region_name = "santa-ana";
  return s;
}

}  // namespace

TEST_CASE("ground resolution") {
  CHECK(ground_resolution(0, 20) == doctest::Approx(156543.03392 / 1048576.0).epsilon(1e-12));
  CHECK(ground_resolution(0, 20) == doctest::Approx(0.14929).epsilon(1e-4));
  CHECK(ground_resolution(60, 20) == doctest::Approx(ground_resolution(0, 20) / 2).epsilon(1e-12));
  CHECK(ground_resolution(0, 0) == doctest::Approx(156543.03392));
  CHECK_THROWS_AS(ground_resolution(86, 20), Error);
  CHECK_THROWS_AS(ground_resolution(-85.1, 20), Error);
}

TEST_CASE("web mercator projection matches the closed form and inverts") {
  for (double lat : {-80.0, -33.86, 0.0, 33.74, 51.75, 84.9}) {
    for (double lon : {-179.5, -117.87, 0.0, 13.4, 151.2}) {
      for (int z : {0, 10, 20}) {
        const WorldPixel got = latlon_to_world_px(lat, lon, z);
        const WorldPixel want = mercator_oracle(lat, lon, z);
        CHECK(got.x == doctest::Approx(want.x).epsilon(1e-12));
        CHECK(got.y == doctest::Approx(want.y).epsilon(1e-12));
        const LatLon back = world_px_to_latlon(got.x, got.y, z);
        CHECK(back.lat == doctest::Approx(lat).epsilon(1e-12));
        CHECK(back.lon == doctest::Approx(lon).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("slice windows and tile ids") {
  const SceneImage scene = scene_of(patterned(400, 400, 1));
  const auto tiles = slice_scene(scene);
  REQUIRE(tiles.size() == 16);
  const Tile& t = tiles[1 * 4 + 2];
  CHECK(t.tile_id == "0123456789abcdef_r1c2");
  CHECK(t.row == 1);
  CHECK(t.col == 2);
  CHECK(t.pixels.width() == 100);
  CHECK(t.pixels == scene.pixels.crop(200, 100, 100, 100));
  CHECK(t.pixels.at(0, 0) == scene.pixels.at(200, 100));
  CHECK(t.pixels.at(99, 99) == scene.pixels.at(299, 199));
  CHECK(make_tile_id("abc", 3, 0) == "abc_r3c0");
}

TEST_CASE("slice then assemble is the identity") {
  for (std::uint32_t seed = 0; seed < 20; ++seed) {
    const SceneImage scene = scene_of(patterned(400, 400, seed));
    const auto tiles = slice_scene(scene);
    CHECK(assemble_tiles(tiles) == scene.pixels);
    CHECK(pixel_digest(assemble_tiles(tiles)) == pixel_digest(scene.pixels));
  }
}

TEST_CASE("non-divisible scenes are rejected") {
  try {
    slice_scene(scene_of(RgbRaster(401, 400)));
    FAIL("401x400 accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IndivisibleScene);
  }
  CHECK_THROWS_AS(slice_scene(scene_of(RgbRaster(400, 402))), Error);
  CHECK(slice_scene(scene_of(RgbRaster(800, 800))).at(5).pixels.width() == 200);
}

TEST_CASE("tile geo centers follow the pixel offset") {
  const SceneImage scene = scene_of(RgbRaster(400, 400));
  const WorldPixel c = mercator_oracle(scene.center_lat, scene.center_lon, 20);
  for (int r = 0; r < 4; ++r) {
    for (int col = 0; col < 4; ++col) {
      const LatLon got = tile_geo_center(scene, r, col);
      const WorldPixel want_px{c.x + (col * 100 + 50 - 200), c.y + (r * 100 + 50 - 200)};
      const WorldPixel got_px = mercator_oracle(got.lat, got.lon, 20);
      CHECK(got_px.x == doctest::Approx(want_px.x).epsilon(1e-9));
      CHECK(got_px.y == doctest::Approx(want_px.y).epsilon(1e-9));
    }
  }
  // the four inner tiles straddle the scene center
  double lon_sum = 0;
  double lat_sum = 0;
  for (auto [r, col] : {std::pair{1, 1}, {1, 2}, {2, 1}, {2, 2}}) {
    const LatLon g = tile_geo_center(scene, r, col);
    lat_sum += g.lat;
    lon_sum += g.lon;
  }
  CHECK(lon_sum / 4 == doctest::Approx(scene.center_lon).epsilon(1e-12));
  CHECK(lat_sum / 4 == doctest::Approx(scene.center_lat).epsilon(1e-9));
  // one tile step is 100 px of ground; haversine uses the mean radius and
  // Mercator the equatorial one, hence the ratio
  const LatLon a = tile_geo_center(scene, 0, 0);
  const LatLon b = tile_geo_center(scene, 0, 1);
  CHECK(haversine_m(a.lat, a.lon, b.lat, b.lon) ==
        doctest::Approx(100 * ground_resolution(a.lat, 20) * 6371008.8 / 6378137.0).epsilon(1e-6));
}

TEST_CASE("scene request identity") {
  const SceneRequest a = scene_request_for(site_at(33.7400001, -117.87));
  const SceneRequest b = scene_request_for(site_at(33.7400002, -117.87));
  const SceneRequest c = scene_request_for(site_at(33.7410000, -117.87));
  CHECK(a.scene_id() == b.scene_id());
  CHECK(a.scene_id() != c.scene_id());
  CHECK(a.scene_id().size() == 16);
  CHECK(a.scene_id() == sha256_hex(a.cache_key()).substr(0, 16));
  CHECK(a.zoom == 20);
  CHECK(a.width_px == 400);
  CHECK(a.provider_params().at("maptype") == "satellite");
}

TEST_CASE("static maps request and error mapping") {
  testsupport::ScriptedHttpClient http;
  StaticMapsProvider provider(http, "https://maps.example/staticmap");
  const SceneRequest req = scene_request_for(site_at(33.74, -117.87));
  const std::string url = provider.request_url(req, "k");
  CHECK(url.rfind("https://maps.example/staticmap?", 0) == 0);
  CHECK(url.find("zoom=20") != std::string::npos);
  CHECK(url.find("size=400x400") != std::string::npos);
  CHECK(url.find("maptype=satellite") != std::string::npos);
  CHECK(url.find("key=k") != std::string::npos);

  http.push(403, "denied", "text/plain");
  try {
    provider.fetch(req, "k");
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UpstreamError);
    CHECK(e.status() == 403);
  }
}

TEST_CASE("fetch_scene fills and then hits the cache") {
  testsupport::TempDir dir;
  SceneCache cache(dir.path());
  ManualClock clock(parse_utc("2024-06-01T00:00:00Z"));
  testsupport::ScriptedHttpClient http;
  const auto png = encode_png(patterned(400, 400, 9));
  http.push(200, std::string(png.begin(), png.end()), "image/png");
  StaticMapsProvider provider(http, "https://maps.example/staticmap");

  const auto first = fetch_scene(site_at(33.74, -117.87), "k", provider, cache, clock);
  CHECK_FALSE(first.cache_hit);
  CHECK(first.scene.pixels == patterned(400, 400, 9));
  CHECK(format_utc(first.scene.fetched_at) == "2024-06-01T00:00:00Z");
  const auto second = fetch_scene(site_at(33.74, -117.87), "k", provider, cache, clock);
  CHECK(second.cache_hit);
  CHECK(second.scene.pixels == first.scene.pixels);
  CHECK(http.requests.size() == 1);

  SceneCache reopened(dir.path());
  const auto third = fetch_scene(site_at(33.74, -117.87), "k", provider, reopened, clock);
  CHECK(third.cache_hit);
  CHECK(third.scene.scene_id == first.scene.scene_id);
}

TEST_CASE("fetch_scene rejects undecodable bytes") {
  testsupport::TempDir dir;
  SceneCache cache(dir.path());
  ManualClock clock(parse_utc("2024-06-01T00:00:00Z"));
  testsupport::ScriptedHttpClient http;
  http.push(200, "<html>not an image</html>", "text/html");
  StaticMapsProvider provider(http, "https://maps.example/staticmap");
  try {
    fetch_scene(site_at(33.74, -117.87), "k", provider, cache, clock);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DecodeError);
  }
  CHECK_FALSE(cache.get(scene_request_for(site_at(33.74, -117.87)).scene_id()).has_value());
}

TEST_CASE("synthetic provider is deterministic") {
  const SceneRequest req = scene_request_for(site_at(33.74, -117.87));
  SyntheticProvider a(7);
  SyntheticProvider b(7);
  SyntheticProvider c(8);
  CHECK(a.render(req) == b.render(req));
  CHECK(a.render(req).width() == 400);
  CHECK_FALSE(a.render(req) == c.render(req));
  CHECK(decode_png(a.fetch(req, "")) == a.render(req));
}

TEST_CASE("tile store persistence") {
  testsupport::TempDir dir;
  TileStore store;
  SceneImage scene = scene_of(patterned(400, 400, 3));
  for (auto& t : slice_scene(scene)) {
    t.region_name = "santa-ana";
    store.add(std::move(t));
  }
  store.save(dir.path());
  CHECK(std::filesystem::exists(dir / "santa-ana/index.json"));
  const TileStore back = TileStore::load(dir.path());
  CHECK(back.size() == 16);
  CHECK(back.regions() == std::vector<std::string>{"santa-ana"});
  const Tile* t = back.find("0123456789abcdef_r2c3");
  REQUIRE(t != nullptr);
  CHECK(t->pixels == store.find("0123456789abcdef_r2c3")->pixels);
  CHECK(t->geo_center_lat == store.find("0123456789abcdef_r2c3")->geo_center_lat);
  CHECK(back.find("nope") == nullptr);
  CHECK(TileStore::load(dir / "missing").size() == 0);
}
