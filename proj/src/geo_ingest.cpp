#include "pvatlas/geo_ingest.hpp"

#include <cctype>
#include <cmath>
#include <numbers>
#include <set>

#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/error.hpp"
#include "pvatlas/core/files.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pvatlas {

std::string_view role_name(RegionRole role) {
  switch (role) {
    case RegionRole::FineTune: return "fine-tune";
    case RegionRole::LargeScaleTest: return "large-scale-test";
    case RegionRole::CrossRegionalTest: return "cross-regional-test";
    case RegionRole::CrossContinentalTest: return "cross-continental-test";
  }
  return "unknown";
}

RegionRole parse_role(std::string_view name) {
  for (auto role : {RegionRole::FineTune, RegionRole::LargeScaleTest,
                    RegionRole::CrossRegionalTest, RegionRole::CrossContinentalTest}) {
    if (role_name(role) == name) return role;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown region role '" + std::string(name) + "'");
}

bool BoundingBox::contains(double lat, double lon) const {
  return lat >= south && lat <= north && lon >= west && lon <= east;
}

void validate_region(const RegionSpec& region) {
  if (region.name.empty()) throw Error(ErrorCode::InvalidRegion, "region name is empty");
  for (char c : region.name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) {
      throw Error(ErrorCode::InvalidRegion,
                  "region name '" + region.name + "' has characters outside [A-Za-z0-9._-]");
    }
  }
  const auto& b = region.bbox;
  if (!(b.south < b.north) || !(b.west < b.east)) {
    throw Error(ErrorCode::InvalidRegion, "degenerate bbox for region '" + region.name + "'");
  }
  if (b.south < -90 || b.north > 90 || b.west < -180 || b.east > 180) {
    throw Error(ErrorCode::InvalidRegion, "bbox out of WGS84 range for '" + region.name + "'");
  }
  if (region.target_tile_count <= 0) {
    throw Error(ErrorCode::InvalidRegion, "target_tile_count must be positive");
  }
}

void validate_campaign(std::span<const RegionSpec> regions) {
  std::set<std::string> names;
  for (const auto& r : regions) {
    validate_region(r);
    if (!names.insert(r.name).second) {
      throw Error(ErrorCode::InvalidRegion, "duplicate region name '" + r.name + "'");
    }
  }
}

namespace {

// Shortest round-trip text, padded to at least two fractional digits so the
// bbox reads the way coordinates are usually written (33.70, not 33.7).
std::string format_coord(double v) {
  std::string s = format_double(v);
  if (s.find_first_of("eE") != std::string::npos) return s;
  auto dot = s.find('.');
  if (dot == std::string::npos) {
    s += ".";
    dot = s.size() - 1;
  }
  while (s.size() - dot - 1 < 2) s += '0';
  return s;
}

std::string quote_ql(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

std::string build_overpass_query(const RegionSpec& region, const TagFilter& filter) {
  validate_region(region);
  std::string tags;
  for (const auto& [k, v] : filter.tags) tags += "[" + quote_ql(k) + "=" + quote_ql(v) + "]";
  const auto& b = region.bbox;
  const std::string bbox = "(" + format_coord(b.south) + "," + format_coord(b.west) + "," +
                           format_coord(b.north) + "," + format_coord(b.east) + ")";
  std::string q = "[out:json][timeout:180];\n(\n";
  for (const char* element : {"node", "way", "relation"}) {
    q += "  ";
    q += element;
    q += tags + bbox + ";\n";
  }
  q += ");\nout center;\n";
  return q;
}

std::vector<PvSiteRecord> parse_overpass_response(std::string_view raw, const RegionSpec& region) {
  json doc;
  try {
    doc = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, std::string("overpass response: ") + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorCode::ParseError, "overpass response is not an object");
  if (auto it = doc.find("remark"); it != doc.end() && it->is_string()) {
    const auto& remark = it->get_ref<const std::string&>();
    if (remark.find("error") != std::string::npos) {
      throw Error(ErrorCode::UpstreamError, "overpass: " + remark);
    }
  }
  const auto elements = doc.find("elements");
  if (elements == doc.end() || !elements->is_array()) {
    throw Error(ErrorCode::ParseError, "overpass response has no elements array");
  }

  std::vector<PvSiteRecord> sites;
  std::set<std::string> seen;
  for (const auto& el : *elements) {
    if (!el.is_object()) continue;
    const std::string type = el.value("type", "");
    if (!el.contains("id") || !el["id"].is_number_integer()) continue;
    const json* coords = nullptr;
    if (type == "node") {
      coords = &el;
    } else if ((type == "way" || type == "relation") && el.contains("center")) {
      coords = &el["center"];
    }
    if (coords == nullptr || !coords->contains("lat") || !coords->contains("lon")) continue;
    if (!(*coords)["lat"].is_number() || !(*coords)["lon"].is_number()) continue;

    PvSiteRecord site;
    site.site_id = type + "/" + std::to_string(el["id"].get<long long>());
    site.lat = (*coords)["lat"].get<double>();
    site.lon = (*coords)["lon"].get<double>();
    site.region_name = region.name;
    if (!region.bbox.contains(site.lat, site.lon)) continue;
    if (!seen.insert(site.site_id).second) continue;
    if (auto t = el.find("tags"); t != el.end() && t->is_object()) {
      for (const auto& [k, v] : t->items()) {
        if (v.is_string()) site.tags.emplace(k, v.get<std::string>());
      }
    }
    sites.push_back(std::move(site));
  }
  return sites;
}

Snapshot fetch_pv_sites(const RegionSpec& region, const std::string& endpoint_url,
                        HttpClient& http, Clock& clock, const TagFilter& filter) {
  Snapshot snap;
  snap.manifest.query_text = build_overpass_query(region, filter);
  snap.manifest.endpoint_url = endpoint_url;
  snap.manifest.region_name = region.name;

  HttpRequest req;
  req.method = "POST";
  req.url = endpoint_url;
  req.content_type = "application/x-www-form-urlencoded";
  req.body = "data=" + url_encode(snap.manifest.query_text);
  const HttpResponse resp = http.send(req);
  snap.manifest.retrieved_at = clock.now();
  if (resp.status < 200 || resp.status >= 300) {
    throw Error(ErrorCode::UpstreamError, "overpass endpoint " + endpoint_url + " returned HTTP " +
                                              std::to_string(resp.status),
                std::nullopt, resp.status);
  }

  snap.sites = parse_overpass_response(resp.body, region);
  snap.raw_response = resp.body;
  snap.manifest.site_count = snap.sites.size();
  snap.manifest.content_digest = sha256_hex(resp.body);
  snap.manifest.export_timestamp = snap.manifest.retrieved_at;
  // parse_overpass_response already validated the document.
  const json doc = json::parse(resp.body);
  if (auto o = doc.find("osm3s"); o != doc.end() && o->is_object()) {
    if (auto ts = o->find("timestamp_osm_base"); ts != o->end() && ts->is_string()) {
      try {
        snap.manifest.export_timestamp = parse_utc(ts->get<std::string>());
      } catch (const Error&) {
      }
    }
  }
  return snap;
}

double haversine_m(double lat1, double lon1, double lat2, double lon2) {
  constexpr double kEarthRadiusM = 6371008.8;
  constexpr double kRad = std::numbers::pi / 180.0;
  const double dlat = (lat2 - lat1) * kRad;
  const double dlon = (lon2 - lon1) * kRad;
  const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(lat1 * kRad) * std::cos(lat2 * kRad) * std::sin(dlon / 2) *
                       std::sin(dlon / 2);
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

std::vector<PvSiteRecord> dedupe_sites(std::span<const PvSiteRecord> sites, double radius_m) {
  if (radius_m < 0) throw Error(ErrorCode::InvalidArgument, "dedup radius must be >= 0");
  std::vector<PvSiteRecord> kept;
  for (const auto& s : sites) {
    bool near = false;
    for (const auto& k : kept) {
      if (haversine_m(s.lat, s.lon, k.lat, k.lon) < radius_m) {
        near = true;
        break;
      }
    }
    if (!near) kept.push_back(s);
  }
  return kept;
}

void to_json(json& j, const RegionSpec& r) {
  j = json{{"name", r.name},
           {"continent", r.continent},
           {"bbox", {r.bbox.south, r.bbox.west, r.bbox.north, r.bbox.east}},
           {"role", role_name(r.role)},
           {"target_tile_count", r.target_tile_count}};
}

void from_json(const json& j, RegionSpec& r) {
  r.name = j.at("name").get<std::string>();
  r.continent = j.value("continent", "");
  const auto& b = j.at("bbox");
  if (!b.is_array() || b.size() != 4) {
    throw Error(ErrorCode::InvalidRegion, "bbox must be [south, west, north, east]");
  }
  r.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
  r.role = parse_role(j.at("role").get<std::string>());
  r.target_tile_count = j.value("target_tile_count", 480);
}

void to_json(json& j, const PvSiteRecord& s) {
  j = json{{"site_id", s.site_id},
           {"lat", s.lat},
           {"lon", s.lon},
           {"tags", s.tags},
           {"region_name", s.region_name}};
}

void from_json(const json& j, PvSiteRecord& s) {
  s.site_id = j.at("site_id").get<std::string>();
  s.lat = j.at("lat").get<double>();
  s.lon = j.at("lon").get<double>();
  s.tags = j.value("tags", std::map<std::string, std::string>{});
  s.region_name = j.at("region_name").get<std::string>();
}

void to_json(json& j, const SnapshotManifest& m) {
  j = json{{"query_text", m.query_text},
           {"endpoint_url", m.endpoint_url},
           {"export_timestamp", format_utc(m.export_timestamp)},
           {"retrieved_at", format_utc(m.retrieved_at)},
           {"region_name", m.region_name},
           {"site_count", m.site_count},
           {"content_digest", m.content_digest}};
}

void from_json(const json& j, SnapshotManifest& m) {
  m.query_text = j.at("query_text").get<std::string>();
  m.endpoint_url = j.at("endpoint_url").get<std::string>();
  m.export_timestamp = parse_utc(j.at("export_timestamp").get<std::string>());
  m.retrieved_at = parse_utc(j.at("retrieved_at").get<std::string>());
  m.region_name = j.at("region_name").get<std::string>();
  m.site_count = j.at("site_count").get<std::size_t>();
  m.content_digest = j.at("content_digest").get<std::string>();
}

void SnapshotStore::persist(const Snapshot& snapshot) const {
  const fs::path dir = root_ / snapshot.manifest.region_name;
  write_file_atomic(dir / "raw" / (snapshot.manifest.content_digest + ".json"),
                    snapshot.raw_response);
  json sites = json::array();
  for (const auto& s : snapshot.sites) sites.push_back(s);
  json sites_doc{{"content_digest", snapshot.manifest.content_digest}, {"sites", sites}};
  write_file_atomic(dir / "sites.json", sites_doc.dump(2) + "\n");
  // Manifest last: its presence marks a complete snapshot.
  write_file_atomic(dir / "manifest.json", json(snapshot.manifest).dump(2) + "\n");
}

bool SnapshotStore::contains(const std::string& region_name) const {
  return fs::exists(root_ / region_name / "manifest.json");
}

Snapshot SnapshotStore::load(const std::string& region_name) const {
  const fs::path dir = root_ / region_name;
  Snapshot snap;
  try {
    snap.manifest = json::parse(read_text_file(dir / "manifest.json")).get<SnapshotManifest>();
    const json sites_doc = json::parse(read_text_file(dir / "sites.json"));
    if (sites_doc.at("content_digest") != snap.manifest.content_digest) {
      throw Error(ErrorCode::IoError, "sites.json does not belong to manifest of " + region_name);
    }
    snap.sites = sites_doc.at("sites").get<std::vector<PvSiteRecord>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, "corrupt snapshot for " + region_name + ": " + e.what());
  }
  snap.raw_response = read_text_file(dir / "raw" / (snap.manifest.content_digest + ".json"));
  return snap;
}

}  // namespace pvatlas
