#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pvatlas/core/clock.hpp"
#include "pvatlas/core/http.hpp"

namespace pvatlas {

enum class RegionRole { FineTune, LargeScaleTest, CrossRegionalTest, CrossContinentalTest };

std::string_view role_name(RegionRole role);
/// Throws Error{InvalidArgument} for unknown names.
RegionRole parse_role(std::string_view name);

/// WGS84 degrees.
struct BoundingBox {
  double south = 0, west = 0, north = 0, east = 0;
  bool contains(double lat, double lon) const;
};

struct RegionSpec {
  std::string name;  // also used as a directory name: [A-Za-z0-9._-]+
  std::string continent;
  BoundingBox bbox;
  RegionRole role = RegionRole::CrossRegionalTest;
  int target_tile_count = 480;
};

/// Throws Error{InvalidRegion}.
void validate_region(const RegionSpec& region);
/// Validates each region and name uniqueness across the campaign.
void validate_campaign(std::span<const RegionSpec> regions);

/// Tag constraints ANDed onto each element selector.
struct TagFilter {
  std::vector<std::pair<std::string, std::string>> tags{
      {"power", "generator"}, {"generator:source", "solar"}};
};

struct PvSiteRecord {
  std::string site_id;  // "<element type>/<id>", e.g. "way/123"
  double lat = 0;
  double lon = 0;
  std::map<std::string, std::string> tags;
  std::string region_name;

  friend bool operator==(const PvSiteRecord&, const PvSiteRecord&) = default;
};

struct SnapshotManifest {
  std::string query_text;
  std::string endpoint_url;
  Timestamp export_timestamp;  // Overpass osm_base timestamp when reported, else retrieval time
  Timestamp retrieved_at;
  std::string region_name;
  std::size_t site_count = 0;
  std::string content_digest;  // sha256 of the raw response body

  friend bool operator==(const SnapshotManifest&, const SnapshotManifest&) = default;
};

struct Snapshot {
  std::vector<PvSiteRecord> sites;
  SnapshotManifest manifest;
  std::string raw_response;
};

/// Deterministic Overpass QL selecting nodes, ways and relations matching
/// `filter` inside the region bbox, with `out center` JSON output.
std::string build_overpass_query(const RegionSpec& region, const TagFilter& filter = {});

/// Parses an Overpass JSON body. Nodes use lat/lon, ways and relations their
/// center; elements without coordinates, outside the bbox, or repeating an
/// earlier id are skipped. Throws Error{ParseError} or Error{UpstreamError}
/// (Overpass "remark" error payloads).
std::vector<PvSiteRecord> parse_overpass_response(std::string_view raw, const RegionSpec& region);

/// Builds the query, POSTs it to `endpoint_url` and parses the reply.
Snapshot fetch_pv_sites(const RegionSpec& region, const std::string& endpoint_url,
                        HttpClient& http, Clock& clock, const TagFilter& filter = {});

/// Great-circle distance in meters (mean Earth radius 6371008.8 m).
double haversine_m(double lat1, double lon1, double lat2, double lon2);

/// Greedy, order-preserving: a site is dropped when it lies closer than
/// `radius_m` to any site already kept.
std::vector<PvSiteRecord> dedupe_sites(std::span<const PvSiteRecord> sites, double radius_m);

/// On-disk snapshots under <root>/<region>/: raw/<digest>.json (verbatim
/// body), manifest.json and sites.json. One writer per region.
class SnapshotStore {
 public:
  explicit SnapshotStore(std::filesystem::path root) : root_(std::move(root)) {}

  void persist(const Snapshot& snapshot) const;
  bool contains(const std::string& region_name) const;
  /// Manifest and sites of the latest snapshot; raw_response is reloaded from
  /// the digest-keyed file. Throws Error{IoError} when absent.
  Snapshot load(const std::string& region_name) const;

 private:
  std::filesystem::path root_;
};

void to_json(nlohmann::json& j, const RegionSpec& r);
void from_json(const nlohmann::json& j, RegionSpec& r);
void to_json(nlohmann::json& j, const PvSiteRecord& s);
void from_json(const nlohmann::json& j, PvSiteRecord& s);
void to_json(nlohmann::json& j, const SnapshotManifest& m);
void from_json(const nlohmann::json& j, SnapshotManifest& m);

}  // namespace pvatlas
