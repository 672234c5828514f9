#include <httplib.h>

#include <algorithm>
#include <charconv>

#include "pvatlas/cli.hpp"
#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace pvatlas {

namespace {

constexpr int kDefaultPageSize = 20;
constexpr int kMaxPageSize = 200;

constexpr std::string_view kPlaceholderPage =
    "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>pv-atlas</title></head>\n"
    "<body><p>No UI assets installed. The labeling API is available under /api/.</p></body></html>\n";

void send_json(httplib::Response& res, int status, const ordered_json& body) {
  res.status = status;
  res.set_content(safe_dump(body), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& detail) {
  send_json(res, status, ordered_json{{"error", code}, {"detail", detail}});
}

std::optional<int> int_param(const httplib::Request& req, const char* name) {
  if (!req.has_param(name)) return std::nullopt;
  const std::string v = req.get_param_value(name);
  int out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) throw Error(ErrorCode::InvalidArgument, name);
  return out;
}

}  // namespace

struct AnnotationServer::Impl {
  const TileStore& tiles;
  LabelStore& labels;
  Clock& clock;
  httplib::Server server;
  bool bound = false;

  Impl(const TileStore& t, LabelStore& l, Clock& c) : tiles(t), labels(l), clock(c) {}

  ordered_json tile_json(const Tile& t) const {
    ordered_json j;
    j["tile_id"] = t.tile_id;
    j["region"] = t.region_name;
    j["scene_id"] = t.scene_id;
    j["row"] = t.row;
    j["col"] = t.col;
    j["geo_center"] = {{"lat", t.geo_center_lat}, {"lon", t.geo_center_lon}};
    const auto label = labels.get(t.tile_id);
    j["label"] = label ? annotation_record(*label) : ordered_json();
    j["image_png_base64"] = base64_encode(encode_png(t.pixels));
    return j;
  }

  void list_tiles(const httplib::Request& req, httplib::Response& res) const {
    const std::string status = req.has_param("status") ? req.get_param_value("status") : "unlabeled";
    if (status != "unlabeled" && status != "labeled" && status != "all") {
      return send_error(res, 400, "InvalidArgument", "status must be unlabeled, labeled or all");
    }
    int page = 0;
    int page_size = kDefaultPageSize;
    try {
      page = int_param(req, "page").value_or(0);
      page_size = int_param(req, "page_size").value_or(kDefaultPageSize);
    } catch (const Error& e) {
      return send_error(res, 400, "InvalidArgument", std::string("bad integer parameter ") + e.what());
    }
    if (page < 0 || page_size < 1 || page_size > kMaxPageSize) {
      return send_error(res, 400, "InvalidArgument", "page must be >= 0 and page_size in [1, 200]");
    }

    std::vector<std::string> regions = tiles.regions();
    std::sort(regions.begin(), regions.end());
    if (req.has_param("region")) regions = {req.get_param_value("region")};
    std::vector<const Tile*> matched;
    for (const auto& region : regions) {
      for (const auto& id : tiles.tile_ids(region)) {
        const bool labeled = labels.contains(id);
        if ((status == "unlabeled" && labeled) || (status == "labeled" && !labeled)) continue;
        matched.push_back(tiles.find(id));
      }
    }
    ordered_json body;
    body["status"] = status;
    body["page"] = page;
    body["page_size"] = page_size;
    body["total"] = matched.size();
    ordered_json items = ordered_json::array();
    const std::size_t first = static_cast<std::size_t>(page) * page_size;
    for (std::size_t i = first; i < matched.size() && i < first + page_size; ++i) items.push_back(tile_json(*matched[i]));
    body["tiles"] = std::move(items);
    send_json(res, 200, body);
  }

  void tile_image(const httplib::Request& req, httplib::Response& res) const {
    const Tile* t = tiles.find(req.matches[1]);
    if (t == nullptr) return send_error(res, 404, "MissingTile", "unknown tile '" + std::string(req.matches[1]) + "'");
    const auto png = encode_png(t->pixels);
    res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
  }

  void post_label(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (tiles.find(id) == nullptr) return send_error(res, 404, "MissingTile", "unknown tile '" + id + "'");
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) {
      return send_error(res, 400, "ParseError", "request body must be a JSON object");
    }
    if (auto it = body.find("tile_id"); it != body.end() && *it != id) {
      return send_error(res, 400, "InvalidArgument", "body tile_id does not match the URL");
    }
    body["tile_id"] = id;
    if (!body.contains("labeled_at")) body["labeled_at"] = format_utc(clock.now());
    if (!body.contains("annotator_id")) body["annotator_id"] = "annotator";
    try {
      const TileLabel label = label_from_annotation(body);
      const auto result = labels.put(label);
      const char* outcome = result == LabelStore::PutResult::Inserted  ? "inserted"
                            : result == LabelStore::PutResult::Updated ? "updated"
                                                                       : "unchanged";
      send_json(res, 200, ordered_json{{"result", outcome}, {"label", annotation_record(*labels.get(id))}});
    } catch (const Error& e) {
      const int status = e.code() == ErrorCode::InconsistentLabel ? 422 : 400;
      send_error(res, status, error_code_name(e.code()), e.what());
    }
  }

  void progress(httplib::Response& res) const {
    std::vector<std::string> regions = tiles.regions();
    std::sort(regions.begin(), regions.end());
    ordered_json rows = ordered_json::array();
    std::size_t total = 0, labeled = 0;
    for (const auto& region : regions) {
      const auto ids = tiles.tile_ids(region);
      const auto done = static_cast<std::size_t>(
          std::count_if(ids.begin(), ids.end(), [&](const std::string& id) { return labels.contains(id); }));
      rows.push_back({{"region", region}, {"total", ids.size()}, {"labeled", done}});
      total += ids.size();
      labeled += done;
    }
    send_json(res, 200, ordered_json{{"regions", rows}, {"total", total}, {"labeled", labeled}});
  }
};

AnnotationServer::AnnotationServer(const TileStore& tiles, LabelStore& labels, Clock& clock,
                                   std::optional<fs::path> static_dir)
    : impl_(std::make_unique<Impl>(tiles, labels, clock)) {
  auto& s = impl_->server;
  Impl* self = impl_.get();
  // No SO_REUSEPORT: a second server on the same port must fail to bind.
  s.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  s.Get("/api/tiles", [self](const httplib::Request& req, httplib::Response& res) { self->list_tiles(req, res); });
  s.Get(R"(/api/tiles/([^/]+)/image\.png)",
        [self](const httplib::Request& req, httplib::Response& res) { self->tile_image(req, res); });
  s.Post(R"(/api/tiles/([^/]+)/label)",
         [self](const httplib::Request& req, httplib::Response& res) { self->post_label(req, res); });
  s.Get("/api/progress", [self](const httplib::Request&, httplib::Response& res) { self->progress(res); });
  if (static_dir && fs::is_directory(*static_dir)) {
    s.set_mount_point("/", static_dir->string());
  } else {
    s.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(std::string(kPlaceholderPage), "text/html");
    });
  }
  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send_error(res, 500, "InternalError", e.what());
    }
  });
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : impl_->server.bind_to_port(host, port) ? port : -1;
  if (bound < 0) {
    throw Error(ErrorCode::PortInUse, "cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->bound = true;
  return bound;
}

void AnnotationServer::serve() {
  if (!impl_->bound) throw Error(ErrorCode::InvalidArgument, "serve() before bind()");
  impl_->server.listen_after_bind();
}

void AnnotationServer::stop() { impl_->server.stop(); }

void AnnotationServer::wait_until_ready() { impl_->server.wait_until_ready(); }

}  // namespace pvatlas
