#include "pvatlas/core/http.hpp"

#include <httplib.h>

#include <cctype>

#include "pvatlas/core/error.hpp"

namespace pvatlas {

std::string url_encode(std::string_view text) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 0x0f]);
    }
  }
  return out;
}

UrlParts split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::InvalidArgument, "URL without scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

HttpResponse LiveHttpClient::send(const HttpRequest& request) {
  const UrlParts parts = split_url(request.url);
  httplib::Client client(parts.scheme_host_port);
  client.set_connection_timeout(timeout_);
  client.set_read_timeout(timeout_);
  client.set_write_timeout(timeout_);
  client.set_follow_location(true);

  httplib::Headers headers;
  for (const auto& [k, v] : request.headers) headers.emplace(k, v);

  httplib::Result result;
  if (request.method == "GET") {
    result = client.Get(parts.path_and_query, headers);
  } else if (request.method == "POST") {
    result = client.Post(parts.path_and_query, headers, request.body,
                         request.content_type.empty() ? "application/octet-stream"
                                                      : request.content_type);
  } else {
    throw Error(ErrorCode::InvalidArgument, "unsupported HTTP method " + request.method);
  }
  if (!result) {
    throw Error(ErrorCode::TransportError,
                request.method + " " + parts.scheme_host_port + ": " +
                    httplib::to_string(result.error()));
  }
  HttpResponse out;
  out.status = result->status;
  out.body = result->body;
  out.content_type = result->get_header_value("Content-Type");
  return out;
}

}  // namespace pvatlas
