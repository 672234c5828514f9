#pragma once

#include <chrono>
#include <string>
#include <utility>
#include <vector>

namespace pvatlas {

struct HttpRequest {
  std::string method = "GET";
  std::string url;  // absolute: scheme://host[:port]/path[?query]
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;
  std::string content_type;
};

struct HttpResponse {
  int status = 0;
  std::string body;
  std::string content_type;
};

/// Transport seam. Implementations throw Error{TransportError} when no HTTP
/// response was obtained; any response (including 4xx/5xx) is returned.
class HttpClient {
 public:
  virtual ~HttpClient() = default;
  virtual HttpResponse send(const HttpRequest& request) = 0;
};

/// Live client over cpp-httplib (http and https).
class LiveHttpClient final : public HttpClient {
 public:
  explicit LiveHttpClient(std::chrono::seconds timeout = std::chrono::seconds(120))
      : timeout_(timeout) {}
  HttpResponse send(const HttpRequest& request) override;

 private:
  std::chrono::seconds timeout_;
};

/// Percent-encodes everything outside the RFC 3986 unreserved set.
std::string url_encode(std::string_view text);

struct UrlParts {
  std::string scheme_host_port;  // "https://host:443"
  std::string path_and_query;    // "/path?x=1"
};
UrlParts split_url(const std::string& url);

}  // namespace pvatlas
