#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>

namespace calibrag {

struct HttpResponse {
  int status = 0;  // 0: no response (connection failure, timeout)
  std::string body;
  std::string error;  // transport-level description when status == 0
};

// POSTs JSON bodies to paths under a fixed base URL.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  /// `path` is appended to the base URL, e.g. "/chat/completions".
  virtual HttpResponse post_json(const std::string& path, const std::string& body) = 0;
};

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path prefix without trailing slash, may be empty
};

/// Throws ConfigurationError for anything other than http(s)://host[:port][/path].
ParsedUrl parse_base_url(const std::string& url);

/// Bearer token from CALIBRAG_API_KEY, or from `override_env` when given and set.
std::optional<std::string> api_key_from_env(const std::string& override_env = {});

std::unique_ptr<HttpTransport> make_http_transport(const std::string& base_url,
                                                   std::chrono::milliseconds timeout,
                                                   std::optional<std::string> api_key);

}  // namespace calibrag
