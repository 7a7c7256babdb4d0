#include "calibrag/http_transport.hpp"

#include <cstdlib>
#include <regex>

#include "calibrag/errors.hpp"
#include "httplib.h"

namespace calibrag {

ParsedUrl parse_base_url(const std::string& url) {
  static const std::regex kUrl(R"(^(https?://[A-Za-z0-9.\-\[\]:]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, kUrl)) {
    throw ConfigurationError("malformed base_url '" + url + "'");
  }
  ParsedUrl parsed{m[1].str(), m[2].matched ? m[2].str() : std::string()};
  while (!parsed.prefix.empty() && parsed.prefix.back() == '/') parsed.prefix.pop_back();
  return parsed;
}

std::optional<std::string> api_key_from_env(const std::string& override_env) {
  if (!override_env.empty()) {
    if (const char* v = std::getenv(override_env.c_str()); v && *v) return std::string(v);
  }
  if (const char* v = std::getenv("CALIBRAG_API_KEY"); v && *v) return std::string(v);
  return std::nullopt;
}

namespace {

class HttplibTransport final : public HttpTransport {
 public:
  HttplibTransport(ParsedUrl url, std::chrono::milliseconds timeout, std::optional<std::string> key)
      : url_(std::move(url)), client_(url_.origin) {
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
    client_.set_connection_timeout(secs.count(), usecs.count());
    client_.set_read_timeout(secs.count(), usecs.count());
    client_.set_write_timeout(secs.count(), usecs.count());
    if (key) client_.set_bearer_token_auth(*key);
  }

  HttpResponse post_json(const std::string& path, const std::string& body) override {
    auto res = client_.Post(url_.prefix + path, body, "application/json");
    if (!res) return {0, {}, httplib::to_string(res.error())};
    return {res->status, res->body, {}};
  }

 private:
  ParsedUrl url_;
  httplib::Client client_;
};

}  // namespace

std::unique_ptr<HttpTransport> make_http_transport(const std::string& base_url,
                                                   std::chrono::milliseconds timeout,
                                                   std::optional<std::string> api_key) {
  return std::make_unique<HttplibTransport>(parse_base_url(base_url), timeout, std::move(api_key));
}

}  // namespace calibrag
