#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "pkgsentry/http.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "pkgsentry/core.hpp"

namespace pkgsentry::http {

std::string Url::origin() const {
  std::string out = scheme + "://" + host;
  const bool default_port = (scheme == "https" && port == 443) || (scheme == "http" && port == 80);
  if (!default_port) out += ":" + std::to_string(port);
  return out;
}

Url parse_url(std::string_view text) {
  Url url;
  const auto scheme_end = text.find("://");
  if (scheme_end == std::string_view::npos) {
    throw Error(ErrorKind::Precondition, "not an absolute URL: " + std::string(text));
  }
  url.scheme = std::string(text.substr(0, scheme_end));
  std::transform(url.scheme.begin(), url.scheme.end(), url.scheme.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (url.scheme != "http" && url.scheme != "https") {
    throw Error(ErrorKind::Precondition, "unsupported URL scheme: " + url.scheme);
  }
  auto rest = text.substr(scheme_end + 3);
  const auto path_start = rest.find_first_of("/?");
  auto authority = rest.substr(0, path_start);
  url.path = path_start == std::string_view::npos ? "/" : std::string(rest.substr(path_start));
  if (url.path.front() == '?') url.path = "/" + url.path;
  if (authority.empty()) throw Error(ErrorKind::Precondition, "URL has no host");
  std::string_view host = authority;
  std::string_view port;
  if (authority.front() == '[') {
    const auto close = authority.find(']');
    if (close == std::string_view::npos) throw Error(ErrorKind::Precondition, "bad IPv6 host");
    host = authority.substr(0, close + 1);
    if (close + 1 < authority.size() && authority[close + 1] == ':') port = authority.substr(close + 2);
  } else if (const auto colon = authority.rfind(':'); colon != std::string_view::npos) {
    host = authority.substr(0, colon);
    port = authority.substr(colon + 1);
  }
  url.host = std::string(host);
  if (port.empty()) {
    url.port = url.scheme == "https" ? 443 : 80;
  } else {
    try {
      url.port = std::stoi(std::string(port));
    } catch (const std::exception&) {
      throw Error(ErrorKind::Precondition, "bad port in URL: " + std::string(text));
    }
  }
  return url;
}

std::string join(std::string_view base, std::string_view path) {
  std::string out(base);
  while (!out.empty() && out.back() == '/') out.pop_back();
  while (!path.empty() && path.front() == '/') path.remove_prefix(1);
  out += '/';
  out += path;
  return out;
}

namespace {

void configure(httplib::Client& client, double timeout_s) {
  const auto secs = static_cast<time_t>(std::floor(timeout_s));
  const auto usecs = static_cast<time_t>((timeout_s - std::floor(timeout_s)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  client.set_follow_location(true);
}

Response convert(const httplib::Result& result, const std::string& url) {
  if (!result) {
    throw Error(ErrorKind::Transport,
                "request to " + url + " failed: " + httplib::to_string(result.error()));
  }
  Response out;
  out.status = result->status;
  out.body = result->body;
  for (const auto& [k, v] : result->headers) out.headers.emplace(k, v);
  return out;
}

}  // namespace

Response get(const std::string& url_text, double timeout_s, const ChunkSink& sink) {
  const Url url = parse_url(url_text);
  httplib::Client client(url.origin());
  configure(client, timeout_s);
  if (!sink) return convert(client.Get(url.path), url_text);

  int status = 0;
  auto result = client.Get(
      url.path,
      [&](const httplib::Response& response) {
        status = response.status;
        return true;
      },
      [&](const char* data, std::size_t size) {
        // Error bodies are not streamed to the sink.
        if (status < 200 || status >= 300) return true;
        return sink(data, size);
      });
  return convert(result, url_text);
}

Response post(const std::string& url_text, const std::string& body,
              const std::string& content_type,
              const std::multimap<std::string, std::string>& headers, double timeout_s) {
  const Url url = parse_url(url_text);
  httplib::Client client(url.origin());
  configure(client, timeout_s);
  httplib::Headers h(headers.begin(), headers.end());
  return convert(client.Post(url.path, h, body, content_type), url_text);
}

Backoff::Backoff(double base_ms, double max_ms, std::uint64_t seed)
    : base_ms_(base_ms), max_ms_(max_ms), rng_(seed) {}

double Backoff::next_delay_ms(unsigned attempt) {
  const double raw = std::min(max_ms_, base_ms_ * std::ldexp(1.0, static_cast<int>(std::min(attempt, 30u))));
  std::uniform_real_distribution<double> jitter(0.5, 1.0);
  return raw * jitter(rng_);
}

void Backoff::sleep(unsigned attempt) {
  const double ms = next_delay_ms(attempt);
  if (ms > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

}  // namespace pkgsentry::http
