#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>

namespace pkgsentry::http {

struct Url {
  std::string scheme;
  std::string host;
  int port = 0;
  std::string path;  // includes query; "/" when empty

  std::string origin() const;
};

/// Throws Error(Precondition) for anything that is not an absolute http(s) URL.
Url parse_url(std::string_view url);

/// Joins a base URL and a path segment with exactly one slash between them.
std::string join(std::string_view base, std::string_view path);

struct Response {
  int status = 0;
  std::string body;
  std::multimap<std::string, std::string> headers;
};

using ChunkSink = std::function<bool(const char* data, std::size_t size)>;

/// Transport-level failures (connect, timeout, truncated body) throw
/// Error(Transport). Non-2xx statuses are returned, not thrown.
Response get(const std::string& url, double timeout_s, const ChunkSink& sink = {});
Response post(const std::string& url, const std::string& body, const std::string& content_type,
              const std::multimap<std::string, std::string>& headers, double timeout_s);

/// Exponential backoff with multiplicative jitter in [0.5, 1.0], drawn from a
/// seeded generator so retry schedules are reproducible.
class Backoff {
 public:
  Backoff(double base_ms, double max_ms, std::uint64_t seed);
  double next_delay_ms(unsigned attempt);
  void sleep(unsigned attempt);

 private:
  double base_ms_;
  double max_ms_;
  std::mt19937_64 rng_;
};

}  // namespace pkgsentry::http
