#include "pkgsentry/fetcher.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <random>
#include <regex>
#include <set>
#include <tuple>

#include "pkgsentry/http.hpp"

namespace pkgsentry {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Names
// ---------------------------------------------------------------------------

std::string normalize_name(std::string_view raw) {
  auto begin = raw.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) {
    throw Error(ErrorKind::InvalidName, "package name is empty");
  }
  auto end = raw.find_last_not_of(" \t\r\n");
  raw = raw.substr(begin, end - begin + 1);

  std::string out;
  bool pending_sep = false;
  for (char c : raw) {
    if (c == '-' || c == '_' || c == '.') {
      pending_sep = true;
      continue;
    }
    const bool alpha = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
    const bool digit = c >= '0' && c <= '9';
    if (!alpha && !digit) {
      throw Error(ErrorKind::InvalidName, "invalid character in package name: '" + std::string(raw) + "'");
    }
    if (pending_sep && !out.empty()) out.push_back('-');
    pending_sep = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (out.empty()) throw Error(ErrorKind::InvalidName, "package name has no alphanumerics");
  return out;
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// ---------------------------------------------------------------------------
// Versions
// ---------------------------------------------------------------------------

std::optional<Version> Version::parse(std::string_view text) {
  static const std::regex kPattern(
      R"(^\s*v?(?:(\d+)!)?(\d+(?:\.\d+)*))"
      R"((?:[-_.]?(alpha|beta|preview|pre|rc|a|b|c)[-_.]?(\d+)?)?)"
      R"((?:-(\d+)|[-_.]?(post|rev|r)[-_.]?(\d+)?)?)"
      R"((?:[-_.]?(dev)[-_.]?(\d+)?)?)"
      R"((?:\+[a-z0-9]+(?:[-_.][a-z0-9]+)*)?\s*$)",
      std::regex::icase | std::regex::ECMAScript);
  std::cmatch m;
  const std::string owned(text);
  if (!std::regex_match(owned.c_str(), m, kPattern)) return std::nullopt;

  auto to_long = [](const std::csub_match& s) { return s.matched ? std::stol(s.str()) : 0L; };
  Version v;
  v.text_ = owned;
  try {
    v.epoch_ = to_long(m[1]);
    const std::string release = m[2].str();
    std::size_t start = 0;
    while (start <= release.size()) {
      auto dot = release.find('.', start);
      if (dot == std::string::npos) dot = release.size();
      v.release_.push_back(std::stol(release.substr(start, dot - start)));
      start = dot + 1;
    }
    if (m[3].matched) {
      std::string kind = m[3].str();
      std::transform(kind.begin(), kind.end(), kind.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      int rank = 2;
      if (kind == "a" || kind == "alpha") rank = 0;
      else if (kind == "b" || kind == "beta") rank = 1;
      v.pre_ = std::make_pair(rank, to_long(m[4]));
    }
    if (m[5].matched) v.post_ = to_long(m[5]);
    else if (m[6].matched) v.post_ = to_long(m[7]);
    if (m[8].matched) v.dev_ = to_long(m[9]);
  } catch (const std::out_of_range&) {
    return std::nullopt;
  }
  while (v.release_.size() > 1 && v.release_.back() == 0) v.release_.pop_back();
  return v;
}

std::strong_ordering operator<=>(const Version& a, const Version& b) {
  constexpr long kLow = std::numeric_limits<long>::min();
  constexpr long kHigh = std::numeric_limits<long>::max();
  auto key = [&](const Version& v) {
    // A dev release without pre/post sorts before every pre-release of the same release.
    std::pair<int, long> pre{3, 0};
    if (v.pre_) pre = *v.pre_;
    else if (!v.post_ && v.dev_) pre = {-1, 0};
    const long post = v.post_ ? *v.post_ : kLow;
    const long dev = v.dev_ ? *v.dev_ : kHigh;
    return std::make_tuple(pre, post, dev);
  };
  if (auto c = a.epoch_ <=> b.epoch_; c != 0) return c;
  const std::size_t n = std::max(a.release_.size(), b.release_.size());
  for (std::size_t i = 0; i < n; ++i) {
    const long x = i < a.release_.size() ? a.release_[i] : 0;
    const long y = i < b.release_.size() ? b.release_[i] : 0;
    if (auto c = x <=> y; c != 0) return c;
  }
  return key(a) <=> key(b);
}

namespace {

bool release_prefix_matches(const Version& v, const std::vector<long>& prefix) {
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    const long x = i < v.release().size() ? v.release()[i] : 0;
    if (x != prefix[i]) return false;
  }
  return true;
}

std::vector<long> parse_release_prefix(std::string_view text) {
  std::vector<long> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto dot = text.find('.', start);
    if (dot == std::string_view::npos) dot = text.size();
    const auto part = text.substr(start, dot - start);
    if (part.empty() || part.find_first_not_of("0123456789") != std::string_view::npos) {
      throw Error(ErrorKind::VersionResolution, "bad wildcard version: " + std::string(text));
    }
    out.push_back(std::stol(std::string(part)));
    start = dot + 1;
  }
  return out;
}

}  // namespace

bool VersionSpecifier::matches(const Version& v) const {
  if (op == "===") return v.text() == version;
  if (wildcard) {
    const bool hit = release_prefix_matches(v, parse_release_prefix(version));
    return op == "==" ? hit : !hit;
  }
  const auto target = Version::parse(version);
  if (!target) return false;
  if (op == "==") return v == *target;
  if (op == "!=") return v != *target;
  if (op == ">=") return v >= *target;
  if (op == "<=") return v <= *target;
  if (op == ">") return v > *target;
  if (op == "<") return v < *target;
  if (op == "~=") {
    std::vector<long> prefix = target->release();
    if (prefix.size() > 1) prefix.pop_back();
    return v >= *target && release_prefix_matches(v, prefix);
  }
  return false;
}

bool PackageQuery::exact_pin() const {
  return specifiers.size() == 1 && specifiers.front().op == "==" && !specifiers.front().wildcard;
}

PackageQuery parse_query(std::string_view query) {
  PackageQuery q;
  q.raw = std::string(query);
  auto begin = query.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) throw Error(ErrorKind::InvalidName, "empty package query");
  query = query.substr(begin);
  query = query.substr(0, query.find_last_not_of(" \t\r\n") + 1);

  std::size_t name_end = 0;
  while (name_end < query.size()) {
    const char c = query[name_end];
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') {
      ++name_end;
    } else {
      break;
    }
  }
  q.name = std::string(query.substr(0, name_end));
  normalize_name(q.name);  // validates

  auto rest = query.substr(name_end);
  rest.remove_prefix(std::min(rest.size(), rest.find_first_not_of(" \t")));
  if (rest.empty()) return q;
  if (rest.front() == 'v' || std::isdigit(static_cast<unsigned char>(rest.front()))) {
    q.specifiers.push_back({"==", std::string(rest), false});
    return q;
  }

  std::size_t start = 0;
  while (start <= rest.size()) {
    auto comma = rest.find(',', start);
    if (comma == std::string_view::npos) comma = rest.size();
    auto clause = rest.substr(start, comma - start);
    clause.remove_prefix(std::min(clause.size(), clause.find_first_not_of(" \t")));
    clause = clause.substr(0, clause.find_last_not_of(" \t") + 1);
    static constexpr std::string_view kOps[] = {"===", "==", "!=", ">=", "<=", "~=", ">", "<"};
    VersionSpecifier spec;
    for (auto op : kOps) {
      if (clause.substr(0, op.size()) == op) {
        spec.op = std::string(op);
        break;
      }
    }
    if (spec.op.empty()) {
      throw Error(ErrorKind::VersionResolution, "unrecognized version constraint: " + std::string(clause));
    }
    auto ver = clause.substr(spec.op.size());
    ver.remove_prefix(std::min(ver.size(), ver.find_first_not_of(" \t")));
    spec.version = std::string(ver);
    if (spec.version.size() > 2 && spec.version.ends_with(".*") && (spec.op == "==" || spec.op == "!=")) {
      spec.wildcard = true;
      spec.version.resize(spec.version.size() - 2);
      parse_release_prefix(spec.version);
    } else if (spec.op != "===" && !Version::parse(spec.version)) {
      throw Error(ErrorKind::VersionResolution, "unparseable version in constraint: " + std::string(clause));
    }
    q.specifiers.push_back(std::move(spec));
    start = comma + 1;
  }
  return q;
}

// ---------------------------------------------------------------------------
// Archives
// ---------------------------------------------------------------------------

std::string_view to_string(ArchiveFormat format) {
  return format == ArchiveFormat::TarGz ? "tar.gz" : "zip";
}

std::optional<ArchiveFormat> detect_archive_format(std::span<const std::uint8_t> head) {
  if (head.size() >= 2 && head[0] == 0x1f && head[1] == 0x8b) return ArchiveFormat::TarGz;
  if (head.size() >= 4 && head[0] == 'P' && head[1] == 'K' &&
      ((head[2] == 3 && head[3] == 4) || (head[2] == 5 && head[3] == 6))) {
    return ArchiveFormat::Zip;
  }
  return std::nullopt;
}

Json to_json(const ArchiveInfo& info) {
  return {{"local_path", info.local_path},
          {"format", to_string(info.format)},
          {"sha256", info.sha256},
          {"size_bytes", info.size_bytes}};
}

ArchiveInfo inspect_archive(const std::string& path) {
  const Bytes data = read_file_bytes(path);
  const auto format = detect_archive_format(data);
  if (!format) throw Error(ErrorKind::Format, "unsupported archive format: " + path);
  return {path, *format, sha256_hex(data), data.size()};
}

// ---------------------------------------------------------------------------
// Metadata sources
// ---------------------------------------------------------------------------

std::string RegistryEndpoint::effective_base_url() const {
  if (const char* env = std::getenv("PKGSENTRY_REGISTRY_BASE"); env && *env) return env;
  return base_url;
}

void RegistryEndpoint::validate() const {
  const auto url = http::parse_url(effective_base_url());
  const bool loopback = url.host == "127.0.0.1" || url.host == "localhost" || url.host == "[::1]";
  if (url.scheme != "https" && !loopback) {
    throw Error(ErrorKind::Precondition, "registry base must be https: " + effective_base_url());
  }
  if (!(timeout_s > 0)) throw Error(ErrorKind::Precondition, "registry timeout must be positive");
}

SnapshotSource::SnapshotSource(std::map<std::string, Json> projects) {
  for (auto& [name, meta] : projects) add(name, std::move(meta));
}

SnapshotSource SnapshotSource::load(const std::string& path) {
  SnapshotSource source;
  auto parse_file = [](const fs::path& p) {
    const Bytes raw = read_file_bytes(p.string());
    try {
      return Json::parse(raw.begin(), raw.end());
    } catch (const Json::parse_error& e) {
      throw Error(ErrorKind::Parse, p.string() + ": " + e.what());
    }
  };
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) source.add(f.stem().string(), parse_file(f));
  } else {
    const Json all = parse_file(path);
    if (!all.is_object()) throw Error(ErrorKind::Parse, "snapshot must be a JSON object");
    for (const auto& [name, meta] : all.items()) source.add(name, meta);
  }
  return source;
}

void SnapshotSource::add(const std::string& name, Json metadata) {
  projects_[normalize_name(name)] = std::move(metadata);
}

std::optional<Json> SnapshotSource::project(const std::string& normalized_name) {
  auto it = projects_.find(normalized_name);
  if (it == projects_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> SnapshotSource::known_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : projects_) names.push_back(name);
  return names;
}

RegistryClient::RegistryClient(RegistryEndpoint endpoint) : endpoint_(std::move(endpoint)) {
  endpoint_.validate();
}

std::optional<Json> RegistryClient::project(const std::string& normalized_name) {
  const std::string url = http::join(endpoint_.effective_base_url(), normalized_name + "/json");
  http::Backoff backoff(endpoint_.backoff_base_ms, endpoint_.backoff_max_ms, endpoint_.seed);
  std::string last_error;
  for (unsigned attempt = 0;; ++attempt) {
    try {
      const auto response = http::get(url, endpoint_.timeout_s);
      if (response.status == 404) return std::nullopt;
      if (response.status >= 200 && response.status < 300) {
        try {
          return Json::parse(response.body);
        } catch (const Json::parse_error& e) {
          throw Error(ErrorKind::Parse, "registry returned invalid JSON for " + normalized_name);
        }
      }
      last_error = "HTTP " + std::to_string(response.status);
      if (response.status != 429 && response.status < 500) {
        throw Error(ErrorKind::Network, "registry request failed: " + last_error + " for " + url);
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Transport) throw;
      last_error = e.detail();
    }
    if (attempt >= endpoint_.max_retries) break;
    ++retries_used_;
    backoff.sleep(attempt);
  }
  throw Error(ErrorKind::Network, "registry unreachable after " +
                                      std::to_string(endpoint_.max_retries) +
                                      " retries: " + last_error);
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

std::vector<std::string> typo_candidates(std::string_view name, std::span<const std::string> popular) {
  std::vector<std::tuple<std::size_t, std::size_t, std::string>> scored;
  std::set<std::string> seen;
  for (std::size_t rank = 0; rank < popular.size(); ++rank) {
    std::string candidate;
    try {
      candidate = normalize_name(popular[rank]);
    } catch (const Error&) {
      continue;
    }
    if (candidate == name || !seen.insert(candidate).second) continue;
    const auto d = edit_distance(name, candidate);
    if (d <= 2) scored.emplace_back(d, rank, candidate);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (auto& [d, rank, candidate] : scored) out.push_back(std::move(candidate));
  return out;
}

namespace {

struct ReleaseEntry {
  Version version;
  Json files;
  bool yanked = false;
};

std::vector<ReleaseEntry> collect_releases(const Json& meta) {
  std::vector<ReleaseEntry> out;
  const auto releases = meta.find("releases");
  if (releases == meta.end() || !releases->is_object()) return out;
  for (const auto& [text, files] : releases->items()) {
    auto v = Version::parse(text);
    if (!v) continue;
    bool yanked = false;
    if (files.is_array() && !files.empty()) {
      yanked = std::all_of(files.begin(), files.end(),
                           [](const Json& f) { return f.value("yanked", false); });
    }
    out.push_back({std::move(*v), files.is_array() ? files : Json::array(), yanked});
  }
  std::sort(out.begin(), out.end(),
            [](const ReleaseEntry& a, const ReleaseEntry& b) { return a.version < b.version; });
  return out;
}

std::optional<Json> pick_sdist(const Json& files) {
  for (const auto& f : files) {
    if (f.value("packagetype", "") == "sdist") return f;
  }
  for (const auto& f : files) {
    const std::string name = f.value("filename", "");
    if (name.ends_with(".tar.gz") || name.ends_with(".zip")) return f;
  }
  return std::nullopt;
}

}  // namespace

PackageRef resolve_package(std::string_view query, MetadataSource& source, ResolutionAssist* assist,
                           std::span<const std::string> popular) {
  const PackageQuery q = parse_query(query);
  PackageRef ref;
  ref.raw_query = q.raw;
  ref.name = normalize_name(q.name);

  auto meta = source.project(ref.name);
  if (!meta) {
    std::vector<std::string> pool(popular.begin(), popular.end());
    for (auto& n : source.known_names()) pool.push_back(std::move(n));
    const auto candidates = typo_candidates(ref.name, pool);
    if (assist != nullptr && !candidates.empty()) {
      const auto choice = assist->choose(query, candidates);
      if (choice && std::find(candidates.begin(), candidates.end(), *choice) != candidates.end()) {
        meta = source.project(*choice);
        if (meta) {
          ref.note = "corrected '" + q.name + "' to '" + *choice + "' (typo correction)";
          ref.name = *choice;
        }
      }
    }
    if (!meta) {
      std::string message = "package not found: " + ref.name;
      if (!candidates.empty()) {
        message += " (did you mean:";
        for (const auto& c : candidates) message += " " + c;
        message += ")";
      }
      throw Error(ErrorKind::NotFound, message);
    }
  }

  const auto releases = collect_releases(*meta);
  const ReleaseEntry* chosen = nullptr;
  if (q.exact_pin()) {
    const auto pinned = Version::parse(q.specifiers.front().version);
    for (const auto& r : releases) {
      if (pinned && r.version == *pinned) chosen = &r;
    }
    if (chosen == nullptr) {
      throw Error(ErrorKind::VersionResolution,
                  "version " + q.specifiers.front().version + " of " + ref.name + " does not exist");
    }
  } else {
    for (const auto& r : releases) {
      if (r.version.is_prerelease() || r.yanked) continue;
      const bool ok = std::all_of(q.specifiers.begin(), q.specifiers.end(),
                                  [&](const VersionSpecifier& s) { return s.matches(r.version); });
      if (ok) chosen = &r;  // ascending order, so the last hit is the latest
    }
    if (chosen == nullptr) {
      throw Error(ErrorKind::VersionResolution,
                  "no stable release of " + ref.name + " satisfies '" + q.raw + "'");
    }
    if (!q.specifiers.empty()) {
      const std::string constraint = ref.note ? *ref.note + "; " : "";
      ref.note = constraint + "resolved constraint to " + chosen->version.text();
    }
  }
  ref.version = chosen->version.text();
  if (const auto sdist = pick_sdist(chosen->files)) {
    ref.url = sdist->value("url", "");
    if (sdist->contains("digests") && (*sdist)["digests"].contains("sha256")) {
      ref.advertised_sha256 = (*sdist)["digests"]["sha256"].get<std::string>();
    }
  }
  ref.validate();
  return ref;
}

PackageRef resolve_package(std::string_view query, const RegistryEndpoint& endpoint,
                           ResolutionAssist* assist, std::span<const std::string> popular) {
  RegistryClient client(endpoint);
  return resolve_package(query, client, assist, popular);
}

// ---------------------------------------------------------------------------
// Download
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<std::mutex> url_lock(const std::string& url) {
  static std::mutex registry_mutex;
  static std::map<std::string, std::weak_ptr<std::mutex>> locks;
  std::lock_guard guard(registry_mutex);
  auto& slot = locks[url];
  auto lock = slot.lock();
  if (!lock) {
    lock = std::make_shared<std::mutex>();
    slot = lock;
  }
  return lock;
}

std::string archive_filename(const PackageRef& ref) {
  std::string path = http::parse_url(ref.url).path;
  path = path.substr(0, path.find('?'));
  std::string base = path.substr(path.find_last_of('/') + 1);
  if (base.empty() || base.front() == '.' || !is_safe_relative_path(base)) {
    base = ref.name + "-" + ref.version + ".archive";
  }
  return base;
}

class TempFile {
 public:
  explicit TempFile(const fs::path& dir) {
    std::random_device rd;
    path_ = dir / (".pkgsentry-" + std::to_string(rd()) + std::to_string(rd()) + ".part");
    out_.open(path_, std::ios::binary | std::ios::trunc);
    if (!out_) throw Error(ErrorKind::Io, "cannot create temporary file in " + dir.string());
  }
  ~TempFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  TempFile(const TempFile&) = delete;
  TempFile& operator=(const TempFile&) = delete;

  std::ofstream& stream() { return out_; }
  const fs::path& path() const { return path_; }
  void reset() {
    out_.close();
    out_.open(path_, std::ios::binary | std::ios::trunc);
  }
  void commit(const fs::path& target) {
    out_.close();
    std::error_code ec;
    fs::rename(path_, target, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot move archive into place: " + target.string());
    committed_ = true;
  }

 private:
  fs::path path_;
  std::ofstream out_;
  bool committed_ = false;
};

}  // namespace

ArchiveInfo download_sdist(const PackageRef& ref_in, const RegistryEndpoint& endpoint,
                           const std::string& dest_dir) {
  PackageRef ref = ref_in;
  if (ref.url.empty()) {
    RegistryClient client(endpoint);
    const auto meta = client.project(ref.name);
    if (!meta) throw Error(ErrorKind::NotFound, "package not found: " + ref.name);
    const auto releases = collect_releases(*meta);
    const auto wanted = Version::parse(ref.version);
    for (const auto& r : releases) {
      if (wanted && r.version == *wanted) {
        if (auto sdist = pick_sdist(r.files)) {
          ref.url = sdist->value("url", "");
          if (sdist->contains("digests") && (*sdist)["digests"].contains("sha256")) {
            ref.advertised_sha256 = (*sdist)["digests"]["sha256"].get<std::string>();
          }
        }
      }
    }
    if (ref.url.empty()) {
      throw Error(ErrorKind::NotFound, "no source archive for " + ref.name + " " + ref.version);
    }
  }
  ref.validate();
  if (!fs::is_directory(dest_dir)) throw Error(ErrorKind::Io, "destination is not a directory: " + dest_dir);

  auto lock = url_lock(ref.url);
  std::lock_guard guard(*lock);

  TempFile temp{fs::path(dest_dir)};
  http::Backoff backoff(endpoint.backoff_base_ms, endpoint.backoff_max_ms, endpoint.seed);
  std::string last_error;
  bool done = false;
  for (unsigned attempt = 0; !done; ++attempt) {
    temp.reset();
    try {
      auto& out = temp.stream();
      const auto response = http::get(ref.url, endpoint.timeout_s, [&](const char* data, std::size_t n) {
        out.write(data, static_cast<std::streamsize>(n));
        return static_cast<bool>(out);
      });
      if (response.status >= 200 && response.status < 300) {
        done = true;
        break;
      }
      last_error = "HTTP " + std::to_string(response.status);
      if (response.status == 404) throw Error(ErrorKind::NotFound, "archive not found: " + ref.url);
      if (response.status != 429 && response.status < 500) {
        throw Error(ErrorKind::Network, "download failed: " + last_error + " for " + ref.url);
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Transport) throw;
      last_error = e.detail();
    }
    if (attempt >= endpoint.max_retries) {
      throw Error(ErrorKind::Network, "download failed after retries: " + last_error);
    }
    backoff.sleep(attempt);
  }
  temp.stream().flush();
  if (!temp.stream()) throw Error(ErrorKind::Io, "write failed for " + temp.path().string());
  temp.stream().close();

  const Bytes data = read_file_bytes(temp.path().string());
  ArchiveInfo info;
  info.sha256 = sha256_hex(data);
  info.size_bytes = data.size();
  if (ref.advertised_sha256 && *ref.advertised_sha256 != info.sha256) {
    throw Error(ErrorKind::Integrity, "sha256 mismatch for " + ref.url + ": expected " +
                                          *ref.advertised_sha256 + ", got " + info.sha256);
  }
  const auto format = detect_archive_format(data);
  if (!format) throw Error(ErrorKind::Format, "downloaded file is neither tar.gz nor zip: " + ref.url);
  info.format = *format;
  const fs::path target = fs::path(dest_dir) / archive_filename(ref);
  temp.commit(target);
  info.local_path = target.string();
  return info;
}

}  // namespace pkgsentry
