#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pkgsentry/core.hpp"

namespace pkgsentry {

// ---------------------------------------------------------------------------
// Names and versions
// ---------------------------------------------------------------------------

/// Lowercases and collapses runs of `-`, `_`, `.` into a single `-`.
/// Throws Error(InvalidName) for empty input or characters outside [A-Za-z0-9._-].
std::string normalize_name(std::string_view raw);

/// Levenshtein distance between two byte strings.
std::size_t edit_distance(std::string_view a, std::string_view b);

/// Release version with the registry's ordering rules (epoch, release tuple,
/// pre/post/dev segments; trailing zeros in the release tuple are ignored).
class Version {
 public:
  static std::optional<Version> parse(std::string_view text);

  const std::string& text() const noexcept { return text_; }
  bool is_prerelease() const noexcept { return pre_.has_value() || dev_.has_value(); }
  const std::vector<long>& release() const noexcept { return release_; }

  friend std::strong_ordering operator<=>(const Version& a, const Version& b);
  friend bool operator==(const Version& a, const Version& b) {
    return (a <=> b) == std::strong_ordering::equal;
  }

 private:
  std::string text_;
  long epoch_ = 0;
  std::vector<long> release_;
  std::optional<std::pair<int, long>> pre_;  // (0=a, 1=b, 2=rc, number)
  std::optional<long> post_;
  std::optional<long> dev_;
};

struct VersionSpecifier {
  std::string op;  // ==, !=, >=, <=, >, <, ~=, ===
  std::string version;
  bool wildcard = false;  // "==1.2.*"

  bool matches(const Version& v) const;
};

struct PackageQuery {
  std::string raw;
  std::string name;  // as typed (trimmed), not normalized
  std::vector<VersionSpecifier> specifiers;

  bool exact_pin() const;
};

/// Accepts "name", "name==1.2.0", "name>=1,<2", "name 1.2.0".
PackageQuery parse_query(std::string_view query);

// ---------------------------------------------------------------------------
// Registry access
// ---------------------------------------------------------------------------

enum class ArchiveFormat { TarGz, Zip };

std::string_view to_string(ArchiveFormat format);

/// Detects the container from magic bytes (gzip 1f 8b, zip "PK\x03\x04" or
/// "PK\x05\x06"); nullopt when neither matches.
std::optional<ArchiveFormat> detect_archive_format(std::span<const std::uint8_t> head);

struct ArchiveInfo {
  std::string local_path;
  ArchiveFormat format = ArchiveFormat::TarGz;
  std::string sha256;
  std::uint64_t size_bytes = 0;
};

Json to_json(const ArchiveInfo& info);

/// Inspects a local archive file: magic-byte format detection plus digest.
ArchiveInfo inspect_archive(const std::string& path);

struct RegistryEndpoint {
  std::string base_url = "https://pypi.org/pypi";
  double timeout_s = 30.0;
  unsigned max_retries = 3;
  double backoff_base_ms = 250.0;
  double backoff_max_ms = 8000.0;
  std::uint64_t seed = 0;

  /// base_url, or PKGSENTRY_REGISTRY_BASE when set.
  std::string effective_base_url() const;
  void validate() const;
};

/// Source of per-project registry metadata (the JSON API document shape:
/// {"info": {...}, "releases": {version: [file, ...]}}).
class MetadataSource {
 public:
  virtual ~MetadataSource() = default;
  /// nullopt when the project does not exist.
  virtual std::optional<Json> project(const std::string& normalized_name) = 0;
  /// Names known to this source; feeds typo candidates.
  virtual std::vector<std::string> known_names() const { return {}; }
};

/// Fixed metadata snapshot, keyed by normalized name.
class SnapshotSource : public MetadataSource {
 public:
  SnapshotSource() = default;
  explicit SnapshotSource(std::map<std::string, Json> projects);
  /// Either a JSON object {name: metadata} or a directory of `{name}.json`.
  static SnapshotSource load(const std::string& path);

  void add(const std::string& name, Json metadata);
  std::optional<Json> project(const std::string& normalized_name) override;
  std::vector<std::string> known_names() const override;

 private:
  std::map<std::string, Json> projects_;
};

/// Live registry over HTTP: GET {base}/{name}/json with retry and backoff.
class RegistryClient : public MetadataSource {
 public:
  explicit RegistryClient(RegistryEndpoint endpoint);
  std::optional<Json> project(const std::string& normalized_name) override;
  unsigned retries_used() const noexcept { return retries_used_; }

 private:
  RegistryEndpoint endpoint_;
  unsigned retries_used_ = 0;
};

/// Optional disambiguation helper. It may only pick one of the offered
/// candidates; any other answer is discarded.
class ResolutionAssist {
 public:
  virtual ~ResolutionAssist() = default;
  virtual std::optional<std::string> choose(std::string_view query,
                                            std::span<const std::string> candidates) = 0;
};

/// Names within edit distance 2 of `name`, ordered by (distance, popularity rank).
std::vector<std::string> typo_candidates(std::string_view name,
                                         std::span<const std::string> popular);

PackageRef resolve_package(std::string_view query, MetadataSource& source,
                           ResolutionAssist* assist = nullptr,
                           std::span<const std::string> popular = {});

PackageRef resolve_package(std::string_view query, const RegistryEndpoint& endpoint,
                           ResolutionAssist* assist = nullptr,
                           std::span<const std::string> popular = {});

/// Downloads the source archive atomically into dest_dir. The file only
/// appears under its final name once the transfer, digest check and format
/// check have all succeeded.
ArchiveInfo download_sdist(const PackageRef& ref, const RegistryEndpoint& endpoint,
                           const std::string& dest_dir);

}  // namespace pkgsentry
