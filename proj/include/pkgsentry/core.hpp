#pragma once

#include <chrono>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace pkgsentry {

using Json = nlohmann::json;
using Bytes = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ErrorKind {
  Encoding,
  InvalidName,
  NotFound,
  Network,
  VersionResolution,
  Integrity,
  Format,
  Security,
  Io,
  Template,
  Transport,
  Request,
  Parse,
  Domain,
  DegenerateData,
  Precondition,
  EmptyPackage,
  ClassificationUnavailable,
  Split,
  DegenerateBootstrap,
  Manifest,
  Comparison,
  Scan,
};

std::string_view to_string(ErrorKind kind);

/// Typed error carrying a kind and, when raised inside the pipeline, the
/// stage that failed.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string stage = {});

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& stage() const noexcept { return stage_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string stage_;
  std::string detail_;
};

// ---------------------------------------------------------------------------
// Labels and verdicts
// ---------------------------------------------------------------------------

/// Malicious is the positive class everywhere.
enum class Label { Malicious, Benign };

std::string_view to_string(Label label);
/// Accepts "malicious"/"benign" in any case.
std::optional<Label> parse_label(std::string_view text);

struct PackageRef {
  std::string raw_query;
  std::string name;
  std::string version;
  std::string url;
  std::optional<std::string> note;
  // Digest advertised by the registry for `url`, when it published one.
  std::optional<std::string> advertised_sha256;

  /// Throws Error(Precondition) when name is empty or not normalized, or when
  /// url is present but not absolute https (loopback http is tolerated for
  /// local fixtures).
  void validate() const;
};

Json to_json(const PackageRef& ref);

struct SourceFile {
  std::string package_id;
  std::string relative_path;
  std::string content;
  std::uint64_t size_bytes = 0;
  std::uint64_t token_estimate = 0;

  /// Builds a SourceFile from raw bytes; decoding is lossy UTF-8 and the path
  /// must be relative without `..` components.
  static SourceFile from_bytes(std::string package_id, std::string relative_path,
                               std::span<const std::uint8_t> bytes);
  static SourceFile from_text(std::string package_id, std::string relative_path,
                              std::string_view text);
};

/// ceil(chars / 4); chars counted as UTF-8 code points.
std::uint64_t estimate_tokens(std::string_view text);

/// Replaces every invalid UTF-8 sequence with U+FFFD.
std::string decode_utf8_lossy(std::span<const std::uint8_t> bytes);
std::string decode_utf8_lossy(std::string_view bytes);

/// True when `path` is relative, non-empty and has no `..` component.
bool is_safe_relative_path(std::string_view path);

struct FileVerdict {
  std::string relative_path;
  Label label = Label::Benign;
  double score = 0.0;
  std::optional<std::string> rationale;
  std::string classifier_id;
  double latency_ms = 0.0;

  /// Label is derived from score and threshold.
  static FileVerdict make(std::string relative_path, double score, double threshold,
                          std::string classifier_id, std::optional<std::string> rationale = {},
                          double latency_ms = 0.0);
};

Json to_json(const FileVerdict& verdict, bool include_latency = true);

class PackageVerdict {
 public:
  /// Enforces: label is Malicious iff contributing_files is non-empty, and
  /// every contributing file has a Malicious file verdict.
  PackageVerdict(PackageRef package, Label label, std::string justification,
                 std::vector<std::string> contributing_files,
                 std::vector<FileVerdict> file_verdicts);

  const PackageRef& package() const noexcept { return package_; }
  Label label() const noexcept { return label_; }
  const std::string& justification() const noexcept { return justification_; }
  const std::vector<std::string>& contributing_files() const noexcept { return contributing_; }
  const std::vector<FileVerdict>& file_verdicts() const noexcept { return file_verdicts_; }

 private:
  PackageRef package_;
  Label label_;
  std::string justification_;
  std::vector<std::string> contributing_;
  std::vector<FileVerdict> file_verdicts_;
};

Json to_json(const PackageVerdict& verdict, bool include_latency = true);

// ---------------------------------------------------------------------------
// Audit trail
// ---------------------------------------------------------------------------

enum class AuditStep { Fetch, Extract, ClassifyFile, Aggregate, SingleAgent };

std::string_view to_string(AuditStep step);

struct AuditRecord {
  std::uint64_t sequence = 0;
  AuditStep step = AuditStep::Fetch;
  std::chrono::system_clock::time_point timestamp;
  std::string input_digest;
  std::string output_json;
  std::string agent_id;
  double latency_ms = 0.0;
};

/// ISO-8601 UTC with millisecond precision.
std::string format_utc(std::chrono::system_clock::time_point tp);

Json to_json(const AuditRecord& record);

/// Append-only, totally ordered audit sequence. Appends are synchronized.
class AuditLog {
 public:
  AuditLog() = default;
  AuditLog(const AuditLog& other);
  AuditLog& operator=(const AuditLog& other);

  /// `output` is stored as canonical JSON.
  const AuditRecord& append(AuditStep step, std::string input_digest, const Json& output,
                            std::string agent_id, double latency_ms);

  std::vector<AuditRecord> records() const;
  std::size_t size() const;
  /// One canonical JSON record per line.
  std::string to_jsonl() const;

 private:
  mutable std::mutex mutex_;
  std::vector<AuditRecord> records_;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class PipelineMode { MultiAgent, SAConcat, SATopK };

struct PipelineConfig {
  PipelineMode mode = PipelineMode::MultiAgent;
  std::size_t top_k = 3;
  double threshold = 0.5;
  std::uint64_t context_budget_tokens = 8192;
  std::size_t concurrency_width = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

std::string_view to_string(PipelineMode mode);

// ---------------------------------------------------------------------------
// Seeded shuffling
// ---------------------------------------------------------------------------

/// SplitMix64 (Steele, Lea, Flood). Fixed algorithm: splits and folds depend
/// on its exact output sequence.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  /// next() % bound; bound must be > 0.
  std::uint64_t below(std::uint64_t bound) { return next() % bound; }

 private:
  std::uint64_t state_;
};

/// Fisher-Yates from the back: for i = n-1 .. 1 swap(i, below(i + 1)).
template <typename T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

// ---------------------------------------------------------------------------
// Serialization helpers
// ---------------------------------------------------------------------------

/// Sorted keys, no insignificant whitespace, byte-identical for equal values.
/// Throws Error(Encoding) for NaN/Inf numbers and invalid UTF-8 strings.
std::string canonical_json(const Json& value);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view bytes);

Bytes read_file_bytes(const std::string& path);
void write_file_atomic(const std::string& path, std::string_view contents);

}  // namespace pkgsentry
