#include "pkgsentry/core.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace pkgsentry {

namespace fs = std::filesystem;

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Encoding: return "encoding";
    case ErrorKind::InvalidName: return "invalid-name";
    case ErrorKind::NotFound: return "not-found";
    case ErrorKind::Network: return "network";
    case ErrorKind::VersionResolution: return "version-resolution";
    case ErrorKind::Integrity: return "integrity";
    case ErrorKind::Format: return "format";
    case ErrorKind::Security: return "security";
    case ErrorKind::Io: return "io";
    case ErrorKind::Template: return "template";
    case ErrorKind::Transport: return "transport";
    case ErrorKind::Request: return "request";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::DegenerateData: return "degenerate-data";
    case ErrorKind::Precondition: return "precondition";
    case ErrorKind::EmptyPackage: return "empty-package";
    case ErrorKind::ClassificationUnavailable: return "classification-unavailable";
    case ErrorKind::Split: return "split";
    case ErrorKind::DegenerateBootstrap: return "degenerate-bootstrap";
    case ErrorKind::Manifest: return "manifest";
    case ErrorKind::Comparison: return "comparison";
    case ErrorKind::Scan: return "scan";
  }
  return "unknown";
}

namespace {

std::string compose_message(ErrorKind kind, const std::string& message, const std::string& stage) {
  std::string out;
  if (!stage.empty()) out += "[" + stage + "] ";
  out += std::string(to_string(kind)) + " error: " + message;
  return out;
}

}  // namespace

Error::Error(ErrorKind kind, const std::string& message, std::string stage)
    : std::runtime_error(compose_message(kind, message, stage)),
      kind_(kind),
      stage_(std::move(stage)),
      detail_(message) {}

std::string_view to_string(Label label) {
  return label == Label::Malicious ? "malicious" : "benign";
}

std::optional<Label> parse_label(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "malicious") return Label::Malicious;
  if (lower == "benign") return Label::Benign;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

namespace {

bool is_normalized_name(std::string_view name) {
  if (name.empty()) return false;
  auto alnum = [](char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); };
  if (!alnum(name.front()) || !alnum(name.back())) return false;
  char prev = 0;
  for (char c : name) {
    if (!alnum(c) && c != '-') return false;
    if (c == '-' && prev == '-') return false;
    prev = c;
  }
  return true;
}

bool is_loopback_host(std::string_view host) {
  return host == "127.0.0.1" || host == "localhost" || host == "[::1]";
}

}  // namespace

void PackageRef::validate() const {
  if (!is_normalized_name(name)) {
    throw Error(ErrorKind::Precondition, "package name is not normalized: '" + name + "'");
  }
  if (url.empty()) return;
  if (url.rfind("https://", 0) == 0 && url.size() > 8) return;
  if (url.rfind("http://", 0) == 0) {
    auto rest = std::string_view(url).substr(7);
    auto host = rest.substr(0, rest.find_first_of(":/"));
    if (is_loopback_host(host)) return;
  }
  throw Error(ErrorKind::Precondition, "download url must be absolute https: " + url);
}

Json to_json(const PackageRef& ref) {
  Json j = {{"raw_query", ref.raw_query}, {"name", ref.name}, {"version", ref.version},
            {"url", ref.url}};
  j["note"] = ref.note ? Json(*ref.note) : Json(nullptr);
  if (ref.advertised_sha256) j["sha256"] = *ref.advertised_sha256;
  return j;
}

// ---------------------------------------------------------------------------

std::string decode_utf8_lossy(std::span<const std::uint8_t> bytes) {
  static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";
  std::string out;
  out.reserve(bytes.size());
  std::size_t i = 0;
  const std::size_t n = bytes.size();
  while (i < n) {
    const std::uint8_t b0 = bytes[i];
    if (b0 < 0x80) {
      out.push_back(static_cast<char>(b0));
      ++i;
      continue;
    }
    std::size_t len = 0;
    std::uint32_t lo = 0x80, hi = 0xBF;
    if (b0 >= 0xC2 && b0 <= 0xDF) {
      len = 2;
    } else if (b0 >= 0xE0 && b0 <= 0xEF) {
      len = 3;
      if (b0 == 0xE0) lo = 0xA0;
      if (b0 == 0xED) hi = 0x9F;
    } else if (b0 >= 0xF0 && b0 <= 0xF4) {
      len = 4;
      if (b0 == 0xF0) lo = 0x90;
      if (b0 == 0xF4) hi = 0x8F;
    } else {
      out += kReplacement;
      ++i;
      continue;
    }
    // Maximal-subpart replacement: consume the valid prefix of the sequence.
    std::size_t consumed = 1;
    bool ok = true;
    for (std::size_t k = 1; k < len; ++k) {
      if (i + k >= n) { ok = false; break; }
      const std::uint8_t b = bytes[i + k];
      const std::uint32_t min = (k == 1) ? lo : 0x80;
      const std::uint32_t max = (k == 1) ? hi : 0xBF;
      if (b < min || b > max) { ok = false; break; }
      ++consumed;
    }
    if (ok) {
      out.append(reinterpret_cast<const char*>(bytes.data() + i), len);
      i += len;
    } else {
      out += kReplacement;
      i += consumed;
    }
  }
  return out;
}

std::string decode_utf8_lossy(std::string_view bytes) {
  return decode_utf8_lossy(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

std::uint64_t estimate_tokens(std::string_view text) {
  std::uint64_t chars = 0;
  for (unsigned char c : text) {
    if ((c & 0xC0) != 0x80) ++chars;
  }
  return (chars + 3) / 4;
}

bool is_safe_relative_path(std::string_view path) {
  if (path.empty() || path.front() == '/' || path.front() == '\\') return false;
  if (path.size() >= 2 && path[1] == ':') return false;
  std::size_t start = 0;
  while (start <= path.size()) {
    auto end = path.find_first_of("/\\", start);
    if (end == std::string_view::npos) end = path.size();
    if (path.substr(start, end - start) == "..") return false;
    start = end + 1;
  }
  return true;
}

SourceFile SourceFile::from_bytes(std::string package_id, std::string relative_path,
                                  std::span<const std::uint8_t> bytes) {
  if (!is_safe_relative_path(relative_path)) {
    throw Error(ErrorKind::Security, "unsafe source path: " + relative_path);
  }
  SourceFile file;
  file.package_id = std::move(package_id);
  file.relative_path = std::move(relative_path);
  file.content = decode_utf8_lossy(bytes);
  file.size_bytes = bytes.size();
  file.token_estimate = estimate_tokens(file.content);
  return file;
}

SourceFile SourceFile::from_text(std::string package_id, std::string relative_path,
                                 std::string_view text) {
  return from_bytes(std::move(package_id), std::move(relative_path),
                    std::span<const std::uint8_t>(
                        reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------

FileVerdict FileVerdict::make(std::string relative_path, double score, double threshold,
                              std::string classifier_id, std::optional<std::string> rationale,
                              double latency_ms) {
  if (!(score >= 0.0 && score <= 1.0)) {
    throw Error(ErrorKind::Precondition, "score outside [0,1] for " + relative_path);
  }
  FileVerdict v;
  v.relative_path = std::move(relative_path);
  v.score = score;
  v.label = score >= threshold ? Label::Malicious : Label::Benign;
  v.rationale = std::move(rationale);
  v.classifier_id = std::move(classifier_id);
  v.latency_ms = std::max(0.0, latency_ms);
  return v;
}

Json to_json(const FileVerdict& v, bool include_latency) {
  Json j = {{"path", v.relative_path},
            {"label", to_string(v.label)},
            {"score", v.score},
            {"classifier_id", v.classifier_id}};
  j["rationale"] = v.rationale ? Json(*v.rationale) : Json(nullptr);
  if (include_latency) j["latency_ms"] = v.latency_ms;
  return j;
}

PackageVerdict::PackageVerdict(PackageRef package, Label label, std::string justification,
                               std::vector<std::string> contributing_files,
                               std::vector<FileVerdict> file_verdicts)
    : package_(std::move(package)),
      label_(label),
      justification_(std::move(justification)),
      contributing_(std::move(contributing_files)),
      file_verdicts_(std::move(file_verdicts)) {
  if ((label_ == Label::Malicious) != !contributing_.empty()) {
    throw Error(ErrorKind::Precondition,
                "package verdict label must be malicious iff contributing files are present");
  }
  for (const auto& path : contributing_) {
    auto it = std::find_if(file_verdicts_.begin(), file_verdicts_.end(), [&](const FileVerdict& v) {
      return v.relative_path == path && v.label == Label::Malicious;
    });
    if (it == file_verdicts_.end()) {
      throw Error(ErrorKind::Precondition,
                  "contributing file has no malicious file verdict: " + path);
    }
  }
}

Json to_json(const PackageVerdict& verdict, bool include_latency) {
  Json files = Json::array();
  for (const auto& v : verdict.file_verdicts()) files.push_back(to_json(v, include_latency));
  return {{"package", to_json(verdict.package())},
          {"label", to_string(verdict.label())},
          {"justification", verdict.justification()},
          {"contributing_files", verdict.contributing_files()},
          {"file_verdicts", files}};
}

// ---------------------------------------------------------------------------

std::string_view to_string(AuditStep step) {
  switch (step) {
    case AuditStep::Fetch: return "fetch";
    case AuditStep::Extract: return "extract";
    case AuditStep::ClassifyFile: return "classify_file";
    case AuditStep::Aggregate: return "aggregate";
    case AuditStep::SingleAgent: return "single_agent";
  }
  return "unknown";
}

std::string format_utc(std::chrono::system_clock::time_point tp) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(tp.time_since_epoch());
  const std::time_t secs = static_cast<std::time_t>(ms.count() / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec,
                static_cast<int>(ms.count() % 1000));
  return buf;
}

Json to_json(const AuditRecord& r) {
  return {{"seq", r.sequence},
          {"step", to_string(r.step)},
          {"timestamp", format_utc(r.timestamp)},
          {"input_digest", r.input_digest},
          {"output_json", r.output_json},
          {"agent_id", r.agent_id},
          {"latency_ms", r.latency_ms}};
}

AuditLog::AuditLog(const AuditLog& other) {
  std::lock_guard lock(other.mutex_);
  records_ = other.records_;
}

AuditLog& AuditLog::operator=(const AuditLog& other) {
  if (this == &other) return *this;
  std::scoped_lock lock(mutex_, other.mutex_);
  records_ = other.records_;
  return *this;
}

const AuditRecord& AuditLog::append(AuditStep step, std::string input_digest, const Json& output,
                                    std::string agent_id, double latency_ms) {
  AuditRecord record;
  record.step = step;
  record.timestamp = std::chrono::system_clock::now();
  record.input_digest = std::move(input_digest);
  record.output_json = canonical_json(output);
  record.agent_id = std::move(agent_id);
  record.latency_ms = std::max(0.0, latency_ms);
  std::lock_guard lock(mutex_);
  record.sequence = records_.size();
  records_.push_back(std::move(record));
  return records_.back();
}

std::vector<AuditRecord> AuditLog::records() const {
  std::lock_guard lock(mutex_);
  return records_;
}

std::size_t AuditLog::size() const {
  std::lock_guard lock(mutex_);
  return records_.size();
}

std::string AuditLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records()) {
    out += canonical_json(to_json(r));
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(PipelineMode mode) {
  switch (mode) {
    case PipelineMode::MultiAgent: return "multi";
    case PipelineMode::SAConcat: return "sa-concat";
    case PipelineMode::SATopK: return "sa-topk";
  }
  return "unknown";
}

void PipelineConfig::validate() const {
  if (mode == PipelineMode::SATopK && top_k < 1) {
    throw Error(ErrorKind::Precondition, "sa-topk requires k >= 1");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorKind::Precondition, "threshold must lie in (0,1)");
  }
  if (context_budget_tokens < 1) {
    throw Error(ErrorKind::Precondition, "context budget must be positive");
  }
  if (concurrency_width < 1) {
    throw Error(ErrorKind::Precondition, "concurrency width must be positive");
  }
}

// ---------------------------------------------------------------------------

namespace {

void check_encodable(const Json& value) {
  switch (value.type()) {
    case Json::value_t::number_float:
      if (!std::isfinite(value.get<double>())) {
        throw Error(ErrorKind::Encoding, "non-finite number is not serializable");
      }
      break;
    case Json::value_t::object:
    case Json::value_t::array:
      for (const auto& item : value) check_encodable(item);
      break;
    case Json::value_t::binary:
      throw Error(ErrorKind::Encoding, "binary values are not serializable");
    case Json::value_t::discarded:
      throw Error(ErrorKind::Encoding, "discarded value is not serializable");
    default:
      break;
  }
}

}  // namespace

std::string canonical_json(const Json& value) {
  check_encodable(value);
  try {
    // Objects are std::map-backed, so keys come out in byte-lexicographic order.
    return value.dump(-1, ' ', false, Json::error_handler_t::strict);
  } catch (const Json::type_error& e) {
    throw Error(ErrorKind::Encoding, e.what());
  }
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::Io, "sha256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(len * 2, '0');
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = kHex[digest[i] >> 4];
    out[2 * i + 1] = kHex[digest[i] & 0xF];
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  return sha256_hex(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

std::uint64_t SplitMix64::next() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Bytes read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::Io, "read failed: " + path);
  return data;
}

void write_file_atomic(const std::string& path, std::string_view contents) {
  const fs::path target(path);
  std::random_device rd;
  const fs::path tmp = target.parent_path() /
                       ("." + target.filename().string() + ".tmp" + std::to_string(rd()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error(ErrorKind::Io, "write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error(ErrorKind::Io, "rename failed: " + path);
  }
}

}  // namespace pkgsentry
