#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pkgsentry/classifiers.hpp"
#include "pkgsentry/core.hpp"
#include "pkgsentry/extractor.hpp"
#include "pkgsentry/fetcher.hpp"
#include "pkgsentry/llm.hpp"

namespace pkgsentry {

struct ScanInput {
  enum class Kind { Package, Archive, Directory };
  Kind kind = Kind::Directory;
  std::string value;  // registry query or filesystem path

  static ScanInput package(std::string query) { return {Kind::Package, std::move(query)}; }
  static ScanInput archive(std::string path) { return {Kind::Archive, std::move(path)}; }
  static ScanInput directory(std::string path) { return {Kind::Directory, std::move(path)}; }
};

struct ScanContext {
  PipelineConfig config;
  ClassifierHandle classifier;             // MultiAgent mode
  std::shared_ptr<LlmGateway> gateway;     // SA modes; optional justification in MultiAgent
  RegistryEndpoint registry;
  std::shared_ptr<MetadataSource> metadata;  // overrides the live registry when set
  std::shared_ptr<ResolutionAssist> assist;
  std::vector<std::string> popular_names;
  SelectionRules rules;
  UnpackLimits limits;
  std::string work_dir;  // scratch space; the system temp directory when empty
};

struct LlmTotals {
  std::uint64_t calls = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  bool estimated = false;
};

struct ScanResult {
  std::optional<PackageVerdict> verdict;  // always set on success
  FileManifest manifest;
  AuditLog audit;
  std::map<std::string, double> timings_ms;  // per stage plus "total"
  PipelineMode mode = PipelineMode::MultiAgent;
  bool truncated = false;
  std::size_t dropped_files = 0;
  std::vector<std::string> prompt_files;  // files that reached the single-agent prompt
  LlmTotals llm;
  std::optional<ArchiveInfo> archive;

  std::size_t files_processed() const { return manifest.selected.size(); }
};

/// Deterministic part of the result; wall-clock data lives under "timing".
Json to_json(const ScanResult& result);

/// fetch -> extract -> classify -> aggregate, or fetch -> extract ->
/// single-agent in the SA modes. Errors carry the failing stage as their tag.
ScanResult scan_package(const ScanInput& input, const ScanContext& ctx);

/// Malicious iff any verdict is; contributing paths are sorted.
std::pair<Label, std::vector<std::string>> aggregate_verdict(const std::vector<FileVerdict>& verdicts);

struct Justification {
  std::string text;
  std::string source;  // "template", "gateway" or "template_fallback"
  Json trace;
};

/// Template text, or the Verdict agent's "justification" when a gateway is
/// given. Gateway text that omits a contributing path gets the flagged paths
/// appended so the justification always names them.
Justification synthesize_justification(const std::vector<FileVerdict>& verdicts,
                                       const std::vector<std::string>& top_signals,
                                       LlmGateway* gateway = nullptr);

/// Indicator names across `files`, ordered by total count (desc) then name.
std::vector<std::string> top_signals(const std::vector<SourceFile>& files);

/// Files ordered by (indicator total desc, size desc, path asc).
std::vector<SourceFile> rank_files(const std::vector<SourceFile>& files);

/// Single-agent baseline over an extracted file list. Appends a SingleAgent
/// record to `result.audit` and fills verdict, truncation and prompt fields.
void run_single_agent(const PackageRef& package, const std::vector<SourceFile>& files,
                      const PipelineConfig& config, LlmGateway& gateway, ScanResult& result);

/// Fetcher-agent disambiguation through the gateway.
class LlmFetcherAssist final : public ResolutionAssist {
 public:
  explicit LlmFetcherAssist(std::shared_ptr<LlmGateway> gateway);
  std::optional<std::string> choose(std::string_view query, std::span<const std::string> candidates) override;

 private:
  std::shared_ptr<LlmGateway> gateway_;
};

}  // namespace pkgsentry
