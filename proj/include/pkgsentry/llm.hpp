#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pkgsentry/core.hpp"

namespace pkgsentry {

struct LlmConfig {
  std::string base_url = "http://127.0.0.1:8000/v1";
  std::string model = "llama-3-8b-instruct";
  double temperature = 0.0;
  unsigned max_tokens = 512;
  double timeout_s = 60.0;
  unsigned max_retries = 3;
  std::string api_key_env = "PKGSENTRY_LLM_API_KEY";
  bool require_api_key = false;
  double backoff_base_ms = 500.0;
  double backoff_max_ms = 16000.0;
  double requests_per_minute = 0.0;  // 0 = unlimited
  std::uint64_t seed = 0;

  /// base_url, or PKGSENTRY_LLM_BASE when set.
  std::string effective_base_url() const;
};

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

enum class TemplateId { Fetcher, Extractor, Verdict, SingleAgent, Rationale };

std::string_view to_string(TemplateId id);

struct PromptTemplate {
  TemplateId id = TemplateId::Verdict;
  std::string system_text;
  std::string user_template;  // `{name}` placeholders
};

/// The agent instruction boxes, verbatim.
std::string_view instruction_text(TemplateId id);

const PromptTemplate& prompt_template(TemplateId id);

/// Placeholder names in order of first appearance.
std::vector<std::string> placeholders(const PromptTemplate& tmpl);

struct ChatMessage {
  std::string role;
  std::string content;
};

Json to_json(const std::vector<ChatMessage>& messages);

/// [system, user]; throws Error(Template, "unbound: <name>") for a missing
/// binding. Substitution is single-pass, so bound values are never re-expanded.
std::vector<ChatMessage> render_prompt(const PromptTemplate& tmpl,
                                       const std::map<std::string, std::string>& bindings);

// ---------------------------------------------------------------------------
// Chat completion
// ---------------------------------------------------------------------------

struct ChatUsage {
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  double latency_ms = 0.0;
  bool estimated = false;
};

/// Request/response pair as mirrored into audit records. Bodies longer than
/// 64 KiB are truncated; the digests always cover the full body.
struct Transcript {
  std::string request_body;
  std::string response_body;
  std::string request_sha256;
  std::string response_sha256;
  bool request_truncated = false;
  bool response_truncated = false;
  int status = 0;
  unsigned retries = 0;
};

Json to_json(const Transcript& t);

struct ChatResult {
  std::string text;
  ChatUsage usage;
  Transcript transcript;
};

inline constexpr std::size_t kTranscriptLimit = 64 * 1024;

/// POST {base}/chat/completions. Retries 429/5xx and transport failures with
/// exponential backoff; other 4xx raise Error(Request) carrying the body;
/// exhausted retries raise Error(Transport).
ChatResult chat_complete(const LlmConfig& config, const std::vector<ChatMessage>& messages);

/// Shared client: rate limiting plus running token totals.
class LlmGateway {
 public:
  explicit LlmGateway(LlmConfig config);

  ChatResult complete(const std::vector<ChatMessage>& messages);

  const LlmConfig& config() const noexcept { return config_; }
  std::uint64_t total_prompt_tokens() const noexcept { return prompt_tokens_; }
  std::uint64_t total_completion_tokens() const noexcept { return completion_tokens_; }
  std::uint64_t calls() const noexcept { return calls_; }

 private:
  void wait_for_slot();

  LlmConfig config_;
  std::mutex rate_mutex_;
  std::chrono::steady_clock::time_point next_slot_{};
  std::atomic<std::uint64_t> prompt_tokens_{0};
  std::atomic<std::uint64_t> completion_tokens_{0};
  std::atomic<std::uint64_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Decision parsing
// ---------------------------------------------------------------------------

struct ParsedDecision {
  Json object;
  std::optional<Label> decision;  // set when a decision key was validated
  bool repaired = false;
};

/// Extracts the first balanced {...} region, checks required keys, and
/// validates decision keys against malicious|benign (case-insensitive).
/// One repair attempt (strip code fences, drop trailing commas) is made
/// before giving up with Error(Parse); a bad decision value is Error(Domain).
ParsedDecision parse_json_decision(std::string_view text, const std::vector<std::string>& required_keys,
                                   const std::vector<std::string>& decision_keys = {"decision"});

}  // namespace pkgsentry
