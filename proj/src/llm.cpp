#include "pkgsentry/llm.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include "pkgsentry/http.hpp"

namespace pkgsentry {

std::string LlmConfig::effective_base_url() const {
  if (const char* env = std::getenv("PKGSENTRY_LLM_BASE"); env && *env) return env;
  return base_url;
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

std::string_view to_string(TemplateId id) {
  switch (id) {
    case TemplateId::Fetcher: return "fetcher";
    case TemplateId::Extractor: return "extractor";
    case TemplateId::Verdict: return "verdict";
    case TemplateId::SingleAgent: return "single_agent";
    case TemplateId::Rationale: return "rationale";
  }
  return "unknown";
}

namespace {

constexpr std::string_view kFetcherText =
    "You are a package retriever. You will receive a query for a Python package. Your job is to:\n"
    "- interpret the package name and version, even if there are typographical errors or incomplete information,\n"
    "- resolve the latest stable version if no version is provided,\n"
    "- verify that the package exists in the PyPI repository,\n"
    "- return a standardized output with the package name, resolved version, and download URL.\n"
    "\n"
    "Output strictly in JSON with the following keys:\n"
    "\"name\": resolved package name\n"
    "\"version\": resolved version string\n"
    "\"url\": download URL of the package source archive\n"
    "\"note\": brief comment if disambiguation or correction was applied.";

constexpr std::string_view kExtractorText =
    "You are a file extractor. You will receive a Python package archive with multiple files. Your job is to:\n"
    "- extract the archive and list all files,\n"
    "- identify and select only relevant .py source files,\n"
    "- exclude documentation, test cases, configuration files, or other non-code artifacts,\n"
    "- return the list of selected files for downstream analysis.\n"
    "\n"
    "Output strictly in JSON with the following keys:\n"
    "\"selected_files\": list of relevant .py file paths\n"
    "\"excluded_files\": list of files skipped with reasons (e.g., test, doc, config).";

constexpr std::string_view kVerdictText =
    "You are a decision aggregator. You will receive file-level\n"
    "classifications from other agents. If any file is malicious,\n"
    "the package must be classified as MALICIOUS. Otherwise, classify\n"
    "it as BENIGN. Provide a short natural language justification\n"
    "summarizing the reasoning.";

constexpr std::string_view kSingleAgentText =
    "You are a security auditor. Analyze the following files\n"
    "belonging to a single Python package. Based only on the code\n"
    "shown, decide whether the package is MALICIOUS or BENIGN.\n"
    "Pay particular attention to files such as setup.py scripts,\n"
    "payload downloads, subprocess execution, or obfuscated strings.\n"
    "\n"
    "Output strictly in JSON with two keys:\n"
    "  \"decision\": either \"malicious\" or \"benign\"\n"
    "  \"brief_rationale\": a short justification referring to\n"
    "                     the relevant code patterns.";

constexpr std::string_view kRationaleText =
    "You are a security analyst. Analyze the following Python file\n"
    "and decide whether it is MALICIOUS or BENIGN. Base your decision\n"
    "only on the code shown. Look for indicators such as:\n"
    "- obfuscation or encoding (e.g., base64, hex),\n"
    "- subprocess execution or system calls,\n"
    "- network exfiltration,\n"
    "- unauthorized file operations,\n"
    "- suspicious imports or dynamic code execution.\n"
    "\n"
    "Output strictly in JSON with two keys:\n"
    "  \"decision\": either \"malicious\" or \"benign\"\n"
    "  \"rationale\": a brief explanation of the reasoning.";

std::string role_line(std::string_view text) {
  return std::string(text.substr(0, text.find('.') + 1));
}

PromptTemplate build(TemplateId id, std::string_view inputs) {
  const auto text = instruction_text(id);
  return {id, role_line(text), std::string(text) + "\n\n" + std::string(inputs)};
}

}  // namespace

std::string_view instruction_text(TemplateId id) {
  switch (id) {
    case TemplateId::Fetcher: return kFetcherText;
    case TemplateId::Extractor: return kExtractorText;
    case TemplateId::Verdict: return kVerdictText;
    case TemplateId::SingleAgent: return kSingleAgentText;
    case TemplateId::Rationale: return kRationaleText;
  }
  return {};
}

const PromptTemplate& prompt_template(TemplateId id) {
  static const PromptTemplate kFetcher =
      build(TemplateId::Fetcher, "Query: {query}\nKnown package names within edit distance 2: {candidates}");
  static const PromptTemplate kExtractor =
      build(TemplateId::Extractor, "Archive: {archive}\nFiles:\n{file_list}");
  static const PromptTemplate kVerdict = build(
      TemplateId::Verdict,
      "File-level classifications:\n{file_list}\n\n"
      "Answer in JSON with the keys \"decision\" and \"justification\".");
  static const PromptTemplate kSingleAgent = build(TemplateId::SingleAgent, "{files}");
  static const PromptTemplate kRationale = build(TemplateId::Rationale, "File: {path}\n\n{code}");
  switch (id) {
    case TemplateId::Fetcher: return kFetcher;
    case TemplateId::Extractor: return kExtractor;
    case TemplateId::Verdict: return kVerdict;
    case TemplateId::SingleAgent: return kSingleAgent;
    case TemplateId::Rationale: return kRationale;
  }
  return kVerdict;
}

namespace {

bool placeholder_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
}

/// Calls `on_text` / `on_name` for each literal run and placeholder.
template <typename OnText, typename OnName>
void walk_template(std::string_view tmpl, OnText on_text, OnName on_name) {
  std::size_t i = 0;
  while (i < tmpl.size()) {
    const auto open = tmpl.find('{', i);
    if (open == std::string_view::npos) {
      on_text(tmpl.substr(i));
      return;
    }
    std::size_t close = open + 1;
    while (close < tmpl.size() && placeholder_char(tmpl[close])) ++close;
    if (close < tmpl.size() && tmpl[close] == '}' && close > open + 1) {
      on_text(tmpl.substr(i, open - i));
      on_name(tmpl.substr(open + 1, close - open - 1));
      i = close + 1;
    } else {
      on_text(tmpl.substr(i, open + 1 - i));
      i = open + 1;
    }
  }
}

}  // namespace

std::vector<std::string> placeholders(const PromptTemplate& tmpl) {
  std::vector<std::string> out;
  walk_template(
      tmpl.user_template, [](std::string_view) {},
      [&](std::string_view name) {
        if (std::find(out.begin(), out.end(), name) == out.end()) out.emplace_back(name);
      });
  return out;
}

Json to_json(const std::vector<ChatMessage>& messages) {
  Json arr = Json::array();
  for (const auto& m : messages) arr.push_back({{"role", m.role}, {"content", m.content}});
  return arr;
}

std::vector<ChatMessage> render_prompt(const PromptTemplate& tmpl,
                                       const std::map<std::string, std::string>& bindings) {
  for (const auto& name : placeholders(tmpl)) {
    if (!bindings.count(name)) throw Error(ErrorKind::Template, "unbound: " + name);
  }
  std::string user;
  walk_template(
      tmpl.user_template, [&](std::string_view text) { user += text; },
      [&](std::string_view name) { user += bindings.at(std::string(name)); });
  return {{"system", tmpl.system_text}, {"user", std::move(user)}};
}

// ---------------------------------------------------------------------------
// Chat completion
// ---------------------------------------------------------------------------

Json to_json(const Transcript& t) {
  return {{"request_body", t.request_body},
          {"response_body", t.response_body},
          {"request_sha256", t.request_sha256},
          {"response_sha256", t.response_sha256},
          {"request_truncated", t.request_truncated},
          {"response_truncated", t.response_truncated},
          {"status", t.status},
          {"retries", t.retries}};
}

namespace {

std::string clip(const std::string& body, bool& truncated) {
  truncated = body.size() > kTranscriptLimit;
  if (!truncated) return body;
  std::size_t cut = kTranscriptLimit;
  while (cut > 0 && (static_cast<unsigned char>(body[cut]) & 0xC0) == 0x80) --cut;
  return body.substr(0, cut);
}

}  // namespace

ChatResult chat_complete(const LlmConfig& config, const std::vector<ChatMessage>& messages) {
  const std::string url = http::join(config.effective_base_url(), "chat/completions");
  const Json request = {{"model", config.model},
                        {"messages", to_json(messages)},
                        {"temperature", config.temperature},
                        {"max_tokens", config.max_tokens}};
  const std::string body = canonical_json(request);

  std::multimap<std::string, std::string> headers;
  const char* key = config.api_key_env.empty() ? nullptr : std::getenv(config.api_key_env.c_str());
  if (key && *key) {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  } else if (config.require_api_key) {
    throw Error(ErrorKind::Precondition, "API key variable " + config.api_key_env + " is not set");
  }

  ChatResult result;
  result.transcript.request_body = clip(body, result.transcript.request_truncated);
  result.transcript.request_sha256 = sha256_hex(body);

  http::Backoff backoff(config.backoff_base_ms, config.backoff_max_ms, config.seed);
  const auto started = std::chrono::steady_clock::now();
  std::string last_error;
  for (unsigned attempt = 0;; ++attempt) {
    try {
      const auto response = http::post(url, body, "application/json", headers, config.timeout_s);
      result.transcript.status = response.status;
      result.transcript.response_body = clip(response.body, result.transcript.response_truncated);
      result.transcript.response_sha256 = sha256_hex(response.body);
      if (response.status >= 200 && response.status < 300) {
        Json parsed;
        try {
          parsed = Json::parse(response.body);
          result.text = parsed.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const Json::exception& e) {
          throw Error(ErrorKind::Parse, std::string("malformed chat completion response: ") + e.what());
        }
        result.usage.latency_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        const auto usage = parsed.find("usage");
        if (usage != parsed.end() && usage->is_object() && usage->contains("prompt_tokens") &&
            usage->contains("completion_tokens")) {
          result.usage.prompt_tokens = (*usage)["prompt_tokens"].get<std::uint64_t>();
          result.usage.completion_tokens = (*usage)["completion_tokens"].get<std::uint64_t>();
        } else {
          std::string prompt_text;
          for (const auto& m : messages) prompt_text += m.content;
          result.usage.prompt_tokens = estimate_tokens(prompt_text);
          result.usage.completion_tokens = estimate_tokens(result.text);
          result.usage.estimated = true;
        }
        result.transcript.retries = attempt;
        return result;
      }
      last_error = "HTTP " + std::to_string(response.status);
      if (response.status != 429 && response.status < 500) {
        throw Error(ErrorKind::Request, last_error + ": " + response.body);
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Transport) throw;
      last_error = e.detail();
    }
    if (attempt >= config.max_retries) break;
    backoff.sleep(attempt);
  }
  throw Error(ErrorKind::Transport,
              "chat completion failed after " + std::to_string(config.max_retries) + " retries: " + last_error);
}

LlmGateway::LlmGateway(LlmConfig config) : config_(std::move(config)) {}

void LlmGateway::wait_for_slot() {
  if (config_.requests_per_minute <= 0) return;
  const auto interval = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
      std::chrono::duration<double>(60.0 / config_.requests_per_minute));
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(rate_mutex_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_slot_);
    next_slot_ = slot + interval;
  }
  std::this_thread::sleep_until(slot);
}

ChatResult LlmGateway::complete(const std::vector<ChatMessage>& messages) {
  wait_for_slot();
  ChatResult result = chat_complete(config_, messages);
  prompt_tokens_ += result.usage.prompt_tokens;
  completion_tokens_ += result.usage.completion_tokens;
  ++calls_;
  return result;
}

// ---------------------------------------------------------------------------
// Decision parsing
// ---------------------------------------------------------------------------

namespace {

std::optional<std::string_view> first_object_region(std::string_view text) {
  const auto start = text.find('{');
  if (start == std::string_view::npos) return std::nullopt;
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return text.substr(start, i - start + 1);
  }
  return std::nullopt;
}

std::optional<Json> try_parse(std::string_view text) {
  const auto region = first_object_region(text);
  if (!region) return std::nullopt;
  Json j = Json::parse(*region, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

std::string repair(std::string_view text) {
  std::string s;
  // Drop fence lines such as ``` and ```json.
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    auto trimmed = line.substr(std::min(line.size(), line.find_first_not_of(" \t")));
    if (trimmed.rfind("```", 0) != 0) {
      s.append(line);
      s.push_back('\n');
    }
    pos = nl + 1;
  }
  // Inline fences on a single line.
  for (auto f = s.find("```"); f != std::string::npos; f = s.find("```")) s.erase(f, 3);

  std::string out;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      out.push_back(c);
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    if (c == ',') {
      auto next = s.find_first_not_of(" \t\r\n", i + 1);
      if (next != std::string::npos && (s[next] == '}' || s[next] == ']')) continue;
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace

ParsedDecision parse_json_decision(std::string_view text, const std::vector<std::string>& required_keys,
                                   const std::vector<std::string>& decision_keys) {
  ParsedDecision result;
  auto parsed = try_parse(text);
  if (!parsed) {
    parsed = try_parse(repair(text));
    result.repaired = true;
  }
  if (!parsed) throw Error(ErrorKind::Parse, "no JSON object found in model output");
  result.object = std::move(*parsed);
  for (const auto& key : required_keys) {
    if (!result.object.contains(key)) throw Error(ErrorKind::Parse, "missing key: " + key);
  }
  for (const auto& key : decision_keys) {
    if (!result.object.contains(key)) continue;
    const auto& value = result.object[key];
    std::optional<Label> label;
    if (value.is_string()) label = parse_label(value.get<std::string>());
    if (!label) {
      throw Error(ErrorKind::Domain, "decision '" + key + "' must be malicious or benign, got " + value.dump());
    }
    if (!result.decision) result.decision = label;
  }
  return result;
}

}  // namespace pkgsentry
