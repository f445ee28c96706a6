#include "pkgsentry/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <random>
#include <set>
#include <thread>

namespace pkgsentry {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& parent) {
    const fs::path base = parent.empty() ? fs::temp_directory_path() : fs::path(parent);
    fs::create_directories(base);
    std::random_device rd;
    for (int attempt = 0; attempt < 16; ++attempt) {
      auto candidate = base / ("pkgsentry-scan-" + std::to_string(rd()) + std::to_string(rd()));
      if (fs::create_directory(candidate)) {
        path_ = candidate;
        return;
      }
    }
    throw Error(ErrorKind::Io, "cannot create scratch directory under " + base.string());
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

/// Runs `fn`, re-raising any error tagged with `stage`.
template <typename Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    if (!e.stage().empty()) throw;
    throw Error(e.kind(), e.detail(), stage);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Io, e.what(), stage);
  }
}

std::string local_package_name(const fs::path& raw) {
  fs::path path = raw.lexically_normal();
  if (path.filename().empty()) path = path.parent_path();
  auto stem = path.filename().string();
  for (const char* ext : {".tar.gz", ".tgz", ".zip"}) {
    const std::string_view e(ext);
    if (stem.size() > e.size() && stem.compare(stem.size() - e.size(), e.size(), e) == 0) {
      stem.resize(stem.size() - e.size());
      break;
    }
  }
  try {
    return normalize_name(stem);
  } catch (const Error&) {
    return "local-package";
  }
}

/// sdists wrap everything in one top-level directory; drop it so paths read
/// as they would inside the project ("setup.py", not "pkg-1.0/setup.py").
std::string strip_common_root(std::vector<std::string>& entries) {
  if (entries.empty()) return {};
  const auto first_slash = entries.front().find('/');
  if (first_slash == std::string::npos) return {};
  const std::string prefix = entries.front().substr(0, first_slash + 1);
  for (const auto& e : entries) {
    if (e.size() <= prefix.size() || e.compare(0, prefix.size(), prefix) != 0) return {};
  }
  for (auto& e : entries) e.erase(0, prefix.size());
  return prefix;
}

void add_usage(LlmTotals& totals, const Json& trace) {
  const auto usage = trace.find("usage");
  if (usage == trace.end()) return;
  ++totals.calls;
  totals.prompt_tokens += usage->value("prompt_tokens", std::uint64_t{0});
  totals.completion_tokens += usage->value("completion_tokens", std::uint64_t{0});
  totals.estimated = totals.estimated || usage->value("estimated", false);
}

Json usage_json(const ChatResult& reply) {
  return {{"prompt_tokens", reply.usage.prompt_tokens},
          {"completion_tokens", reply.usage.completion_tokens},
          {"estimated", reply.usage.estimated}};
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::vector<FileVerdict> classify_all(const std::vector<SourceFile>& files, const Classifier& classifier,
                                      std::size_t width, std::vector<Json>& traces) {
  const std::size_t n = files.size();
  std::vector<std::optional<FileVerdict>> verdicts(n);
  std::vector<std::exception_ptr> errors(n);
  traces.assign(n, Json::object());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        verdicts[i] = classify_file(classifier, files[i], &traces[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(width, 1), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  std::vector<FileVerdict> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const Error& e) {
        throw Error(e.kind(), files[i].relative_path + ": " + e.detail());
      } catch (const std::exception& e) {
        throw Error(ErrorKind::ClassificationUnavailable, files[i].relative_path + ": " + e.what());
      }
    }
    out.push_back(std::move(*verdicts[i]));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Aggregation and justification
// ---------------------------------------------------------------------------

std::pair<Label, std::vector<std::string>> aggregate_verdict(const std::vector<FileVerdict>& verdicts) {
  if (verdicts.empty()) throw Error(ErrorKind::Precondition, "cannot aggregate an empty verdict list");
  std::vector<std::string> contributing;
  for (const auto& v : verdicts) {
    if (v.label == Label::Malicious) contributing.push_back(v.relative_path);
  }
  std::sort(contributing.begin(), contributing.end());
  contributing.erase(std::unique(contributing.begin(), contributing.end()), contributing.end());
  return {contributing.empty() ? Label::Benign : Label::Malicious, std::move(contributing)};
}

std::vector<std::string> top_signals(const std::vector<SourceFile>& files) {
  std::map<std::string, std::uint64_t> weight;
  for (const auto& f : files) {
    const auto v = extract_indicators(tokenize_source(f.content), PatternTable::builtin(),
                                      is_setup_script(f.relative_path));
    for (auto ind : kCountIndicators) {
      if (v.count(ind)) weight[std::string(to_string(ind))] += v.count(ind);
    }
    if (v.decode_then_exec) weight["decode_then_exec"] += 1;
    if (v.install_hook) weight["install_hook"] += 1;
  }
  std::vector<std::pair<std::string, std::uint64_t>> ranked(weight.begin(), weight.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  for (auto& [name, _] : ranked) out.push_back(name);
  return out;
}

namespace {

std::string template_justification(const std::vector<FileVerdict>& verdicts, const std::vector<std::string>& contributing,
                                   const std::vector<std::string>& signals) {
  const auto n = std::to_string(verdicts.size());
  if (contributing.empty()) return "BENIGN: 0 of " + n + " files flagged";
  return "MALICIOUS: " + std::to_string(contributing.size()) + " of " + n + " files flagged (" +
         join(contributing, ", ") + "); top signals: " + (signals.empty() ? "none" : join(signals, ", "));
}

}  // namespace

Justification synthesize_justification(const std::vector<FileVerdict>& verdicts,
                                       const std::vector<std::string>& signals, LlmGateway* gateway) {
  std::vector<std::string> contributing;
  if (!verdicts.empty()) contributing = aggregate_verdict(verdicts).second;
  const std::string fallback = template_justification(verdicts, contributing, signals);
  if (!gateway) return {fallback, "template", Json::object()};

  std::string listing;
  for (const auto& v : verdicts) {
    char score[32];
    std::snprintf(score, sizeof(score), "%.3f", v.score);
    listing += "- " + v.relative_path + ": " + std::string(to_string(v.label)) + " (score " + score + ")";
    if (v.rationale) listing += "; " + *v.rationale;
    listing += '\n';
  }
  const auto messages = render_prompt(prompt_template(TemplateId::Verdict), {{"file_list", listing}});
  Json trace = Json::object();
  try {
    const auto reply = gateway->complete(messages);
    trace = {{"transcript", to_json(reply.transcript)}, {"usage", usage_json(reply)}};
    const auto parsed = parse_json_decision(reply.text, {"justification"});
    const auto& value = parsed.object.at("justification");
    if (!value.is_string() || value.get<std::string>().empty()) {
      throw Error(ErrorKind::Parse, "justification must be a non-empty string");
    }
    std::string text = value.get<std::string>();
    std::vector<std::string> missing;
    for (const auto& path : contributing) {
      if (text.find(path) == std::string::npos) missing.push_back(path);
    }
    if (!missing.empty()) text += " [flagged files: " + join(missing, ", ") + "]";
    if (parsed.decision) trace["agent_decision"] = std::string(to_string(*parsed.decision));
    return {std::move(text), "gateway", std::move(trace)};
  } catch (const Error& e) {
    trace["fallback_reason"] = std::string(to_string(e.kind())) + ": " + e.detail();
    return {fallback, "template_fallback", std::move(trace)};
  }
}

// ---------------------------------------------------------------------------
// Single-agent baseline
// ---------------------------------------------------------------------------

std::vector<SourceFile> rank_files(const std::vector<SourceFile>& files) {
  std::vector<std::pair<std::uint32_t, const SourceFile*>> keyed;
  for (const auto& f : files) {
    const auto v = extract_indicators(tokenize_source(f.content), PatternTable::builtin(),
                                      is_setup_script(f.relative_path));
    keyed.emplace_back(v.total(), &f);
  }
  std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    if (a.second->size_bytes != b.second->size_bytes) return a.second->size_bytes > b.second->size_bytes;
    return a.second->relative_path < b.second->relative_path;
  });
  std::vector<SourceFile> out;
  for (const auto& [_, f] : keyed) out.push_back(*f);
  return out;
}

namespace {

std::string file_block(const SourceFile& f, std::string_view content) {
  return "### FILE: " + f.relative_path + "\n" + std::string(content) + "\n\n";
}

std::uint64_t codepoints(std::string_view text) {
  return static_cast<std::uint64_t>(std::count_if(text.begin(), text.end(), [](char c) {
    return (static_cast<unsigned char>(c) & 0xC0) != 0x80;
  }));
}

std::string_view prefix_codepoints(std::string_view text, std::uint64_t count) {
  std::size_t i = 0;
  std::uint64_t seen = 0;
  for (; i < text.size(); ++i) {
    if ((static_cast<unsigned char>(text[i]) & 0xC0) != 0x80) {
      if (seen == count) break;
      ++seen;
    }
  }
  return text.substr(0, i);
}

}  // namespace

void run_single_agent(const PackageRef& package, const std::vector<SourceFile>& files, const PipelineConfig& config,
                      LlmGateway& gateway, ScanResult& result) {
  if (files.empty()) throw Error(ErrorKind::EmptyPackage, "no files for the single-agent prompt");
  const auto& tmpl = prompt_template(TemplateId::SingleAgent);

  std::vector<const SourceFile*> chosen;
  std::string body;
  bool partial = false;
  if (config.mode == PipelineMode::SATopK) {
    const auto ranked = rank_files(files);
    for (std::size_t i = 0; i < ranked.size() && i < config.top_k; ++i) {
      const auto it = std::find_if(files.begin(), files.end(), [&](const SourceFile& f) {
        return f.relative_path == ranked[i].relative_path;
      });
      chosen.push_back(&*it);
      body += file_block(*it, it->content);
    }
    result.dropped_files = files.size() - chosen.size();
    result.truncated = false;
  } else {
    // Budget is checked against the rendered prompt: ceil(system / 4) + ceil(user / 4).
    const std::uint64_t system_tokens = estimate_tokens(tmpl.system_text);
    const std::uint64_t user_fixed = codepoints(tmpl.user_template) - codepoints("{files}");
    const auto prompt_tokens = [&](std::uint64_t body_chars) {
      return system_tokens + (user_fixed + body_chars + 3) / 4;
    };
    std::uint64_t body_chars = 0;
    for (const auto& f : files) {
      const auto block = file_block(f, f.content);
      const auto chars = codepoints(block);
      if (prompt_tokens(body_chars + chars) > config.context_budget_tokens) break;
      body_chars += chars;
      chosen.push_back(&f);
      body += block;
    }
    if (chosen.empty()) {
      // Not even the first file fits: send as much of it as the budget allows.
      const auto& f = files.front();
      const auto header = codepoints(file_block(f, {}));
      const std::uint64_t capacity =
          config.context_budget_tokens > system_tokens ? (config.context_budget_tokens - system_tokens) * 4 : 0;
      const std::uint64_t used = user_fixed + header;
      const std::uint64_t room = capacity > used ? std::min(capacity - used, codepoints(f.content)) : 0;
      body = file_block(f, prefix_codepoints(f.content, room));
      chosen.push_back(&f);
      partial = true;
    }
    result.dropped_files = files.size() - chosen.size();
    result.truncated = result.dropped_files > 0 || partial;
  }

  const auto start = Clock::now();
  const auto messages = render_prompt(tmpl, {{"files", body}});
  const auto reply = gateway.complete(messages);
  const double latency = ms_since(start);
  ++result.llm.calls;
  result.llm.prompt_tokens += reply.usage.prompt_tokens;
  result.llm.completion_tokens += reply.usage.completion_tokens;
  result.llm.estimated = result.llm.estimated || reply.usage.estimated;

  Json output = {{"transcript", to_json(reply.transcript)},
                 {"usage", usage_json(reply)},
                 {"truncated", result.truncated},
                 {"dropped_files", result.dropped_files}};
  result.prompt_files.clear();
  for (const auto* f : chosen) result.prompt_files.push_back(f->relative_path);
  output["included_files"] = result.prompt_files;

  ParsedDecision parsed;
  try {
    parsed = parse_json_decision(reply.text, {"decision", "brief_rationale"});
    if (!parsed.decision) throw Error(ErrorKind::Parse, "missing decision");
  } catch (const Error& e) {
    output["error"] = std::string(to_string(e.kind())) + ": " + e.detail();
    result.audit.append(AuditStep::SingleAgent, sha256_hex(canonical_json(to_json(messages))), output,
                        "single_agent", latency);
    throw;
  }
  const Label label = *parsed.decision;
  const auto& rationale = parsed.object.at("brief_rationale");
  const std::string justification = rationale.is_string() ? rationale.get<std::string>() : rationale.dump();
  output["decision"] = std::string(to_string(label));
  output["brief_rationale"] = justification;
  output["repaired"] = parsed.repaired;
  result.audit.append(AuditStep::SingleAgent, sha256_hex(canonical_json(to_json(messages))), output, "single_agent",
                      latency);

  // The package decision is projected onto every file the agent saw.
  std::vector<FileVerdict> verdicts;
  std::vector<std::string> contributing;
  const double score = label == Label::Malicious ? 1.0 : 0.0;
  for (const auto& path : result.prompt_files) {
    verdicts.push_back(FileVerdict::make(path, score, 0.5, "single_agent", std::nullopt, latency));
    if (label == Label::Malicious) contributing.push_back(path);
  }
  std::sort(contributing.begin(), contributing.end());
  result.verdict.emplace(package, label, justification, std::move(contributing), std::move(verdicts));
}

// ---------------------------------------------------------------------------
// Full scan
// ---------------------------------------------------------------------------

ScanResult scan_package(const ScanInput& input, const ScanContext& ctx) {
  ctx.config.validate();
  const bool multi = ctx.config.mode == PipelineMode::MultiAgent;
  if (multi && !ctx.classifier) throw Error(ErrorKind::Precondition, "multi-agent mode needs a classifier");
  if (!multi && !ctx.gateway) throw Error(ErrorKind::Precondition, "single-agent modes need an LLM gateway");

  const auto scan_start = Clock::now();
  ScanResult result;
  result.mode = ctx.config.mode;
  ScratchDir scratch(ctx.work_dir);
  PackageRef package;
  fs::path root;
  std::vector<std::string> entries;

  if (input.kind == ScanInput::Kind::Package) {
    const auto start = Clock::now();
    in_stage("fetch", [&] {
      std::shared_ptr<MetadataSource> source = ctx.metadata;
      if (!source) source = std::make_shared<RegistryClient>(ctx.registry);
      package = resolve_package(input.value, *source, ctx.assist.get(), ctx.popular_names);
      const auto download_dir = scratch.path() / "download";
      fs::create_directories(download_dir);
      result.archive = download_sdist(package, ctx.registry, download_dir.string());
    });
    result.timings_ms["fetch"] = ms_since(start);
    result.audit.append(AuditStep::Fetch, sha256_hex(input.value),
                        {{"package", to_json(package)}, {"archive", {{"sha256", result.archive->sha256},
                                                                     {"size_bytes", result.archive->size_bytes},
                                                                     {"format", to_string(result.archive->format)}}}},
                        "fetcher", result.timings_ms["fetch"]);
  } else {
    package.raw_query = input.value;
    package.name = local_package_name(input.value);
  }

  {
    const auto start = Clock::now();
    std::string digest;
    in_stage("extract", [&] {
      if (input.kind == ScanInput::Kind::Directory) {
        root = input.value;
        if (!fs::is_directory(root)) throw Error(ErrorKind::Io, "not a directory: " + input.value);
        entries = list_directory(root.string());
        digest = sha256_hex(canonical_json(Json(entries)));
      } else {
        if (input.kind == ScanInput::Kind::Archive) result.archive = inspect_archive(input.value);
        root = scratch.path() / "unpacked";
        fs::create_directories(root);
        entries = unpack(*result.archive, root.string(), ctx.limits);
        root /= strip_common_root(entries);
        digest = result.archive->sha256;
      }
      const std::string package_id = package.version.empty() ? package.name : package.name + "-" + package.version;
      result.manifest = select_files(entries, ctx.rules, directory_loader(root.string()), package_id);
      if (result.manifest.selected.empty()) {
        throw Error(ErrorKind::EmptyPackage, "no source files selected from " + input.value);
      }
    });
    result.timings_ms["extract"] = ms_since(start);
    result.audit.append(AuditStep::Extract, digest, to_json(result.manifest), "extractor",
                        result.timings_ms["extract"]);
  }

  if (!multi) {
    const auto start = Clock::now();
    in_stage("single_agent", [&] { run_single_agent(package, result.manifest.selected, ctx.config, *ctx.gateway, result); });
    result.timings_ms["single_agent"] = ms_since(start);
    result.timings_ms["total"] = ms_since(scan_start);
    return result;
  }

  std::vector<FileVerdict> verdicts;
  {
    const auto start = Clock::now();
    std::vector<Json> traces;
    in_stage("classify", [&] {
      verdicts = classify_all(result.manifest.selected, *ctx.classifier, ctx.config.concurrency_width, traces);
    });
    result.timings_ms["classify"] = ms_since(start);
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
      add_usage(result.llm, traces[i]);
      result.audit.append(AuditStep::ClassifyFile, sha256_hex(result.manifest.selected[i].content),
                          {{"verdict", to_json(verdicts[i], false)}, {"trace", traces[i]}},
                          ctx.classifier->id(), verdicts[i].latency_ms);
    }
  }

  {
    const auto start = Clock::now();
    Justification just;
    std::pair<Label, std::vector<std::string>> agg;
    in_stage("aggregate", [&] {
      agg = aggregate_verdict(verdicts);
      std::vector<SourceFile> flagged;
      for (const auto& f : result.manifest.selected) {
        if (std::binary_search(agg.second.begin(), agg.second.end(), f.relative_path)) flagged.push_back(f);
      }
      just = synthesize_justification(verdicts, top_signals(flagged), ctx.gateway.get());
      add_usage(result.llm, just.trace);
      result.verdict.emplace(package, agg.first, just.text, agg.second, verdicts);
    });
    result.timings_ms["aggregate"] = ms_since(start);
    Json input_list = Json::array();
    for (const auto& v : verdicts) input_list.push_back(to_json(v, false));
    result.audit.append(AuditStep::Aggregate, sha256_hex(canonical_json(input_list)),
                        {{"label", to_string(agg.first)},
                         {"contributing_files", agg.second},
                         {"justification", just.text},
                         {"justification_source", just.source},
                         {"trace", just.trace}},
                        "verdict", result.timings_ms["aggregate"]);
  }
  result.timings_ms["total"] = ms_since(scan_start);
  return result;
}

Json to_json(const ScanResult& r) {
  Json audit = Json::array();
  Json audit_timing = Json::array();
  for (const auto& rec : r.audit.records()) {
    audit.push_back({{"sequence", rec.sequence},
                     {"step", to_string(rec.step)},
                     {"input_digest", rec.input_digest},
                     {"output", Json::parse(rec.output_json)},
                     {"agent_id", rec.agent_id}});
    audit_timing.push_back(
        {{"sequence", rec.sequence}, {"timestamp", format_utc(rec.timestamp)}, {"latency_ms", rec.latency_ms}});
  }
  Json file_latency = Json::object();
  if (r.verdict) {
    for (const auto& v : r.verdict->file_verdicts()) file_latency[v.relative_path] = v.latency_ms;
  }
  Json j = {{"verdict", r.verdict ? to_json(*r.verdict, false) : Json(nullptr)},
            {"manifest", to_json(r.manifest)},
            {"mode", to_string(r.mode)},
            {"truncated", r.truncated},
            {"dropped_files", r.dropped_files},
            {"audit", audit},
            {"llm",
             {{"calls", r.llm.calls},
              {"prompt_tokens", r.llm.prompt_tokens},
              {"completion_tokens", r.llm.completion_tokens},
              {"estimated", r.llm.estimated}}},
            {"timing", {{"stages_ms", r.timings_ms}, {"files_ms", file_latency}, {"audit", audit_timing}}}};
  if (r.mode != PipelineMode::MultiAgent) j["prompt_files"] = r.prompt_files;
  if (r.archive) {
    j["archive"] = {{"sha256", r.archive->sha256},
                    {"size_bytes", r.archive->size_bytes},
                    {"format", to_string(r.archive->format)}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Fetcher assist
// ---------------------------------------------------------------------------

LlmFetcherAssist::LlmFetcherAssist(std::shared_ptr<LlmGateway> gateway) : gateway_(std::move(gateway)) {}

std::optional<std::string> LlmFetcherAssist::choose(std::string_view query, std::span<const std::string> candidates) {
  if (!gateway_ || candidates.empty()) return std::nullopt;
  const auto messages =
      render_prompt(prompt_template(TemplateId::Fetcher),
                    {{"query", std::string(query)},
                     {"candidates", join(std::vector<std::string>(candidates.begin(), candidates.end()), ", ")}});
  try {
    const auto parsed = parse_json_decision(gateway_->complete(messages).text, {"name"}, {});
    const auto& name = parsed.object.at("name");
    if (!name.is_string()) return std::nullopt;
    const auto chosen = name.get<std::string>();
    if (std::find(candidates.begin(), candidates.end(), chosen) == candidates.end()) return std::nullopt;
    return chosen;
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace pkgsentry
