#include <chrono>
#include <cstdlib>

#include "doctest.h"
#include "mock_server.hpp"
#include "pkgsentry/llm.hpp"

using namespace pkgsentry;

namespace {

LlmConfig mock_config(const testsupport::ScriptedChat& chat) {
  LlmConfig cfg;
  cfg.base_url = chat.base_url();
  cfg.timeout_s = 2.0;
  cfg.max_retries = 3;
  cfg.backoff_base_ms = 1.0;
  cfg.backoff_max_ms = 4.0;
  return cfg;
}

const std::vector<ChatMessage> kHello{{"system", "sys"}, {"user", "hello"}};

}  // namespace

TEST_CASE("instruction boxes carry the role sentences") {
  CHECK(instruction_text(TemplateId::Fetcher).starts_with("You are a package retriever."));
  CHECK(instruction_text(TemplateId::Extractor).starts_with("You are a file extractor."));
  CHECK(instruction_text(TemplateId::Verdict).starts_with("You are a decision aggregator."));
  CHECK(instruction_text(TemplateId::SingleAgent).starts_with("You are a security auditor."));
  CHECK(instruction_text(TemplateId::Verdict).find("If any file is malicious,\nthe package must be classified as MALICIOUS.") !=
        std::string_view::npos);
  CHECK(instruction_text(TemplateId::SingleAgent).find("\"brief_rationale\"") != std::string_view::npos);
  CHECK(instruction_text(TemplateId::Extractor).find("\"selected_files\"") != std::string_view::npos);
  for (auto id : {TemplateId::Fetcher, TemplateId::Extractor, TemplateId::Verdict, TemplateId::SingleAgent,
                  TemplateId::Rationale}) {
    const auto& t = prompt_template(id);
    CHECK(t.user_template.starts_with(instruction_text(id)));
    CHECK(instruction_text(id).starts_with(t.system_text));
  }
}

TEST_CASE("render_prompt") {
  const auto& verdict = prompt_template(TemplateId::Verdict);
  CHECK(placeholders(verdict) == std::vector<std::string>{"file_list"});
  const std::map<std::string, std::string> b{{"file_list", "- setup.py: malicious (0.97)\n- mod.py: benign (0.02)"}};
  const auto msgs = render_prompt(verdict, b);
  REQUIRE(msgs.size() == 2);
  CHECK(msgs[0].role == "system");
  CHECK(msgs[1].role == "user");
  CHECK(msgs[1].content.find("If any file is malicious") != std::string::npos);
  CHECK(msgs[1].content.find("setup.py: malicious") != std::string::npos);
  const auto again = render_prompt(verdict, b);
  CHECK(canonical_json(to_json(msgs)) == canonical_json(to_json(again)));

  try {
    render_prompt(verdict, {});
    FAIL("expected template error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Template);
    CHECK(e.detail() == "unbound: file_list");
  }

  // Bound values are not re-expanded.
  const auto& rationale = prompt_template(TemplateId::Rationale);
  const auto r = render_prompt(rationale, {{"path", "{code}"}, {"code", "print(1)"}});
  CHECK(r[1].content.find("File: {code}") != std::string::npos);
}

TEST_CASE("chat_complete passes the body through with usage") {
  testsupport::ScriptedChat chat;
  chat.push(200, testsupport::chat_body("fixed answer", true, 40, 9));
  const auto res = chat_complete(mock_config(chat), kHello);
  CHECK(res.text == "fixed answer");
  CHECK(res.usage.prompt_tokens == 40);
  CHECK(res.usage.completion_tokens == 9);
  CHECK_FALSE(res.usage.estimated);
  CHECK(res.usage.latency_ms >= 0.0);
  CHECK(res.transcript.retries == 0);
  CHECK(res.transcript.status == 200);
  CHECK(res.transcript.response_sha256 == sha256_hex(res.transcript.response_body));

  const auto sent = Json::parse(chat.requests().at(0));
  CHECK(sent["temperature"] == 0.0);
  CHECK(sent["messages"].size() == 2);
  CHECK(sent["messages"][1]["content"] == "hello");
}

TEST_CASE("chat_complete estimates usage when the server omits it") {
  testsupport::ScriptedChat chat;
  chat.push(200, testsupport::chat_body("12345678", false));
  const auto res = chat_complete(mock_config(chat), kHello);
  CHECK(res.usage.estimated);
  CHECK(res.usage.completion_tokens == 2);
  CHECK(res.usage.prompt_tokens > 0);
}

TEST_CASE("two 429s then success yields two retries") {
  testsupport::ScriptedChat chat;
  chat.push(429, R"({"error":"slow down"})");
  chat.push(429, R"({"error":"slow down"})");
  chat.push(200, testsupport::chat_body("ok"));
  const auto res = chat_complete(mock_config(chat), kHello);
  CHECK(res.text == "ok");
  CHECK(res.transcript.retries == 2);
  CHECK(chat.requests().size() == 3);
}

TEST_CASE("5xx is retried until exhaustion") {
  testsupport::ScriptedChat chat;
  chat.set_fallback(503, "unavailable");
  auto cfg = mock_config(chat);
  cfg.max_retries = 2;
  try {
    chat_complete(cfg, kHello);
    FAIL("expected transport error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Transport);
  }
  CHECK(chat.requests().size() == 3);
}

TEST_CASE("other 4xx is a request error carrying the body") {
  testsupport::ScriptedChat chat;
  chat.push(400, R"({"error":"bad model name"})");
  try {
    chat_complete(mock_config(chat), kHello);
    FAIL("expected request error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Request);
    CHECK(std::string(e.what()).find("bad model name") != std::string::npos);
  }
  CHECK(chat.requests().size() == 1);
}

TEST_CASE("timeouts become transport errors") {
  testsupport::ScriptedChat chat;
  chat.push(200, testsupport::chat_body("late"), 1500);
  auto cfg = mock_config(chat);
  cfg.timeout_s = 0.2;
  cfg.max_retries = 0;
  try {
    chat_complete(cfg, kHello);
    FAIL("expected transport error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Transport);
  }
}

TEST_CASE("malformed success bodies are parse errors") {
  testsupport::ScriptedChat chat;
  chat.push(200, "not json");
  CHECK_THROWS_AS(chat_complete(mock_config(chat), kHello), Error);
}

TEST_CASE("API key handling") {
  testsupport::ScriptedChat chat;
  auto cfg = mock_config(chat);
  cfg.api_key_env = "PKGSENTRY_TEST_KEY_UNSET";
  cfg.require_api_key = true;
  ::unsetenv("PKGSENTRY_TEST_KEY_UNSET");
  try {
    chat_complete(cfg, kHello);
    FAIL("expected precondition error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Precondition);
  }
  ::setenv("PKGSENTRY_TEST_KEY_UNSET", "sk-test", 1);
  CHECK_NOTHROW(chat_complete(cfg, kHello));
  ::unsetenv("PKGSENTRY_TEST_KEY_UNSET");
}

TEST_CASE("environment base URL override") {
  LlmConfig cfg;
  cfg.base_url = "http://127.0.0.1:9/v1";
  ::setenv("PKGSENTRY_LLM_BASE", "http://127.0.0.1:10/v1", 1);
  CHECK(cfg.effective_base_url() == "http://127.0.0.1:10/v1");
  ::unsetenv("PKGSENTRY_LLM_BASE");
  CHECK(cfg.effective_base_url() == "http://127.0.0.1:9/v1");
}

TEST_CASE("transcripts are clipped at 64 KiB with full-body digests") {
  testsupport::ScriptedChat chat;
  const std::string big(100000, 'x');
  chat.push(200, testsupport::chat_body(big));
  const auto res = chat_complete(mock_config(chat), {{"system", "s"}, {"user", big}});
  CHECK(res.text == big);
  CHECK(res.transcript.request_truncated);
  CHECK(res.transcript.response_truncated);
  CHECK(res.transcript.request_body.size() <= kTranscriptLimit);
  CHECK(res.transcript.response_body.size() <= kTranscriptLimit);
  CHECK(res.transcript.request_sha256 == sha256_hex(chat.requests().at(0)));
}

TEST_CASE("gateway accumulates usage and rate limits") {
  testsupport::ScriptedChat chat;
  chat.set_fallback(200, testsupport::chat_body("x", true, 10, 3));
  auto cfg = mock_config(chat);
  cfg.requests_per_minute = 600;  // one call per 100 ms
  LlmGateway gw(cfg);
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < 4; ++i) gw.complete(kHello);
  const auto elapsed = std::chrono::steady_clock::now() - start;
  CHECK(gw.calls() == 4);
  CHECK(gw.total_prompt_tokens() == 40);
  CHECK(gw.total_completion_tokens() == 12);
  CHECK(elapsed >= std::chrono::milliseconds(280));
}

TEST_CASE("parse_json_decision") {
  const auto d = parse_json_decision(R"({"decision":"malicious","brief_rationale":"b64 exec"})",
                                     {"decision", "brief_rationale"});
  CHECK(d.decision == Label::Malicious);
  CHECK(d.object["brief_rationale"] == "b64 exec");

  const auto upper = parse_json_decision(R"(Sure! {"decision": "BENIGN", "rationale": "x"} hope this helps)",
                                         {"decision"});
  CHECK(upper.decision == Label::Benign);

  const auto fenced = parse_json_decision("```json\n{\"decision\": \"benign\", \"rationale\": \"ok\",}\n```",
                                          {"decision", "rationale"});
  CHECK(fenced.decision == Label::Benign);
  CHECK(fenced.repaired);

  const auto braces = parse_json_decision(R"({"decision":"malicious","rationale":"uses '}' in a string"})",
                                          {"decision"});
  CHECK(braces.object["rationale"] == "uses '}' in a string");

  try {
    parse_json_decision(R"({"decision":"maybe"})", {"decision"});
    FAIL("expected domain error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Domain);
  }
  for (const char* bad : {"no json here", R"({"rationale": "missing decision"})", "{\"decision\": \"benign\""}) {
    try {
      parse_json_decision(bad, {"decision"});
      FAIL("expected parse error for " << bad);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Parse);
    }
  }
}
