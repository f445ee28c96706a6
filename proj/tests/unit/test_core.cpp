#include <cmath>
#include <filesystem>
#include <limits>
#include <thread>

#include "doctest.h"
#include "pkgsentry/core.hpp"

using namespace pkgsentry;

TEST_CASE("canonical_json sorts keys and drops whitespace") {
  CHECK(canonical_json(Json::parse(R"({"b":1, "a":2})")) == R"({"a":2,"b":1})");
  CHECK(canonical_json(Json::object()) == "{}");
  const Json nested = Json::parse(R"({"x": {"z": 0, "y": 0}})");
  const auto text = canonical_json(nested);
  CHECK(text == R"({"x":{"y":0,"z":0}})");
  CHECK(Json::parse(text) == nested);
}

TEST_CASE("canonical_json round-trips and is byte-stable") {
  const Json v = {{"list", {1, 2.5, "three", nullptr, true}},
                  {"unicode", "café ☃"},
                  {"obj", {{"k2", {{"b", 1}, {"a", {1, 2}}}}, {"k1", Json::array()}}}};
  const auto once = canonical_json(v);
  CHECK(Json::parse(once) == v);
  CHECK(canonical_json(Json::parse(once)) == once);
}

TEST_CASE("canonical_json rejects non-serializable values") {
  CHECK_THROWS_AS(canonical_json(Json(std::numeric_limits<double>::quiet_NaN())), Error);
  try {
    canonical_json(Json(std::numeric_limits<double>::infinity()));
    FAIL("expected an encoding error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Encoding);
  }
  CHECK_THROWS_AS(canonical_json(Json(std::string("\xff\xfe"))), Error);
}

TEST_CASE("labels parse case-insensitively") {
  CHECK(parse_label("MALICIOUS") == Label::Malicious);
  CHECK(parse_label("Benign") == Label::Benign);
  CHECK_FALSE(parse_label("maybe").has_value());
  CHECK(to_string(Label::Malicious) == "malicious");
}

TEST_CASE("lossy decoding replaces invalid sequences deterministically") {
  const std::string raw = std::string("ok ") + "\xc3\x28" + " \xff" + "end";
  const auto a = decode_utf8_lossy(std::string_view(raw));
  const auto b = decode_utf8_lossy(std::string_view(raw));
  CHECK(a == b);
  CHECK(a.find("\xef\xbf\xbd") != std::string::npos);
  CHECK(a.starts_with("ok "));
  CHECK(a.ends_with("end"));
  CHECK(decode_utf8_lossy(std::string_view("caf\xc3\xa9")) == "caf\xc3\xa9");
}

TEST_CASE("SourceFile enforces safe relative paths") {
  CHECK(is_safe_relative_path("pkg/setup.py"));
  CHECK_FALSE(is_safe_relative_path("/etc/passwd"));
  CHECK_FALSE(is_safe_relative_path("a/../../b"));
  CHECK_FALSE(is_safe_relative_path(""));
  CHECK_THROWS_AS(SourceFile::from_text("p", "../x.py", "x"), Error);

  const auto f = SourceFile::from_text("p", "setup.py", "abcdefghi");
  CHECK(f.size_bytes == 9);
  CHECK(f.token_estimate == 3);
  CHECK(estimate_tokens("") == 0);
  CHECK(estimate_tokens("\xc3\xa9\xc3\xa9\xc3\xa9\xc3\xa9") == 1);
}

TEST_CASE("FileVerdict label follows the threshold") {
  CHECK(FileVerdict::make("a.py", 0.5, 0.5, "t").label == Label::Malicious);
  CHECK(FileVerdict::make("a.py", 0.49, 0.5, "t").label == Label::Benign);
  CHECK_THROWS_AS(FileVerdict::make("a.py", 1.5, 0.5, "t"), Error);
}

TEST_CASE("PackageVerdict couples label and contributing files") {
  PackageRef ref;
  ref.name = "demo";
  const auto m = FileVerdict::make("setup.py", 0.9, 0.5, "t");
  const auto b = FileVerdict::make("mod.py", 0.1, 0.5, "t");
  CHECK_NOTHROW(PackageVerdict(ref, Label::Malicious, "j", {"setup.py"}, {m, b}));
  CHECK_NOTHROW(PackageVerdict(ref, Label::Benign, "j", {}, {b}));
  CHECK_THROWS_AS(PackageVerdict(ref, Label::Malicious, "j", {}, {m}), Error);
  CHECK_THROWS_AS(PackageVerdict(ref, Label::Benign, "j", {"setup.py"}, {m}), Error);
  CHECK_THROWS_AS(PackageVerdict(ref, Label::Malicious, "j", {"mod.py"}, {m, b}), Error);
}

TEST_CASE("PackageRef validation") {
  PackageRef ref;
  ref.name = "Flask_Login";
  CHECK_THROWS_AS(ref.validate(), Error);
  ref.name = "flask-login";
  ref.url = "https://files.example.org/flask-login-1.0.tar.gz";
  CHECK_NOTHROW(ref.validate());
  ref.url = "http://files.example.org/x.tar.gz";
  CHECK_THROWS_AS(ref.validate(), Error);
  ref.url = "ftp/relative";
  CHECK_THROWS_AS(ref.validate(), Error);
}

TEST_CASE("audit log keeps a total order and valid JSON") {
  AuditLog log;
  std::vector<std::thread> workers;
  for (int t = 0; t < 4; ++t) {
    workers.emplace_back([&log, t] {
      for (int i = 0; i < 25; ++i) {
        log.append(AuditStep::ClassifyFile, sha256_hex(std::to_string(t * 100 + i)), {{"i", i}, {"t", t}},
                   "worker", 0.0);
      }
    });
  }
  for (auto& w : workers) w.join();
  const auto records = log.records();
  REQUIRE(records.size() == 100);
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].sequence == i);
    CHECK(Json::accept(records[i].output_json));
    if (i > 0) CHECK(records[i - 1].timestamp <= records[i].timestamp);
  }
  std::size_t lines = 0;
  std::istringstream in(log.to_jsonl());
  for (std::string line; std::getline(in, line);) {
    const auto j = Json::parse(line);
    CHECK(j.contains("step"));
    ++lines;
  }
  CHECK(lines == 100);
}

TEST_CASE("sha256 and UTC formatting") {
  CHECK(sha256_hex(std::string_view("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const auto tp = std::chrono::system_clock::time_point(std::chrono::milliseconds(1700000000123));
  CHECK(format_utc(tp) == "2023-11-14T22:13:20.123Z");
}

TEST_CASE("PipelineConfig validation") {
  PipelineConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.threshold = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.mode = PipelineMode::SATopK;
  cfg.top_k = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.context_budget_tokens = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.concurrency_width = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("seeded shuffle is a deterministic permutation") {
  std::vector<int> a(50), b;
  for (int i = 0; i < 50; ++i) a[i] = i;
  b = a;
  seeded_shuffle(a, 42);
  seeded_shuffle(b, 42);
  CHECK(a == b);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
  auto c = sorted;
  seeded_shuffle(c, 43);
  CHECK(c != a);

  // Reference SplitMix64 output for seed 0.
  SplitMix64 rng(0);
  CHECK(rng.next() == 0xe220a8397b1dcdafULL);
  CHECK(rng.next() == 0x6e789e6aa1b965f4ULL);
}

TEST_CASE("atomic file writes") {
  const auto dir = std::filesystem::temp_directory_path() / "pkgsentry_core_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "out.txt").string();
  write_file_atomic(path, "hello");
  const auto bytes = read_file_bytes(path);
  CHECK(std::string(bytes.begin(), bytes.end()) == "hello");
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(read_file_bytes(path), Error);
}
