#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pkgsentry/evalharness.hpp"

// httplib pulls in <resolv.h>, whose `_res` macro breaks Eigen if included first.
#include "archive_builder.hpp"
#include "doctest.h"
#include "synthetic.hpp"

using namespace pkgsentry;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "pkgsentry_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult run(const std::string& args) {
  const auto out = scratch() / "stdout.txt";
  const auto err = scratch() / "stderr.txt";
  const std::string cmd = std::string("'") + PKGSENTRY_CLI + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string corpus(const std::string& name = {}) {
  return std::string(PKGSENTRY_SOURCE_DIR) + "/tests/fixtures/corpus" + (name.empty() ? "" : "/" + name);
}

std::string toy_manifest_path() {
  const auto path = scratch() / "toy.jsonl";
  if (!fs::exists(path)) testsupport::write_file(path.string(), testsupport::to_manifest_jsonl(testsupport::generate_corpus(20, 7)));
  return path.string();
}

}  // namespace

TEST_CASE("scan a malicious fixture directory") {
  const auto r = run("scan --dir " + corpus("pongreplace") + " --classifier lexical");
  CHECK(r.code == 1);
  CHECK(r.out.starts_with("MALICIOUS"));
  CHECK(r.out.find("setup.py") != std::string::npos);
}

TEST_CASE("scan a benign fixture directory with full output") {
  const auto out = scratch() / "benign.json";
  const auto audit = scratch() / "benign.audit.jsonl";
  const auto r = run("scan --dir " + corpus("argkit") + " --classifier lexical --out " + out.string() + " --audit " + audit.string());
  CHECK(r.code == 0);
  CHECK(r.out.starts_with("BENIGN"));
  const auto j = Json::parse(slurp(out));
  CHECK(j["verdict"]["label"] == "benign");
  std::istringstream lines(slurp(audit));
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) CHECK(Json::accept(line));
  CHECK(n >= 3);
}

TEST_CASE("conflicting sources are usage errors") {
  CHECK(run("scan --package foo --archive y.tar.gz --classifier lexical").code == 2);
  CHECK(run("scan --classifier lexical").code == 2);
  CHECK(run("scan --dir " + corpus("argkit") + " --classifier nope").code == 2);
  CHECK(run("scan --dir " + corpus("argkit") + " --mode sa-topk:x").code == 2);
  CHECK(run("frobnicate").code == 2);
}

TEST_CASE("runtime failures exit 3 with the stage") {
  const auto r = run("scan --archive " + (scratch() / "missing.tar.gz").string() + " --classifier lexical");
  CHECK(r.code == 3);
  CHECK(r.err.find("stage") != std::string::npos);
}

TEST_CASE("train twice gives identical models, then scan an archive with it") {
  const auto manifest = toy_manifest_path();
  const auto m1 = scratch() / "m1.pksm";
  const auto m2 = scratch() / "m2.pksm";
  const auto a = run("train --manifest " + manifest + " --out " + m1.string() + " --seed 7");
  const auto b = run("train --manifest " + manifest + " --out " + m2.string() + " --seed 7");
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(sha256_hex(slurp(m1)) == sha256_hex(slurp(m2)));
  CHECK(a.out.substr(a.out.find("sha256=")) == b.out.substr(b.out.find("sha256=")));
  CHECK(a.out.find("sha256=" + sha256_hex(slurp(m1))) != std::string::npos);

  const auto archive = scratch() / "pong-10.4.tar.gz";
  testsupport::write_file(archive.string(), testsupport::tar_gz({testsupport::file(
                                                "pong-10.4/setup.py", "import base64, subprocess\n"
                                                                      "x = base64.b64decode('aGVsbG8gd29ybGQgaGVsbG8gd29ybGQgaGVsbG8=')\n"
                                                                      "subprocess.Popen(x, shell=True)\n")}));
  const auto out = scratch() / "archive.json";
  const auto r = run("scan --archive " + archive.string() + " --classifier tfidf:" + m1.string() + " --out " + out.string());
  CHECK((r.code == 0 || r.code == 1));
  const auto j = Json::parse(slurp(out));
  CHECK(j["verdict"]["label"] == (r.code == 1 ? "malicious" : "benign"));
}

TEST_CASE("eval of a perfect classifier reports accuracy 1.0") {
  const auto out = scratch() / "eval.json";
  const auto r = run("eval --manifest " + corpus("manifest.jsonl") + " --classifier lexical --all --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("| lexical |") != std::string::npos);
  const auto j = Json::parse(slurp(out));
  CHECK(j["metrics"]["accuracy"] == 1.0);
}

TEST_CASE("compare identical pipelines") {
  const auto out = scratch() / "compare.json";
  const auto r = run("compare --manifest " + corpus("manifest.jsonl") + " --pipeline lexical --pipeline lexical --seeds 1,2,3 --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("| lexical vs lexical | 0 | 0 | 1 |") != std::string::npos);
  const auto j = Json::parse(slurp(out));
  CHECK(j["mcnemar"]["p_value"] == 1.0);
  CHECK(j["seeds"].size() == 3);

  // Replaying the same invocation yields byte-identical JSON.
  const auto again = scratch() / "compare2.json";
  run("compare --manifest " + corpus("manifest.jsonl") + " --pipeline lexical --pipeline lexical --seeds 1,2,3 --out " + again.string());
  CHECK(slurp(out) == slurp(again));

  const auto rendered = run("report --input " + out.string());
  CHECK(rendered.code == 0);
  CHECK(rendered.out.find("McNemar") != std::string::npos);
}

TEST_CASE("malformed manifests exit 2 with the line number") {
  const auto bad = scratch() / "bad.jsonl";
  testsupport::write_file(bad.string(), "{\"id\": \"a\", \"content\": \"x\", \"label\": \"benign\"}\n{\"id\": \"b\", \"label\": \"evil\", \"content\": \"y\"}\n");
  for (const auto& cmd : {"eval --classifier lexical --all --manifest ", "train --out /dev/null --manifest "}) {
    const auto r = run(cmd + bad.string());
    CHECK(r.code == 2);
    CHECK(r.err.find("line 2") != std::string::npos);
  }
}

TEST_CASE("extract prints a deterministic manifest") {
  const auto a = run("extract --dir " + corpus("pongreplace"));
  const auto b = run("extract --dir " + corpus("pongreplace"));
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  const auto j = Json::parse(a.out);
  CHECK(j.dump().find("setup.py") != std::string::npos);
}

TEST_CASE("efficiency report over the corpus") {
  const auto out = scratch() / "eff.json";
  const auto r = run("report --efficiency " + corpus() + " --classifier lexical --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("files/s") != std::string::npos);
  const auto j = Json::parse(slurp(out));
  CHECK(j["runs"] == 40);
}

TEST_CASE("config files merge under flags") {
  const auto cfg = scratch() / "scan.toml";
  testsupport::write_file(cfg.string(), "[scan]\nclassifier = \"nope\"\n");
  CHECK(run("--config " + cfg.string() + " scan --dir " + corpus("pongreplace") + " --classifier lexical").code == 1);
}
