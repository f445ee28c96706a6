#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pkgsentry/core.hpp"

namespace pkgsentry {

/// One labeled file. Exactly one of `path` and `content` is set.
struct DatasetEntry {
  std::string id;
  std::string package_id;
  std::optional<std::string> path;     // relative to the manifest directory
  std::optional<std::string> content;  // inline source text
  std::string relative_path;           // path inside the package, e.g. "setup.py"
  Label label = Label::Benign;
};

/// JSONL manifest: {"id", "package_id"?, "path"|"content", "label", "relative_path"?}
/// per line. package_id defaults to id.
struct DatasetManifest {
  std::string name;
  std::string base_dir;
  std::vector<DatasetEntry> entries;

  /// Error(Manifest) with the 1-based line number for malformed lines and
  /// duplicate ids.
  static DatasetManifest parse_jsonl(std::string_view text, std::string name = {},
                                     std::string base_dir = ".");
  /// Error(Io) when the file cannot be read.
  static DatasetManifest load(const std::string& path);

  std::string to_jsonl() const;

  /// Reads an entry's content; Error(Io) when the referenced file is missing.
  SourceFile load_entry(const DatasetEntry& entry) const;

  /// Sorted, unique.
  std::vector<std::string> package_ids() const;

  /// Entries of the given packages, in manifest order.
  DatasetManifest subset(const std::vector<std::string>& package_ids) const;
};

}  // namespace pkgsentry
