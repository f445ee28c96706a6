#include "pkgsentry/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <set>
#include <unordered_set>

namespace pkgsentry {

namespace fs = std::filesystem;

namespace {

std::string required_string(const Json& obj, const char* key, std::size_t line) {
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_string() || it->get<std::string>().empty()) {
    throw Error(ErrorKind::Manifest,
                "line " + std::to_string(line) + ": missing or empty string field '" + key + "'");
  }
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const Json& obj, const char* key, std::size_t line) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw Error(ErrorKind::Manifest, "line " + std::to_string(line) + ": field '" + key + "' must be a string");
  }
  return it->get<std::string>();
}

}  // namespace

DatasetManifest DatasetManifest::parse_jsonl(std::string_view text, std::string name, std::string base_dir) {
  DatasetManifest manifest;
  manifest.name = std::move(name);
  manifest.base_dir = std::move(base_dir);
  std::unordered_set<std::string> seen;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

    Json obj = Json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) {
      throw Error(ErrorKind::Manifest, "line " + std::to_string(line_no) + ": not a JSON object");
    }
    DatasetEntry e;
    e.id = required_string(obj, "id", line_no);
    e.package_id = optional_string(obj, "package_id", line_no).value_or(e.id);
    e.path = optional_string(obj, "path", line_no);
    e.content = optional_string(obj, "content", line_no);
    if (e.path.has_value() == e.content.has_value()) {
      throw Error(ErrorKind::Manifest,
                  "line " + std::to_string(line_no) + ": exactly one of 'path' and 'content' is required");
    }
    const auto label = parse_label(required_string(obj, "label", line_no));
    if (!label) {
      throw Error(ErrorKind::Manifest,
                  "line " + std::to_string(line_no) + ": label must be malicious or benign");
    }
    e.label = *label;

    if (auto rel = optional_string(obj, "relative_path", line_no)) {
      e.relative_path = *rel;
    } else if (e.path && is_safe_relative_path(*e.path)) {
      e.relative_path = *e.path;
    } else if (e.path) {
      e.relative_path = fs::path(*e.path).filename().string();
    } else {
      e.relative_path = e.id;
    }
    if (!is_safe_relative_path(e.relative_path)) {
      throw Error(ErrorKind::Manifest, "line " + std::to_string(line_no) + ": unsafe relative_path '" +
                                           e.relative_path + "'");
    }
    if (!seen.insert(e.id).second) {
      throw Error(ErrorKind::Manifest, "line " + std::to_string(line_no) + ": duplicate id '" + e.id + "'");
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  Bytes bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error& e) {
    throw Error(ErrorKind::Io, "cannot read manifest " + path + ": " + e.detail());
  }
  const std::string text(bytes.begin(), bytes.end());
  const fs::path p(path);
  const auto dir = p.has_parent_path() ? p.parent_path().string() : std::string(".");
  return parse_jsonl(text, p.stem().string(), dir);
}

std::string DatasetManifest::to_jsonl() const {
  std::string out;
  for (const auto& e : entries) {
    Json j = {{"id", e.id},
              {"package_id", e.package_id},
              {"label", std::string(to_string(e.label))},
              {"relative_path", e.relative_path}};
    if (e.path) j["path"] = *e.path;
    if (e.content) j["content"] = *e.content;
    out += canonical_json(j);
    out += '\n';
  }
  return out;
}

SourceFile DatasetManifest::load_entry(const DatasetEntry& entry) const {
  if (entry.content) return SourceFile::from_text(entry.package_id, entry.relative_path, *entry.content);
  fs::path p(*entry.path);
  if (p.is_relative()) p = fs::path(base_dir) / p;
  Bytes bytes;
  try {
    bytes = read_file_bytes(p.string());
  } catch (const Error& e) {
    throw Error(ErrorKind::Io, "entry '" + entry.id + "': " + e.detail());
  }
  return SourceFile::from_bytes(entry.package_id, entry.relative_path, bytes);
}

std::vector<std::string> DatasetManifest::package_ids() const {
  std::set<std::string> ids;
  for (const auto& e : entries) ids.insert(e.package_id);
  return {ids.begin(), ids.end()};
}

DatasetManifest DatasetManifest::subset(const std::vector<std::string>& package_ids) const {
  const std::unordered_set<std::string> keep(package_ids.begin(), package_ids.end());
  DatasetManifest out{name, base_dir, {}};
  for (const auto& e : entries) {
    if (keep.count(e.package_id)) out.entries.push_back(e);
  }
  return out;
}

}  // namespace pkgsentry
