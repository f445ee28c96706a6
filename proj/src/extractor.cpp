#include "pkgsentry/extractor.hpp"

#include <fnmatch.h>
#include <sys/stat.h>
#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

namespace pkgsentry {

namespace fs = std::filesystem;

std::string_view to_string(ExclusionReason reason) {
  switch (reason) {
    case ExclusionReason::Test: return "test";
    case ExclusionReason::Doc: return "doc";
    case ExclusionReason::Config: return "config";
    case ExclusionReason::NonSource: return "non_source";
    case ExclusionReason::TooLarge: return "too_large";
    case ExclusionReason::Binary: return "binary";
  }
  return "unknown";
}

Json to_json(const FileManifest& manifest) {
  Json selected = Json::array();
  for (const auto& f : manifest.selected) {
    selected.push_back({{"path", f.relative_path},
                        {"size_bytes", f.size_bytes},
                        {"token_estimate", f.token_estimate},
                        {"sha256", sha256_hex(f.content)}});
  }
  Json excluded = Json::array();
  for (const auto& e : manifest.excluded) {
    excluded.push_back({{"path", e.relative_path}, {"reason", to_string(e.reason)}});
  }
  return {{"selected_files", selected}, {"excluded_files", excluded}};
}

// ---------------------------------------------------------------------------
// Entry path handling
// ---------------------------------------------------------------------------

namespace {

/// Lexically normalized, root-relative entry path. Empty result means the
/// entry names the root itself.
std::string sanitize_entry(std::string_view raw) {
  std::string name(raw);
  std::replace(name.begin(), name.end(), '\\', '/');
  if (name.empty()) return {};
  if (name.front() == '/' || (name.size() >= 2 && name[1] == ':')) {
    throw Error(ErrorKind::Security, "absolute path in archive entry '" + std::string(raw) + "'");
  }
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= name.size()) {
    auto slash = name.find('/', start);
    if (slash == std::string::npos) slash = name.size();
    const std::string part = name.substr(start, slash - start);
    if (part == "..") {
      throw Error(ErrorKind::Security, "path traversal in archive entry '" + std::string(raw) + "'");
    }
    if (!part.empty() && part != ".") parts.push_back(part);
    start = slash + 1;
  }
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += '/';
    out += p;
  }
  return out;
}

/// Rejects link targets that would resolve outside the archive root.
void check_link_target(const std::string& entry, std::string_view target, bool relative_to_entry) {
  std::string t(target);
  std::replace(t.begin(), t.end(), '\\', '/');
  if (t.empty() || t.front() == '/' || (t.size() >= 2 && t[1] == ':')) {
    throw Error(ErrorKind::Security,
                "link entry '" + entry + "' points outside the destination: '" + std::string(target) + "'");
  }
  std::vector<std::string> stack;
  if (relative_to_entry) {
    std::size_t start = 0;
    while (true) {
      auto slash = entry.find('/', start);
      if (slash == std::string::npos) break;
      stack.push_back(entry.substr(start, slash - start));
      start = slash + 1;
    }
  }
  std::size_t start = 0;
  while (start <= t.size()) {
    auto slash = t.find('/', start);
    if (slash == std::string::npos) slash = t.size();
    const std::string part = t.substr(start, slash - start);
    if (part == "..") {
      if (stack.empty()) {
        throw Error(ErrorKind::Security, "link entry '" + entry +
                                             "' escapes the destination: '" + std::string(target) + "'");
      }
      stack.pop_back();
    } else if (!part.empty() && part != ".") {
      stack.push_back(part);
    }
    start = slash + 1;
  }
}

class Extraction {
 public:
  Extraction(const std::string& dest_dir, const UnpackLimits& limits)
      : root_(fs::weakly_canonical(fs::absolute(dest_dir))), limits_(limits) {}

  void add_directory(const std::string& raw_name) {
    const std::string rel = sanitize_entry(raw_name);
    count_entry();
    if (rel.empty()) return;
    const fs::path target = checked_target(rel, raw_name);
    std::error_code ec;
    fs::create_directories(target, ec);
    if (ec) throw Error(ErrorKind::Format, "cannot create directory for entry '" + raw_name + "'");
  }

  void add_file(const std::string& raw_name, std::string_view data) {
    const std::string rel = sanitize_entry(raw_name);
    count_entry();
    if (rel.empty()) return;
    total_ += data.size();
    if (total_ > limits_.max_total_bytes) {
      throw Error(ErrorKind::Format, "archive exceeds the unpacked size limit");
    }
    const fs::path target = checked_target(rel, raw_name);
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
    if (ec || fs::is_directory(target)) {
      throw Error(ErrorKind::Format, "conflicting archive entry '" + raw_name + "'");
    }
    std::ofstream out(target, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write entry '" + raw_name + "'");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed for entry '" + raw_name + "'");
    files_.insert(rel);
  }

  void add_symlink(const std::string& raw_name, std::string_view target) {
    const std::string rel = sanitize_entry(raw_name);
    count_entry();
    check_link_target(rel.empty() ? raw_name : rel, target, true);
    // Not materialized: later entries below this name become real directories.
  }

  void add_hardlink(const std::string& raw_name, std::string_view target) {
    const std::string rel = sanitize_entry(raw_name);
    count_entry();
    check_link_target(rel.empty() ? raw_name : rel, target, false);
    const std::string source = sanitize_entry(target);
    if (rel.empty() || !files_.count(source)) return;
    const Bytes data = read_file_bytes((root_ / source).string());
    add_file(raw_name, std::string_view(reinterpret_cast<const char*>(data.data()), data.size()));
  }

  std::vector<std::string> entries() const { return {files_.begin(), files_.end()}; }

 private:
  void count_entry() {
    if (++entries_ > limits_.max_entries) throw Error(ErrorKind::Format, "too many archive entries");
  }

  fs::path checked_target(const std::string& rel, const std::string& raw_name) const {
    const fs::path target = root_ / fs::path(rel);
    const fs::path resolved = fs::weakly_canonical(target);
    const auto root_str = root_.string();
    const auto res_str = resolved.string();
    if (res_str.size() <= root_str.size() || res_str.compare(0, root_str.size(), root_str) != 0 ||
        res_str[root_str.size()] != '/') {
      throw Error(ErrorKind::Security, "archive entry '" + raw_name + "' resolves outside the destination");
    }
    return target;
  }

  fs::path root_;
  UnpackLimits limits_;
  std::set<std::string> files_;
  std::uint64_t total_ = 0;
  std::uint64_t entries_ = 0;
};

// ---------------------------------------------------------------------------
// gzip + tar
// ---------------------------------------------------------------------------

std::string gunzip(const Bytes& input, std::uint64_t max_out) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw Error(ErrorKind::Format, "zlib init failed");
  std::string out;
  std::vector<char> buf(1 << 16);
  zs.next_in = const_cast<Bytef*>(input.data());
  zs.avail_in = static_cast<uInt>(input.size());
  int rc = Z_OK;
  while (true) {
    zs.next_out = reinterpret_cast<Bytef*>(buf.data());
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw Error(ErrorKind::Format, "corrupt gzip stream");
    }
    out.append(buf.data(), buf.size() - zs.avail_out);
    if (out.size() > max_out) {
      inflateEnd(&zs);
      throw Error(ErrorKind::Format, "archive exceeds the unpacked size limit");
    }
    if (rc == Z_STREAM_END) {
      // Concatenated gzip members.
      if (zs.avail_in > 0 && inflateReset(&zs) == Z_OK) continue;
      break;
    }
    if (zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw Error(ErrorKind::Format, "truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::string field_string(const char* p, std::size_t n) {
  std::size_t len = 0;
  while (len < n && p[len] != '\0') ++len;
  return std::string(p, len);
}

std::uint64_t parse_tar_number(const char* p, std::size_t n) {
  if (static_cast<unsigned char>(p[0]) & 0x80) {
    // base-256
    std::uint64_t v = static_cast<unsigned char>(p[0]) & 0x7F;
    for (std::size_t i = 1; i < n; ++i) v = (v << 8) | static_cast<unsigned char>(p[i]);
    return v;
  }
  std::uint64_t v = 0;
  std::size_t i = 0;
  while (i < n && (p[i] == ' ' || p[i] == '\0')) ++i;
  for (; i < n && p[i] >= '0' && p[i] <= '7'; ++i) v = v * 8 + static_cast<std::uint64_t>(p[i] - '0');
  for (; i < n; ++i) {
    if (p[i] != ' ' && p[i] != '\0') throw Error(ErrorKind::Format, "invalid octal field in tar header");
  }
  return v;
}

std::map<std::string, std::string> parse_pax(std::string_view data) {
  std::map<std::string, std::string> out;
  std::size_t pos = 0;
  while (pos < data.size()) {
    const auto space = data.find(' ', pos);
    if (space == std::string_view::npos) break;
    std::size_t len = 0;
    for (std::size_t i = pos; i < space; ++i) {
      if (data[i] < '0' || data[i] > '9') throw Error(ErrorKind::Format, "malformed pax header");
      len = len * 10 + static_cast<std::size_t>(data[i] - '0');
    }
    if (len == 0 || pos + len > data.size()) throw Error(ErrorKind::Format, "malformed pax header");
    const auto record = data.substr(space + 1, pos + len - space - 2);
    const auto eq = record.find('=');
    if (eq != std::string_view::npos) out[std::string(record.substr(0, eq))] = std::string(record.substr(eq + 1));
    pos += len;
  }
  return out;
}

void unpack_tar(std::string_view tar, Extraction& ex) {
  std::size_t pos = 0;
  std::optional<std::string> long_name, long_link;
  std::map<std::string, std::string> pax;
  while (true) {
    if (pos + 512 > tar.size()) {
      if (pos == tar.size()) break;  // tolerated: missing end-of-archive blocks
      throw Error(ErrorKind::Format, "truncated tar header");
    }
    const char* h = tar.data() + pos;
    if (std::all_of(h, h + 512, [](char c) { return c == '\0'; })) break;

    unsigned sum = 0;
    for (int i = 0; i < 512; ++i) {
      sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
    }
    if (parse_tar_number(h + 148, 8) != sum) throw Error(ErrorKind::Format, "tar header checksum mismatch");

    std::uint64_t size = parse_tar_number(h + 124, 12);
    const char type = h[156];
    std::string name = field_string(h, 100);
    if (std::memcmp(h + 257, "ustar", 5) == 0) {
      const std::string prefix = field_string(h + 345, 155);
      if (!prefix.empty()) name = prefix + "/" + name;
    }
    std::string link = field_string(h + 157, 100);
    if (long_name) name = *std::exchange(long_name, std::nullopt);
    if (long_link) link = *std::exchange(long_link, std::nullopt);
    if (auto it = pax.find("path"); it != pax.end()) name = it->second;
    if (auto it = pax.find("linkpath"); it != pax.end()) link = it->second;
    if (auto it = pax.find("size"); it != pax.end()) size = std::stoull(it->second);
    pax.clear();

    const std::size_t data_start = pos + 512;
    if (size > tar.size() - data_start) throw Error(ErrorKind::Format, "truncated tar entry '" + name + "'");
    const std::string_view data = tar.substr(data_start, size);
    pos = data_start + ((size + 511) / 512) * 512;
    pos = std::min(pos, tar.size());

    switch (type) {
      case 'L': long_name = field_string(data.data(), data.size()); break;
      case 'K': long_link = field_string(data.data(), data.size()); break;
      case 'x': pax = parse_pax(data); break;
      case 'g': break;
      case '0': case '\0': case '7': ex.add_file(name, data); break;
      case '5': ex.add_directory(name); break;
      case '2': ex.add_symlink(name, link); break;
      case '1': ex.add_hardlink(name, link); break;
      default:
        // Devices and fifos are never written, but their names are still checked.
        sanitize_entry(name);
        break;
    }
  }
}

// ---------------------------------------------------------------------------
// zip
// ---------------------------------------------------------------------------

std::uint16_t le16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
std::uint32_t le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string inflate_raw(const std::uint8_t* data, std::size_t size, std::uint64_t expected) {
  z_stream zs{};
  if (inflateInit2(&zs, -15) != Z_OK) throw Error(ErrorKind::Format, "zlib init failed");
  std::string out(expected, '\0');
  zs.next_in = const_cast<Bytef*>(data);
  zs.avail_in = static_cast<uInt>(size);
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = out.size() - zs.avail_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected) throw Error(ErrorKind::Format, "corrupt deflate data");
  return out;
}

void unpack_zip(const Bytes& zip, Extraction& ex, const UnpackLimits& limits) {
  const std::size_t n = zip.size();
  if (n < 22) throw Error(ErrorKind::Format, "zip too small");
  std::size_t eocd = std::string::npos;
  const std::size_t lowest = n > 22 + 0xFFFF ? n - 22 - 0xFFFF : 0;
  for (std::size_t i = n - 22 + 1; i-- > lowest;) {
    if (le32(&zip[i]) == 0x06054b50) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string::npos) throw Error(ErrorKind::Format, "zip end-of-central-directory not found");
  const std::uint16_t count = le16(&zip[eocd + 10]);
  const std::uint32_t cd_size = le32(&zip[eocd + 12]);
  const std::uint32_t cd_offset = le32(&zip[eocd + 16]);
  if (count == 0xFFFF || cd_offset == 0xFFFFFFFF) throw Error(ErrorKind::Format, "zip64 archives are not supported");
  if (static_cast<std::uint64_t>(cd_offset) + cd_size > eocd) throw Error(ErrorKind::Format, "corrupt zip directory");

  std::size_t p = cd_offset;
  for (std::uint16_t k = 0; k < count; ++k) {
    if (p + 46 > eocd || le32(&zip[p]) != 0x02014b50) throw Error(ErrorKind::Format, "corrupt zip directory entry");
    const std::uint16_t made_by = le16(&zip[p + 4]);
    const std::uint16_t flags = le16(&zip[p + 8]);
    const std::uint16_t method = le16(&zip[p + 10]);
    const std::uint32_t crc = le32(&zip[p + 16]);
    const std::uint32_t csize = le32(&zip[p + 20]);
    const std::uint32_t usize = le32(&zip[p + 24]);
    const std::uint16_t name_len = le16(&zip[p + 28]);
    const std::uint16_t extra_len = le16(&zip[p + 30]);
    const std::uint16_t comment_len = le16(&zip[p + 32]);
    const std::uint32_t ext_attr = le32(&zip[p + 38]);
    const std::uint32_t local = le32(&zip[p + 42]);
    if (p + 46 + name_len > eocd) throw Error(ErrorKind::Format, "corrupt zip directory entry");
    const std::string name(reinterpret_cast<const char*>(&zip[p + 46]), name_len);
    p += 46 + name_len + extra_len + comment_len;

    if (flags & 0x1) throw Error(ErrorKind::Format, "encrypted zip entry '" + name + "'");
    if (usize > limits.max_total_bytes) throw Error(ErrorKind::Format, "archive exceeds the unpacked size limit");
    if (static_cast<std::uint64_t>(local) + 30 > n || le32(&zip[local]) != 0x04034b50) {
      throw Error(ErrorKind::Format, "corrupt zip local header for '" + name + "'");
    }
    const std::size_t data_start = local + 30 + le16(&zip[local + 26]) + le16(&zip[local + 28]);
    if (data_start > n || csize > n - data_start) throw Error(ErrorKind::Format, "truncated zip entry '" + name + "'");

    std::string content;
    if (method == 0) {
      if (csize != usize) throw Error(ErrorKind::Format, "corrupt stored zip entry '" + name + "'");
      content.assign(reinterpret_cast<const char*>(&zip[data_start]), csize);
    } else if (method == 8) {
      content = inflate_raw(&zip[data_start], csize, usize);
    } else {
      throw Error(ErrorKind::Format, "unsupported zip compression method " + std::to_string(method));
    }
    const auto actual_crc = crc32(0L, reinterpret_cast<const Bytef*>(content.data()), static_cast<uInt>(content.size()));
    if (actual_crc != crc) throw Error(ErrorKind::Format, "crc mismatch in zip entry '" + name + "'");

    const bool unix_host = (made_by >> 8) == 3;
    const std::uint32_t mode = ext_attr >> 16;
    if (unix_host && (mode & S_IFMT) == S_IFLNK) {
      ex.add_symlink(name, content);
    } else if (!name.empty() && (name.back() == '/' || name.back() == '\\')) {
      ex.add_directory(name);
    } else {
      ex.add_file(name, content);
    }
  }
}

}  // namespace

std::vector<std::string> unpack(const ArchiveInfo& archive, const std::string& dest_dir,
                                const UnpackLimits& limits) {
  std::error_code ec;
  fs::create_directories(dest_dir, ec);
  if (!fs::is_directory(dest_dir)) throw Error(ErrorKind::Io, "cannot use destination " + dest_dir);
  if (!fs::is_empty(dest_dir)) throw Error(ErrorKind::Precondition, "destination is not empty: " + dest_dir);

  const Bytes data = read_file_bytes(archive.local_path);
  const auto format = detect_archive_format(data);
  if (!format || *format != archive.format) {
    throw Error(ErrorKind::Format, "archive bytes do not match declared format: " + archive.local_path);
  }
  Extraction ex(dest_dir, limits);
  if (archive.format == ArchiveFormat::TarGz) {
    const std::string tar = gunzip(data, limits.max_total_bytes + (64u << 20));
    unpack_tar(tar, ex);
  } else {
    unpack_zip(data, ex, limits);
  }
  return ex.entries();
}

std::vector<std::string> list_directory(const std::string& root) {
  std::vector<std::string> out;
  const fs::path base(root);
  if (!fs::is_directory(base)) throw Error(ErrorKind::Io, "not a directory: " + root);
  for (auto it = fs::recursive_directory_iterator(base, fs::directory_options::none);
       it != fs::recursive_directory_iterator(); ++it) {
    if (it->is_symlink()) {
      if (it->is_directory()) it.disable_recursion_pending();
      continue;
    }
    if (it->is_regular_file()) out.push_back(fs::relative(it->path(), base).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

ContentLoader directory_loader(std::string root) {
  return [root = std::move(root)](const std::string& rel) -> std::optional<Bytes> {
    if (!is_safe_relative_path(rel)) return std::nullopt;
    try {
      return read_file_bytes((fs::path(root) / rel).string());
    } catch (const Error&) {
      return std::nullopt;
    }
  };
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

bool looks_binary(std::span<const std::uint8_t> bytes) {
  const auto head = bytes.subspan(0, std::min<std::size_t>(bytes.size(), 8192));
  return std::find(head.begin(), head.end(), std::uint8_t{0}) != head.end();
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool glob(std::string_view pattern, std::string_view text) {
  return fnmatch(std::string(pattern).c_str(), std::string(text).c_str(), FNM_CASEFOLD) == 0;
}

bool any_glob(std::initializer_list<std::string_view> patterns, std::string_view text) {
  return std::any_of(patterns.begin(), patterns.end(), [&](auto p) { return glob(p, text); });
}

bool doc_like(std::string_view name) {
  return any_glob({"readme*", "license*", "licence*", "copying*", "changelog*", "changes*",
                   "history*", "authors*", "contributing*", "contributors*", "notice*", "*.md",
                   "*.rst", "*.txt", "*.html", "*.htm", "*.pdf", "*.adoc"},
                  name) &&
         !glob("requirements*.txt", name);
}

bool config_like(std::string_view name) {
  return any_glob({"pkg-info", "manifest.in", "setup.cfg", "pyproject.toml", "tox.ini",
                   "requirements*.txt", "makefile", "*.cfg", "*.toml", "*.ini", "*.json", "*.yaml",
                   "*.yml", "*.lock", ".*"},
                  name);
}

std::string strip_slash(std::string s) {
  while (!s.empty() && s.back() == '/') s.pop_back();
  return s;
}

}  // namespace

std::optional<ExclusionReason> classify_path(std::string_view path, const SelectionRules& rules,
                                             std::uint64_t size_bytes, bool binary) {
  const auto slash = path.find_last_of('/');
  const std::string_view base = slash == std::string_view::npos ? path : path.substr(slash + 1);
  const std::string dir = slash == std::string_view::npos ? std::string() : std::string(path.substr(0, slash));
  const bool source = lower(base).ends_with(lower(rules.include_ext)) && base.size() > rules.include_ext.size();

  if (!source && !doc_like(base) && !config_like(base)) return ExclusionReason::NonSource;
  if (binary) return ExclusionReason::Binary;
  if (size_bytes > rules.max_file_bytes) return ExclusionReason::TooLarge;

  bool test_dir = false;
  bool doc_dir = false;
  std::size_t start = 0;
  while (!dir.empty() && start <= dir.size()) {
    auto end = dir.find('/', start);
    if (end == std::string::npos) end = dir.size();
    const std::string component = dir.substr(start, end - start);
    for (const auto& g : rules.exclude_dir_globs) {
      if (glob(strip_slash(g), component)) {
        (lower(g).find("test") != std::string::npos ? test_dir : doc_dir) = true;
      }
    }
    start = end + 1;
  }
  const bool test_name = std::any_of(rules.exclude_name_globs.begin(), rules.exclude_name_globs.end(),
                                     [&](const std::string& g) { return glob(g, base); });
  if (test_dir || test_name) return ExclusionReason::Test;
  if (doc_dir || (!source && doc_like(base))) return ExclusionReason::Doc;
  if (!source) return ExclusionReason::Config;
  return std::nullopt;
}

FileManifest select_files(const std::vector<std::string>& entries_in, const SelectionRules& rules,
                          const ContentLoader& loader, const std::string& package_id) {
  std::vector<std::string> entries = entries_in;
  std::sort(entries.begin(), entries.end());
  entries.erase(std::unique(entries.begin(), entries.end()), entries.end());

  FileManifest manifest;
  for (const auto& path : entries) {
    const auto bytes = loader(path);
    if (!bytes || !is_safe_relative_path(path)) {
      manifest.excluded.push_back({path, ExclusionReason::Binary});
      continue;
    }
    const auto slash = path.find_last_of('/');
    const std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
    std::optional<ExclusionReason> reason;
    if (base != "setup.py") reason = classify_path(path, rules, bytes->size(), looks_binary(*bytes));
    if (reason) {
      manifest.excluded.push_back({path, *reason});
    } else {
      manifest.selected.push_back(SourceFile::from_bytes(package_id, path, *bytes));
    }
  }
  return manifest;
}

}  // namespace pkgsentry
