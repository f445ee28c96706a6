#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pkgsentry/core.hpp"
#include "pkgsentry/fetcher.hpp"

namespace pkgsentry {

enum class ExclusionReason { Test, Doc, Config, NonSource, TooLarge, Binary };

std::string_view to_string(ExclusionReason reason);

struct ExcludedFile {
  std::string relative_path;
  ExclusionReason reason = ExclusionReason::NonSource;
};

struct FileManifest {
  std::vector<SourceFile> selected;  // sorted by relative_path
  std::vector<ExcludedFile> excluded;  // sorted by relative_path
};

/// {"selected_files": [...], "excluded_files": [...]}.
Json to_json(const FileManifest& manifest);

struct SelectionRules {
  std::vector<std::string> exclude_dir_globs{"tests/", "test/", "docs/", "doc/", "examples/"};
  std::vector<std::string> exclude_name_globs{"test_*.py", "*_test.py", "conftest.py"};
  std::string include_ext = ".py";
  std::uint64_t max_file_bytes = 1u << 20;
};

/// Limits applied while unpacking.
struct UnpackLimits {
  std::uint64_t max_total_bytes = 512ull << 20;
  std::uint64_t max_entries = 100000;
};

/// Unpacks a tar.gz or zip archive into an empty dest_dir and returns the
/// sorted list of regular-file entries written (dest_dir-relative).
///
/// Entries with absolute paths, `..` components, or link targets escaping the
/// root raise Error(Security) naming the entry. Links are never materialized
/// on disk. Corrupt containers raise Error(Format).
std::vector<std::string> unpack(const ArchiveInfo& archive, const std::string& dest_dir,
                                const UnpackLimits& limits = {});

/// Lists regular files under a directory tree (sorted, root-relative).
/// Symlinks are skipped.
std::vector<std::string> list_directory(const std::string& root);

/// Returns the file bytes, or nullopt when the file cannot be read.
using ContentLoader = std::function<std::optional<Bytes>(const std::string& relative_path)>;

ContentLoader directory_loader(std::string root);

/// Classification of a single path. Pure in (path, rules, size, binary sniff).
std::optional<ExclusionReason> classify_path(std::string_view path, const SelectionRules& rules,
                                             std::uint64_t size_bytes, bool binary);

/// Any NUL byte in the first 8 KiB.
bool looks_binary(std::span<const std::uint8_t> bytes);

FileManifest select_files(const std::vector<std::string>& entries, const SelectionRules& rules,
                          const ContentLoader& loader, const std::string& package_id);

}  // namespace pkgsentry
