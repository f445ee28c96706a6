#pragma once

#include <Eigen/SparseCore>

#include <array>
#include <cstdint>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "pkgsentry/core.hpp"

namespace pkgsentry {

// ---------------------------------------------------------------------------
// Tokens
// ---------------------------------------------------------------------------

enum class TokenKind { Ident, Keyword, StringLit, Number, Op, Comment };

std::string_view to_string(TokenKind kind);

struct Token {
  TokenKind kind = TokenKind::Op;
  std::string text;
  std::string leading;  // whitespace (and line continuations) preceding the token

  bool starts_line() const { return leading.find('\n') != std::string::npos; }
};

struct TokenStream {
  std::vector<Token> tokens;
  std::string trailing;

  /// Reassembles the source; equals the input with CRLF/CR normalized to LF.
  std::string reconstruct() const;
};

/// Python-flavoured lexer. Total: malformed input never throws; unterminated
/// strings run to end of line (or end of input for triple quotes).
TokenStream tokenize_source(std::string_view text);

// ---------------------------------------------------------------------------
// Indicators
// ---------------------------------------------------------------------------

enum class Indicator { SysExec, EncodedPayload, NetCall, FileManip, DynamicImport };

inline constexpr std::array<Indicator, 5> kCountIndicators{
    Indicator::SysExec, Indicator::EncodedPayload, Indicator::NetCall, Indicator::FileManip,
    Indicator::DynamicImport};

std::string_view to_string(Indicator indicator);

struct IndicatorVector {
  std::uint32_t sys_exec = 0;
  std::uint32_t encoded_payload = 0;
  bool decode_then_exec = false;
  std::uint32_t net_call = 0;
  std::uint32_t file_manip = 0;
  std::uint32_t dynamic_import = 0;
  bool install_hook = false;

  std::uint32_t count(Indicator indicator) const;
  std::uint32_t& count(Indicator indicator);
  /// Sum of counts plus one per raised flag.
  std::uint32_t total() const;
  /// Names of non-zero indicators, strongest first.
  std::vector<std::string> active() const;
};

Json to_json(const IndicatorVector& v);

/// One element of a token template.
struct PatternElement {
  enum class Type { Any, Literal, Glob, Kind, StringRegex };
  Type type = Type::Any;
  std::string text;
  TokenKind kind = TokenKind::Ident;
  std::regex regex;
};

struct TokenPattern {
  Indicator indicator = Indicator::SysExec;
  std::string source;  // template as written
  std::vector<PatternElement> elements;
  bool sink = false;  // exec-style call whose arguments feed decode_then_exec
};

/// Versioned, data-driven pattern table. Template syntax: space-separated
/// elements; `*` matches any token, `<ident>`/`<str>`/`<num>`/`<kw>` match a
/// token kind, `<str~REGEX>` matches a string literal whose text contains a
/// REGEX match, anything else matches token text exactly (fnmatch globs when
/// it contains `*` or `?`).
class PatternTable {
 public:
  static PatternTable parse(const Json& doc);
  static PatternTable load(const std::string& path);
  /// The built-in table; identical to data/signals.patterns.json.
  static const PatternTable& builtin();
  static std::string_view builtin_json();

  int version() const noexcept { return version_; }
  const std::vector<TokenPattern>& patterns() const noexcept { return patterns_; }

 private:
  int version_ = 1;
  std::vector<TokenPattern> patterns_;
};

/// Length of the match of `pattern` at `pos`, or 0.
std::size_t match_at(const TokenPattern& pattern, const std::vector<Token>& tokens, std::size_t pos);

/// Counts non-overlapping pattern matches per indicator and derives the two
/// flags. decode_then_exec fires when an encoded payload (decode call or
/// encoded literal) or an identifier assigned from one appears inside the
/// argument list of a later exec-style call. install_hook is only evaluated
/// when `is_setup_script` is set.
IndicatorVector extract_indicators(const TokenStream& stream,
                                   const PatternTable& table = PatternTable::builtin(),
                                   bool is_setup_script = false);

// ---------------------------------------------------------------------------
// N-gram features
// ---------------------------------------------------------------------------

using SparseVector = Eigen::SparseVector<double>;

/// Kind-tagged token term, e.g. "I:os", "K:import".
std::string token_term(const Token& token);

/// Kind-tagged n-grams for n in [min_n, max_n], joined with U+241F.
std::vector<std::string> ngram_terms(const TokenStream& stream, int min_n = 1, int max_n = 2);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view text);

/// Hashed n-gram counts of dimension hash_dim (>= 1024).
SparseVector featurize_ngrams(const TokenStream& stream, int min_n, int max_n, std::size_t hash_dim);

}  // namespace pkgsentry
