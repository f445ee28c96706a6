#include "pkgsentry/signals.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <map>
#include <set>
#include <unordered_set>

namespace pkgsentry {

std::string_view to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::Ident: return "ident";
    case TokenKind::Keyword: return "keyword";
    case TokenKind::StringLit: return "string";
    case TokenKind::Number: return "number";
    case TokenKind::Op: return "op";
    case TokenKind::Comment: return "comment";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

namespace {

const std::unordered_set<std::string_view>& python_keywords() {
  static const std::unordered_set<std::string_view> kKeywords{
      "False", "None",   "True",    "and",      "as",     "assert", "async", "await",
      "break", "class",  "continue", "def",     "del",    "elif",   "else",  "except",
      "finally", "for",  "from",    "global",   "if",     "import", "in",    "is",
      "lambda", "nonlocal", "not",  "or",       "pass",   "raise",  "return", "try",
      "while", "with",   "yield"};
  return kKeywords;
}

bool ident_start(unsigned char c) { return std::isalpha(c) || c == '_' || c >= 0x80; }
bool ident_char(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

bool string_prefix(std::string_view s) {
  if (s.empty() || s.size() > 2) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return c == 'r' || c == 'b' || c == 'u' || c == 'f' || c == 'R' || c == 'B' || c == 'U' || c == 'F';
  });
}

std::string normalize_newlines(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\r') {
      out.push_back('\n');
      if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
    } else {
      out.push_back(text[i]);
    }
  }
  return out;
}

/// End offset (exclusive) of a string literal whose opening quote is at `q`.
std::size_t scan_string(const std::string& s, std::size_t q) {
  const char quote = s[q];
  const bool triple = q + 2 < s.size() && s[q + 1] == quote && s[q + 2] == quote;
  std::size_t i = q + (triple ? 3 : 1);
  while (i < s.size()) {
    const char c = s[i];
    if (c == '\\') {
      i += 2;
      continue;
    }
    if (triple) {
      if (c == quote && i + 2 < s.size() + 0 && s[i + 1] == quote && s[i + 2] == quote) return i + 3;
    } else {
      if (c == quote) return i + 1;
      if (c == '\n') return i;  // unterminated: stop at end of line
    }
    ++i;
  }
  return s.size();
}

}  // namespace

TokenStream tokenize_source(std::string_view raw) {
  static constexpr std::string_view kOps3[] = {"**=", "//=", ">>=", "<<=", "..."};
  static constexpr std::string_view kOps2[] = {"**", "//", ">>", "<<", "<=", ">=", "==", "!=", "->",
                                               "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=",
                                               ":="};
  const std::string s = normalize_newlines(raw);
  TokenStream stream;
  std::string leading;
  std::size_t i = 0;
  const std::size_t n = s.size();

  auto emit = [&](TokenKind kind, std::size_t start, std::size_t end) {
    stream.tokens.push_back({kind, s.substr(start, end - start), std::move(leading)});
    leading.clear();
    i = end;
  };

  while (i < n) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    if (c == ' ' || c == '\t' || c == '\f' || c == '\v' || c == '\n') {
      leading.push_back(static_cast<char>(c));
      ++i;
      continue;
    }
    if (c == '\\' && i + 1 < n && s[i + 1] == '\n') {
      leading += "\\\n";
      i += 2;
      continue;
    }
    if (c == '#') {
      const auto end = s.find('\n', i);
      emit(TokenKind::Comment, i, end == std::string::npos ? n : end);
      continue;
    }
    if (c == '"' || c == '\'') {
      emit(TokenKind::StringLit, i, scan_string(s, i));
      continue;
    }
    if (std::isdigit(c) || (c == '.' && i + 1 < n && std::isdigit(static_cast<unsigned char>(s[i + 1])))) {
      std::size_t j = i + 1;
      while (j < n) {
        const unsigned char d = static_cast<unsigned char>(s[j]);
        if (std::isalnum(d) || d == '_' || d == '.') {
          ++j;
        } else if ((d == '+' || d == '-') && (s[j - 1] == 'e' || s[j - 1] == 'E') &&
                   !(s[i] == '0' && j > i + 1 && (s[i + 1] == 'x' || s[i + 1] == 'X'))) {
          ++j;
        } else {
          break;
        }
      }
      emit(TokenKind::Number, i, j);
      continue;
    }
    if (ident_start(c)) {
      std::size_t j = i + 1;
      while (j < n && ident_char(static_cast<unsigned char>(s[j]))) ++j;
      const std::string_view word(s.data() + i, j - i);
      if (j < n && (s[j] == '"' || s[j] == '\'') && string_prefix(word)) {
        emit(TokenKind::StringLit, i, scan_string(s, j));
        continue;
      }
      emit(python_keywords().count(word) ? TokenKind::Keyword : TokenKind::Ident, i, j);
      continue;
    }
    std::size_t len = 1;
    for (auto op : kOps3) {
      if (s.compare(i, op.size(), op) == 0) { len = 3; break; }
    }
    if (len == 1) {
      for (auto op : kOps2) {
        if (s.compare(i, op.size(), op) == 0) { len = 2; break; }
      }
    }
    emit(TokenKind::Op, i, i + len);
  }
  stream.trailing = std::move(leading);
  return stream;
}

std::string TokenStream::reconstruct() const {
  std::string out;
  for (const auto& t : tokens) {
    out += t.leading;
    out += t.text;
  }
  out += trailing;
  return out;
}

// ---------------------------------------------------------------------------
// Indicators
// ---------------------------------------------------------------------------

std::string_view to_string(Indicator indicator) {
  switch (indicator) {
    case Indicator::SysExec: return "sys_exec";
    case Indicator::EncodedPayload: return "encoded_payload";
    case Indicator::NetCall: return "net_call";
    case Indicator::FileManip: return "file_manip";
    case Indicator::DynamicImport: return "dynamic_import";
  }
  return "unknown";
}

namespace {

Indicator parse_indicator(const std::string& name) {
  for (auto ind : kCountIndicators) {
    if (to_string(ind) == name) return ind;
  }
  throw Error(ErrorKind::Parse, "unknown indicator in pattern table: " + name);
}

}  // namespace

std::uint32_t IndicatorVector::count(Indicator indicator) const {
  return const_cast<IndicatorVector*>(this)->count(indicator);
}

std::uint32_t& IndicatorVector::count(Indicator indicator) {
  switch (indicator) {
    case Indicator::SysExec: return sys_exec;
    case Indicator::EncodedPayload: return encoded_payload;
    case Indicator::NetCall: return net_call;
    case Indicator::FileManip: return file_manip;
    case Indicator::DynamicImport: return dynamic_import;
  }
  return sys_exec;
}

std::uint32_t IndicatorVector::total() const {
  std::uint32_t sum = decode_then_exec + install_hook;
  for (auto ind : kCountIndicators) sum += count(ind);
  return sum;
}

std::vector<std::string> IndicatorVector::active() const {
  std::vector<std::string> out;
  if (decode_then_exec) out.emplace_back("decode_then_exec");
  if (install_hook) out.emplace_back("install_hook");
  std::vector<std::pair<std::uint32_t, Indicator>> counts;
  for (auto ind : kCountIndicators) {
    if (count(ind) > 0) counts.emplace_back(count(ind), ind);
  }
  std::stable_sort(counts.begin(), counts.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (const auto& [c, ind] : counts) out.push_back(std::string(to_string(ind)) + "=" + std::to_string(c));
  return out;
}

Json to_json(const IndicatorVector& v) {
  return {{"sys_exec", v.sys_exec},         {"encoded_payload", v.encoded_payload},
          {"decode_then_exec", v.decode_then_exec}, {"net_call", v.net_call},
          {"file_manip", v.file_manip},     {"dynamic_import", v.dynamic_import},
          {"install_hook", v.install_hook}};
}

// ---------------------------------------------------------------------------
// Pattern table
// ---------------------------------------------------------------------------

namespace {

PatternElement parse_element(const std::string& token) {
  PatternElement e;
  e.text = token;
  if (token == "*") {
    e.type = PatternElement::Type::Any;
  } else if (token.size() > 2 && token.front() == '<' && token.back() == '>') {
    const std::string inner = token.substr(1, token.size() - 2);
    if (inner.rfind("str~", 0) == 0) {
      e.type = PatternElement::Type::StringRegex;
      try {
        e.regex = std::regex(inner.substr(4), std::regex::ECMAScript | std::regex::optimize);
      } catch (const std::regex_error& ex) {
        throw Error(ErrorKind::Parse, "bad regex in pattern element " + token + ": " + ex.what());
      }
    } else {
      e.type = PatternElement::Type::Kind;
      if (inner == "ident") e.kind = TokenKind::Ident;
      else if (inner == "str") e.kind = TokenKind::StringLit;
      else if (inner == "num") e.kind = TokenKind::Number;
      else if (inner == "kw") e.kind = TokenKind::Keyword;
      else throw Error(ErrorKind::Parse, "unknown pattern element " + token);
    }
  } else if (token.find_first_of("*?[") != std::string::npos) {
    e.type = PatternElement::Type::Glob;
  } else {
    e.type = PatternElement::Type::Literal;
  }
  return e;
}

bool element_matches(const PatternElement& e, const Token& t) {
  switch (e.type) {
    case PatternElement::Type::Any: return t.kind != TokenKind::Comment;
    case PatternElement::Type::Literal: return t.text == e.text && t.kind != TokenKind::Comment &&
                                               t.kind != TokenKind::StringLit;
    case PatternElement::Type::Glob:
      return (t.kind == TokenKind::Ident || t.kind == TokenKind::Keyword) &&
             fnmatch(e.text.c_str(), t.text.c_str(), 0) == 0;
    case PatternElement::Type::Kind: return t.kind == e.kind;
    case PatternElement::Type::StringRegex:
      return t.kind == TokenKind::StringLit && std::regex_search(t.text, e.regex);
  }
  return false;
}

}  // namespace

PatternTable PatternTable::parse(const Json& doc) {
  PatternTable table;
  if (!doc.is_object() || !doc.contains("patterns") || !doc["patterns"].is_array()) {
    throw Error(ErrorKind::Parse, "pattern table must be an object with a 'patterns' array");
  }
  table.version_ = doc.value("version", 1);
  if (table.version_ != 1) {
    throw Error(ErrorKind::Parse, "unsupported pattern table version " + std::to_string(table.version_));
  }
  for (const auto& entry : doc["patterns"]) {
    TokenPattern p;
    p.indicator = parse_indicator(entry.at("indicator").get<std::string>());
    p.source = entry.at("pattern").get<std::string>();
    p.sink = entry.value("sink", p.indicator == Indicator::SysExec);
    std::size_t start = 0;
    while (start < p.source.size()) {
      auto end = p.source.find(' ', start);
      if (end == std::string::npos) end = p.source.size();
      if (end > start) p.elements.push_back(parse_element(p.source.substr(start, end - start)));
      start = end + 1;
    }
    if (p.elements.empty()) throw Error(ErrorKind::Parse, "empty pattern for " + std::string(to_string(p.indicator)));
    table.patterns_.push_back(std::move(p));
  }
  return table;
}

PatternTable PatternTable::load(const std::string& path) {
  const Bytes raw = read_file_bytes(path);
  try {
    return parse(Json::parse(raw.begin(), raw.end()));
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::Parse, path + ": " + e.what());
  }
}

std::string_view PatternTable::builtin_json() {
  static constexpr std::string_view kJson =
#include "builtin_patterns.inc"
      ;
  return kJson;
}

const PatternTable& PatternTable::builtin() {
  static const PatternTable table = parse(Json::parse(builtin_json()));
  return table;
}

std::size_t match_at(const TokenPattern& pattern, const std::vector<Token>& tokens, std::size_t pos) {
  // Comments between pattern tokens are skipped; the returned span covers them.
  std::size_t i = pos;
  for (const auto& e : pattern.elements) {
    while (i < tokens.size() && tokens[i].kind == TokenKind::Comment && i != pos) ++i;
    if (i >= tokens.size() || !element_matches(e, tokens[i])) return 0;
    ++i;
  }
  return i - pos;
}

namespace {

struct Match {
  std::size_t pos;
  std::size_t len;
  const TokenPattern* pattern;
};

/// Closing-paren index for the call whose "(" sits at `open`, or tokens.size().
std::size_t matching_paren(const std::vector<Token>& tokens, std::size_t open) {
  int depth = 0;
  for (std::size_t i = open; i < tokens.size(); ++i) {
    if (tokens[i].kind != TokenKind::Op) continue;
    const auto& t = tokens[i].text;
    if (t == "(" || t == "[" || t == "{") ++depth;
    if (t == ")" || t == "]" || t == "}") {
      if (--depth == 0) return i;
    }
  }
  return tokens.size();
}

/// End (exclusive) of the logical statement starting at `start`.
std::size_t statement_end(const std::vector<Token>& tokens, std::size_t start) {
  int depth = 0;
  for (std::size_t i = start; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    if (i > start && depth == 0 && t.starts_line()) return i;
    if (t.kind != TokenKind::Op) continue;
    if (t.text == "(" || t.text == "[" || t.text == "{") ++depth;
    if ((t.text == ")" || t.text == "]" || t.text == "}") && depth > 0) --depth;
    if (t.text == ";" && depth == 0) return i;
  }
  return tokens.size();
}

std::size_t indentation(const Token& t, bool first) {
  const auto nl = t.leading.rfind('\n');
  if (nl == std::string::npos) return first ? t.leading.size() : 0;
  return t.leading.size() - nl - 1;
}

bool is_install_base(std::string_view name) {
  static constexpr std::string_view kBases[] = {"install", "develop", "egg_info", "build_py",
                                                "sdist", "bdist_egg", "build_ext", "build",
                                                "bdist_wheel", "install_lib", "install_scripts"};
  return std::find(std::begin(kBases), std::end(kBases), name) != std::end(kBases);
}

}  // namespace

IndicatorVector extract_indicators(const TokenStream& stream, const PatternTable& table,
                                   bool is_setup_script) {
  const auto& tokens = stream.tokens;
  IndicatorVector out;

  // Counted, non-overlapping (leftmost-first) matches per indicator.
  std::vector<Match> counted;
  std::map<Indicator, std::size_t> covered_until;
  std::vector<bool> encoded_at(tokens.size(), false);
  std::vector<const TokenPattern*> sink_at(tokens.size(), nullptr);
  std::vector<std::size_t> sink_len(tokens.size(), 0);
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    if (tokens[pos].kind == TokenKind::Comment) continue;
    for (const auto& p : table.patterns()) {
      const std::size_t len = match_at(p, tokens, pos);
      if (len == 0) continue;
      if (p.indicator == Indicator::EncodedPayload) encoded_at[pos] = true;
      if (p.sink && sink_at[pos] == nullptr) {
        sink_at[pos] = &p;
        sink_len[pos] = len;
      }
      auto& until = covered_until[p.indicator];
      if (pos < until) continue;
      until = pos + len;
      ++out.count(p.indicator);
      counted.push_back({pos, len, &p});
    }
  }

  // Order-based dataflow: identifiers assigned from encoded data are tainted.
  std::set<std::string> tainted;
  auto region_tainted = [&](std::size_t from, std::size_t to) {
    for (std::size_t k = from; k < to; ++k) {
      if (encoded_at[k]) return true;
      if (tokens[k].kind == TokenKind::Ident && tainted.count(tokens[k].text)) return true;
    }
    return false;
  };
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    if (t.kind == TokenKind::Ident && i + 1 < tokens.size() && tokens[i + 1].kind == TokenKind::Op &&
        (tokens[i + 1].text == "=" || tokens[i + 1].text == "+=" || tokens[i + 1].text == ":=")) {
      const std::size_t end = statement_end(tokens, i + 1);
      if (region_tainted(i + 2, end)) {
        tainted.insert(t.text);
      } else if (tokens[i + 1].text == "=") {
        tainted.erase(t.text);
      }
    }
    if (sink_at[i] != nullptr) {
      const std::size_t open = i + sink_len[i] - 1;
      const std::size_t close = matching_paren(tokens, open);
      if (region_tainted(open + 1, close)) out.decode_then_exec = true;
    }
  }

  if (is_setup_script) {
    // Module-level statements (and install-command class bodies) that carry
    // any indicator match count as install-time logic.
    struct Block {
      std::size_t indent;
      bool hook_class;
    };
    std::vector<Block> blocks;
    std::vector<bool> match_start(tokens.size(), false);
    for (const auto& m : counted) match_start[m.pos] = true;
    std::size_t i = 0;
    bool first = true;
    while (i < tokens.size()) {
      if (tokens[i].kind == TokenKind::Comment) {
        ++i;
        continue;
      }
      const std::size_t end = statement_end(tokens, i);
      const std::size_t indent = indentation(tokens[i], first);
      first = false;
      const bool new_line = i == 0 || tokens[i].starts_line();
      if (new_line) {
        while (!blocks.empty() && blocks.back().indent >= indent) blocks.pop_back();
      }
      const bool in_hook_class = std::any_of(blocks.begin(), blocks.end(), [](const Block& b) { return b.hook_class; });
      if (blocks.empty() || in_hook_class) {
        for (std::size_t k = i; k < end; ++k) {
          if (match_start[k]) out.install_hook = true;
        }
      }
      std::size_t head = i;
      if (tokens[head].text == "async" && head + 1 < end) ++head;
      if (tokens[head].kind == TokenKind::Keyword && (tokens[head].text == "def" || tokens[head].text == "class")) {
        bool hook = false;
        if (tokens[head].text == "class") {
          for (std::size_t k = head + 1; k < end && tokens[k].text != ":"; ++k) {
            if (tokens[k].kind == TokenKind::Ident && is_install_base(tokens[k].text)) hook = true;
          }
          // Overriding an install command is install-time logic by itself.
          if (hook && blocks.empty()) out.install_hook = true;
        }
        blocks.push_back({new_line ? indent : (blocks.empty() ? 0 : blocks.back().indent + 1), hook});
      }
      i = (end == i) ? i + 1 : end;
      if (i < tokens.size() && tokens[i].text == ";") ++i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// N-grams
// ---------------------------------------------------------------------------

namespace {

std::string truncate_utf8(const std::string& s, std::size_t max_bytes) {
  if (s.size() <= max_bytes) return s;
  std::size_t cut = max_bytes;
  while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
  return s.substr(0, cut);
}

}  // namespace

std::string token_term(const Token& token) {
  switch (token.kind) {
    case TokenKind::Ident: return "I:" + token.text;
    case TokenKind::Keyword: return "K:" + token.text;
    case TokenKind::StringLit: return "S:" + truncate_utf8(token.text, 48);
    case TokenKind::Number: return "N:" + token.text;
    case TokenKind::Op: return "O:" + token.text;
    case TokenKind::Comment: return "C:" + truncate_utf8(token.text, 32);
  }
  return "?:" + token.text;
}

std::vector<std::string> ngram_terms(const TokenStream& stream, int min_n, int max_n) {
  static constexpr std::string_view kJoin = "\xE2\x90\x9F";
  std::vector<std::string> unigrams;
  unigrams.reserve(stream.tokens.size());
  for (const auto& t : stream.tokens) unigrams.push_back(token_term(t));
  std::vector<std::string> out;
  for (int n = std::max(1, min_n); n <= max_n; ++n) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= unigrams.size(); ++i) {
      std::string term = unigrams[i];
      for (int k = 1; k < n; ++k) {
        term += kJoin;
        term += unigrams[i + static_cast<std::size_t>(k)];
      }
      out.push_back(std::move(term));
    }
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

SparseVector featurize_ngrams(const TokenStream& stream, int min_n, int max_n, std::size_t hash_dim) {
  if (hash_dim < 1024) throw Error(ErrorKind::Precondition, "hash_dim must be at least 1024");
  if (min_n < 1 || max_n < min_n) throw Error(ErrorKind::Precondition, "invalid n-gram range");
  std::map<std::size_t, double> counts;
  for (const auto& term : ngram_terms(stream, min_n, max_n)) counts[fnv1a64(term) % hash_dim] += 1.0;
  SparseVector v(static_cast<Eigen::Index>(hash_dim));
  v.reserve(static_cast<Eigen::Index>(counts.size()));
  for (const auto& [index, c] : counts) v.insertBack(static_cast<Eigen::Index>(index)) = c;
  return v;
}

}  // namespace pkgsentry
