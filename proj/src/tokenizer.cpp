#include "cma/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <clocale>
#include <cwctype>
#include <fstream>
#include <limits>
#include <locale.h>
#include <sstream>

#include "cma/errors.hpp"

namespace cma {
namespace {

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

// Decodes one code point starting at text[pos]. Invalid sequences decode as a
// single byte so that every byte string still segments.
std::pair<char32_t, std::size_t> next_code_point(std::string_view text, std::size_t pos) {
  const auto b0 = static_cast<unsigned char>(text[pos]);
  auto cont = [&](std::size_t i) {
    return pos + i < text.size() && (static_cast<unsigned char>(text[pos + i]) & 0xC0) == 0x80;
  };
  auto byte = [&](std::size_t i) { return static_cast<char32_t>(static_cast<unsigned char>(text[pos + i]) & 0x3F); };
  if (b0 < 0x80) return {b0, 1};
  if ((b0 & 0xE0) == 0xC0 && b0 >= 0xC2 && cont(1)) return {((b0 & 0x1F) << 6) | byte(1), 2};
  if ((b0 & 0xF0) == 0xE0 && cont(1) && cont(2)) {
    char32_t cp = ((b0 & 0x0F) << 12) | (byte(1) << 6) | byte(2);
    if (cp >= 0x800 && (cp < 0xD800 || cp > 0xDFFF)) return {cp, 3};
  }
  if ((b0 & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3)) {
    char32_t cp = ((b0 & 0x07) << 18) | (byte(1) << 12) | (byte(2) << 6) | byte(3);
    if (cp >= 0x10000 && cp <= 0x10FFFF) return {cp, 4};
  }
  return {0xFFFD0000u | b0, 1};  // marker outside Unicode: raw invalid byte
}

enum class CharClass { letter, number, space, other };

bool is_unicode_white_space(char32_t cp) {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20: case 0x85: case 0xA0:
    case 0x1680: case 0x2028: case 0x2029: case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

locale_t utf8_locale() {
  static const locale_t loc = [] {
    locale_t l = newlocale(LC_CTYPE_MASK, "C.UTF-8", static_cast<locale_t>(nullptr));
    if (!l) l = newlocale(LC_CTYPE_MASK, "en_US.UTF-8", static_cast<locale_t>(nullptr));
    return l;
  }();
  return loc;
}

// ASCII is classified exactly; other code points use the C library's Unicode
// tables, which agree with \p{L} / \p{N} for everything but rare numerals.
CharClass classify(char32_t cp) {
  if (is_unicode_white_space(cp)) return CharClass::space;
  if (cp < 0x80) {
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return CharClass::letter;
    if (cp >= '0' && cp <= '9') return CharClass::number;
    return CharClass::other;
  }
  if (cp > 0x10FFFF) return CharClass::other;
  if (locale_t loc = utf8_locale()) {
    if (iswalpha_l(static_cast<wint_t>(cp), loc)) return CharClass::letter;
    if (iswdigit_l(static_cast<wint_t>(cp), loc)) return CharClass::number;
    return CharClass::other;
  }
  return CharClass::letter;
}

struct CodePoint {
  std::size_t offset;
  CharClass cls;
  bool ascii_space;
};

const std::array<char32_t, 256>& byte_to_code_point() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    char32_t extra = 256;
    for (int b = 0; b < 256; ++b) t[b] = direct[b] ? static_cast<char32_t>(b) : extra++;
    return t;
  }();
  return table;
}

const std::array<std::string, 256>& byte_symbols() {
  static const std::array<std::string, 256> table = [] {
    std::array<std::string, 256> t;
    for (int b = 0; b < 256; ++b) append_utf8(t[b], byte_to_code_point()[b]);
    return t;
  }();
  return table;
}

int code_point_to_byte(char32_t cp) {
  const auto& t = byte_to_code_point();
  for (int b = 0; b < 256; ++b) {
    if (t[b] == cp) return b;
  }
  return -1;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

}  // namespace

std::vector<std::string_view> gpt2_pretokenize(std::string_view text) {
  std::vector<CodePoint> cps;
  for (std::size_t pos = 0; pos < text.size();) {
    auto [cp, len] = next_code_point(text, pos);
    cps.push_back({pos, classify(cp), cp == U' '});
    pos += len;
  }
  const std::size_t n = cps.size();
  auto offset = [&](std::size_t i) { return i < n ? cps[i].offset : text.size(); };
  auto run_end = [&](std::size_t i, CharClass cls) {
    while (i < n && cps[i].cls == cls) ++i;
    return i;
  };

  static constexpr std::array<std::string_view, 7> contractions = {"'s", "'t", "'re", "'ve",
                                                                    "'m", "'ll", "'d"};
  std::vector<std::string_view> pieces;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    const std::string_view rest = text.substr(cps[i].offset);
    bool matched = false;
    for (auto c : contractions) {
      if (rest.starts_with(c)) {
        j = i + c.size();
        matched = true;
        break;
      }
    }
    if (!matched) {
      std::size_t start = i;
      if (cps[i].ascii_space && i + 1 < n && cps[i + 1].cls != CharClass::space) start = i + 1;
      const CharClass cls = cps[start].cls;
      if (cls != CharClass::space) {
        j = run_end(start, cls);
      } else {
        const std::size_t end = run_end(i, CharClass::space);
        if (end == n || end - i == 1) {
          j = end;
        } else {
          j = end - 1;  // leave one space to prefix the following word
        }
      }
    }
    pieces.push_back(text.substr(offset(i), offset(j) - offset(i)));
    i = j;
  }
  return pieces;
}

Tokenizer Tokenizer::word_level(const std::vector<std::string>& tokens) {
  Tokenizer t;
  t.mode_ = TokenizerMode::word_level;
  t.id_to_token_ = tokens;
  for (const auto& tok : tokens) {
    if (tok.empty() || split_whitespace(tok).size() != 1) {
      throw FormatError("word-level token must be a single non-empty word: '" + tok + "'");
    }
  }
  t.index_vocabulary();
  return t;
}

Tokenizer Tokenizer::byte_bpe(std::vector<std::string> tokens,
                              std::vector<std::pair<std::string, std::string>> merges) {
  Tokenizer t;
  t.mode_ = TokenizerMode::byte_bpe;
  t.id_to_token_ = std::move(tokens);
  t.index_vocabulary();
  for (const auto& sym : byte_symbols()) {
    if (!t.token_to_id_.contains(sym)) {
      throw FormatError("byte-level vocabulary is missing the byte symbol '" + sym + "'");
    }
  }
  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    const auto& [left, right] = merges[rank];
    if (!t.token_to_id_.contains(left + right)) {
      throw FormatError("merge '" + left + " " + right + "' produces a token outside the vocabulary");
    }
    t.merge_rank_.emplace(left + " " + right, static_cast<int>(rank));
  }
  return t;
}

void Tokenizer::index_vocabulary() {
  token_to_id_.clear();
  for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
    if (!token_to_id_.emplace(id_to_token_[id], static_cast<TokenId>(id)).second) {
      throw FormatError("duplicate vocabulary token '" + id_to_token_[id] + "'");
    }
  }
}

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_path,
                          const std::optional<std::filesystem::path>& merges_path) {
  std::ifstream in(vocab_path, std::ios::binary);
  if (!in) throw FormatError("cannot open vocabulary file " + vocab_path.string());
  std::vector<std::pair<TokenId, std::string>> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw FormatError(vocab_path.string() + ":" + std::to_string(lineno) + ": expected token<TAB>id");
    }
    long long id = -1;
    try {
      std::size_t used = 0;
      id = std::stoll(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1) id = -1;
    } catch (const std::exception&) {
      id = -1;
    }
    if (id < 0 || id > std::numeric_limits<TokenId>::max()) {
      throw FormatError(vocab_path.string() + ":" + std::to_string(lineno) + ": bad token id");
    }
    entries.emplace_back(static_cast<TokenId>(id), line.substr(0, tab));
  }
  std::sort(entries.begin(), entries.end());
  std::vector<std::string> tokens;
  tokens.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != static_cast<TokenId>(i)) {
      throw FormatError("vocabulary ids must be dense in [0, vocab_size); missing or repeated id " +
                        std::to_string(i));
    }
    tokens.push_back(std::move(entries[i].second));
  }

  if (!merges_path) return word_level(tokens);

  std::ifstream min(*merges_path, std::ios::binary);
  if (!min) throw FormatError("cannot open merges file " + merges_path->string());
  std::vector<std::pair<std::string, std::string>> merges;
  lineno = 0;
  while (std::getline(min, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.starts_with("#version"))) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
        line.find(' ', sp + 1) != std::string::npos) {
      throw FormatError(merges_path->string() + ":" + std::to_string(lineno) + ": expected 'left right'");
    }
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return byte_bpe(std::move(tokens), std::move(merges));
}

std::optional<TokenId> Tokenizer::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

const std::string& Tokenizer::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw FormatError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

void Tokenizer::encode_piece(std::string_view piece, std::vector<TokenId>& out) const {
  std::vector<std::string> symbols;
  symbols.reserve(piece.size());
  for (char c : piece) symbols.push_back(byte_symbols()[static_cast<unsigned char>(c)]);

  while (symbols.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find(symbols[i] + " " + symbols[i + 1]);
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    const std::string left = symbols[best];
    const std::string right = symbols[best + 1];
    std::vector<std::string> merged;
    merged.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        merged.push_back(left + right);
        i += 2;
      } else {
        merged.push_back(std::move(symbols[i]));
        ++i;
      }
    }
    symbols = std::move(merged);
  }
  for (const auto& s : symbols) out.push_back(token_to_id_.at(s));
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  if (mode_ == TokenizerMode::word_level) {
    for (const auto& w : split_whitespace(text)) {
      auto it = token_to_id_.find(w);
      if (it == token_to_id_.end()) throw UnknownToken(w);
      ids.push_back(it->second);
    }
    return ids;
  }
  for (auto piece : gpt2_pretokenize(text)) encode_piece(piece, ids);
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  if (mode_ == TokenizerMode::word_level) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }
  for (TokenId id : ids) {
    const std::string& tok = token(id);
    for (std::size_t pos = 0; pos < tok.size();) {
      auto [cp, len] = next_code_point(tok, pos);
      const int b = code_point_to_byte(cp);
      if (b < 0) throw FormatError("token '" + tok + "' contains a symbol outside the byte alphabet");
      out += static_cast<char>(b);
      pos += len;
    }
  }
  return out;
}

bool Tokenizer::is_single_token(std::string_view word) const {
  if (mode_ == TokenizerMode::word_level) {
    auto words = split_whitespace(word);
    return words.size() == 1 && token_to_id_.contains(words[0]);
  }
  return encode(" " + std::string(word)).size() == 1;
}

}  // namespace cma
