#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cma {

using TokenId = std::int32_t;

enum class TokenizerMode { word_level, byte_bpe };

// Maps text to token ids and back.
//
// Word-level mode splits on whitespace and rejects unknown words; it exists so
// the whole pipeline runs on toy models without pretrained assets. Byte-BPE
// mode reproduces GPT2: bytes are mapped to printable code points, the text is
// pre-tokenized with GPT2's pattern, and each piece is merged greedily by
// lowest merge rank.
//
// Immutable after construction; encode/decode are safe to call concurrently.
class Tokenizer {
 public:
  static Tokenizer word_level(const std::vector<std::string>& tokens);
  static Tokenizer byte_bpe(std::vector<std::string> tokens,
                            std::vector<std::pair<std::string, std::string>> merges);

  // Vocabulary file: "token<TAB>id" lines. A merges file ("left right" per
  // line, rank order) selects byte-BPE mode; without one the vocabulary is
  // word-level.
  static Tokenizer load(const std::filesystem::path& vocab_path,
                        const std::optional<std::filesystem::path>& merges_path = std::nullopt);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  // True iff the word, written with the leading space it carries mid-sentence,
  // encodes to exactly one token.
  bool is_single_token(std::string_view word) const;

  TokenizerMode mode() const noexcept { return mode_; }
  std::size_t vocab_size() const noexcept { return id_to_token_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;

 private:
  Tokenizer() = default;
  void index_vocabulary();
  void encode_piece(std::string_view piece, std::vector<TokenId>& out) const;

  TokenizerMode mode_ = TokenizerMode::word_level;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::unordered_map<std::string, int> merge_rank_;  // key: "left right"
};

// GPT2 pre-tokenization: contractions, optionally space-prefixed runs of
// letters / digits / other symbols, and whitespace runs. Pieces concatenate
// back to the input.
std::vector<std::string_view> gpt2_pretokenize(std::string_view text);

}  // namespace cma
