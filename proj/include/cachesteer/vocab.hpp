#pragma once

// Word-level vocabulary shared by the language model, the matcher's text
// tower, and the audibility classifier, so guidance gradients never cross a
// re-tokenization boundary.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cachesteer {

using TokenId = int;

// Lowercased, punctuation-stripped, whitespace-split words. Also the metric
// tokenization, applied identically to candidates and references.
std::vector<std::string> tokenize_words(const std::string& text);

class Vocab {
 public:
  static constexpr TokenId kBegin = 0;
  static constexpr TokenId kEnd = 1;
  static constexpr TokenId kPad = 2;

  Vocab() = default;
  // Specials first, then the sorted unique words.
  static Vocab from_words(const std::vector<std::string>& words);
  static Vocab from_token_list(std::vector<std::string> tokens);  // checkpoint restore

  size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const;
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  TokenId id(const std::string& word) const;  // unknown word -> data error

  std::vector<TokenId> encode(const std::vector<std::string>& words) const;
  std::vector<TokenId> encode_text(const std::string& text) const;
  std::vector<std::string> decode(const std::vector<TokenId>& ids) const;
  // Space-joined non-special tokens.
  std::string text(const std::vector<TokenId>& ids) const;
  static bool is_special(TokenId id) { return id >= 0 && id <= kPad; }

  // Stable content hash used for cross-checkpoint compatibility checks.
  uint64_t digest() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;

  void rebuild_index();
};

}  // namespace cachesteer
