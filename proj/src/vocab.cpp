#include "cachesteer/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include "cachesteer/errors.hpp"
#include "cachesteer/rng.hpp"

namespace cachesteer {

std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isalnum(c) || raw == '\'') {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  }
  if (!word.empty()) out.push_back(word);
  return out;
}

Vocab Vocab::from_words(const std::vector<std::string>& words) {
  std::set<std::string> unique(words.begin(), words.end());
  unique.erase("<s>");
  unique.erase("</s>");
  unique.erase("<pad>");
  std::vector<std::string> tokens{"<s>", "</s>", "<pad>"};
  tokens.insert(tokens.end(), unique.begin(), unique.end());
  return from_token_list(std::move(tokens));
}

Vocab Vocab::from_token_list(std::vector<std::string> tokens) {
  if (tokens.size() < 4) throw DataError("vocabulary too small: needs specials plus words");
  if (tokens[0] != "<s>" || tokens[1] != "</s>" || tokens[2] != "<pad>") {
    throw DataError("vocabulary must start with <s>, </s>, <pad>");
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  v.rebuild_index();
  return v;
}

void Vocab::rebuild_index() {
  index_.clear();
  for (size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
    std::ostringstream os;
    os << "token id " << id << " outside vocabulary of " << tokens_.size();
    throw DataError(os.str());
  }
  return tokens_[static_cast<size_t>(id)];
}

TokenId Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw DataError("word '" + word + "' not in vocabulary");
  return it->second;
}

std::vector<TokenId> Vocab::encode(const std::vector<std::string>& words) const {
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<TokenId> Vocab::encode_text(const std::string& text) const {
  return encode(tokenize_words(text));
}

std::vector<std::string> Vocab::decode(const std::vector<TokenId>& ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (TokenId id : ids) words.push_back(token(id));
  return words;
}

std::string Vocab::text(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

uint64_t Vocab::digest() const {
  uint64_t h = 1469598103934665603ull;
  for (const auto& t : tokens_) {
    h = fnv1a64(t.data(), t.size(), h);
    char sep = '\n';
    h = fnv1a64(&sep, 1, h);
  }
  return h;
}

}  // namespace cachesteer
