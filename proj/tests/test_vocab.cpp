#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cachesteer/errors.hpp"
#include "cachesteer/vocab.hpp"

using namespace cachesteer;

TEST_CASE("tokenize lowercases and strips punctuation") {
  auto t = tokenize_words("A Dog  is barking, loudly!");
  REQUIRE(t.size() == 5);
  CHECK(t[0] == "a");
  CHECK(t[1] == "dog");
  CHECK(t[2] == "is");
  CHECK(t[3] == "barking");
  CHECK(t[4] == "loudly");
  CHECK(tokenize_words("").empty());
  CHECK(tokenize_words("  \t ").empty());
  auto apos = tokenize_words("the dog's bone");
  CHECK(apos[1] == "dog's");
}

TEST_CASE("vocab layout: specials first then sorted unique words") {
  Vocab v = Vocab::from_words({"zebra", "apple", "zebra", "mango"});
  REQUIRE(v.size() == 6);
  CHECK(v.token(Vocab::kBegin) == "<s>");
  CHECK(v.token(Vocab::kEnd) == "</s>");
  CHECK(v.token(Vocab::kPad) == "<pad>");
  CHECK(v.token(3) == "apple");
  CHECK(v.token(4) == "mango");
  CHECK(v.token(5) == "zebra");
  CHECK(v.id("apple") == 3);
  CHECK(v.contains("mango"));
  CHECK_FALSE(v.contains("pear"));
  CHECK_THROWS_AS(v.id("pear"), DataError);
  CHECK_THROWS_AS(v.token(99), DataError);
}

TEST_CASE("round trip and special filtering in text") {
  Vocab v = Vocab::from_words({"dog", "barking", "a", "is"});
  auto ids = v.encode_text("A dog is barking");
  CHECK(v.text(ids) == "a dog is barking");
  std::vector<TokenId> with_specials{Vocab::kBegin};
  for (auto id : ids) with_specials.push_back(id);
  with_specials.push_back(Vocab::kEnd);
  CHECK(v.text(with_specials) == "a dog is barking");
  CHECK(v.decode(ids) == std::vector<std::string>{"a", "dog", "is", "barking"});
}

TEST_CASE("digest is order independent of input and content sensitive") {
  Vocab a = Vocab::from_words({"b", "a", "c"});
  Vocab b = Vocab::from_words({"c", "b", "a", "a"});
  CHECK(a.digest() == b.digest());
  Vocab c = Vocab::from_words({"b", "a", "d"});
  CHECK(a.digest() != c.digest());
}

TEST_CASE("token list restore preserves ids and digest") {
  Vocab a = Vocab::from_words({"dog", "cat"});
  Vocab b = Vocab::from_token_list(a.tokens());
  CHECK(a.digest() == b.digest());
  CHECK(b.id("dog") == a.id("dog"));
}
