#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cachesteer/errors.hpp"
#include "cachesteer/eval.hpp"
#include "cachesteer/rng.hpp"
#include "cachesteer/world.hpp"
#include "oracles.hpp"

using namespace cachesteer;

namespace {

WordSeq words(const std::string& text) { return tokenize_words(text); }

std::vector<WordSeq> refs(std::initializer_list<std::string> texts) {
  std::vector<WordSeq> out;
  for (const auto& t : texts) out.push_back(words(t));
  return out;
}

// Random corpora shared by the oracle-agreement checks.
struct RandomCorpus {
  std::vector<CiderEntry> entries;
};

RandomCorpus random_corpus(Rng& rng) {
  static const std::vector<std::string> vocab{"dog", "cat", "rain", "bird", "car", "bell",
                                              "wind", "door", "song", "hum",  "tap", "walk"};
  auto sentence = [&]() {
    size_t len = 1 + rng.below(8);
    WordSeq s;
    for (size_t i = 0; i < len; ++i) s.push_back(vocab[rng.below(vocab.size())]);
    return s;
  };
  RandomCorpus corpus;
  size_t n = 2 + rng.below(5);
  for (size_t e = 0; e < n; ++e) {
    CiderEntry entry;
    entry.candidate = sentence();
    size_t m = 1 + rng.below(3);
    for (size_t r = 0; r < m; ++r) entry.references.push_back(sentence());
    corpus.entries.push_back(std::move(entry));
  }
  return corpus;
}

}  // namespace

TEST_CASE("bleu hand values") {
  CHECK(bleu(words("the cat sat"), refs({"the cat sat"})) == doctest::Approx(1.0));
  CHECK(bleu(words("a dog barks"), refs({"rain falls today"})) == 0.0);
  double bp = std::exp(1.0 - 4.0 / 3.0);
  CHECK(bleu(words("the cat sat"), refs({"the cat sat down"}), 1) ==
        doctest::Approx(bp).epsilon(1e-6));
  CHECK(std::abs(bleu(words("the cat sat"), refs({"the cat sat down"}), 1) - 0.716531) < 1e-5);
  // All present orders have precision 1, so BLEU-4 equals the brevity penalty.
  CHECK(bleu(words("the cat sat"), refs({"the cat sat down"})) ==
        doctest::Approx(bp).epsilon(1e-6));
  // Clipping: repeated candidate word credited at most at the reference count;
  // a candidate longer than every reference gets no brevity penalty.
  CHECK(bleu(words("the the the"), refs({"the cat"}), 1) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK_THROWS_AS(bleu({}, refs({"a"})), ValidationError);
  CHECK_THROWS_AS(bleu(words("a"), {}), ValidationError);
}

TEST_CASE("rouge hand values") {
  CHECK(rouge_l(words("a b c"), {{"a", "c", "d"}}) == doctest::Approx(2.0 / 3.0));
  CHECK(rouge_l(words("the dog barks"), refs({"the dog barks"})) == doctest::Approx(1.0));
  CHECK(rouge_l(words("x y z"), refs({"p q r"})) == 0.0);
  double multi = rouge_l(words("a b c"), {{"a", "c", "d"}, {"a", "b", "c"}});
  CHECK(multi == doctest::Approx(1.0));  // max over references
  CHECK_THROWS_AS(rouge_l({}, refs({"a"})), ValidationError);
}

TEST_CASE("cider corpus maxima and zeros") {
  std::vector<CiderEntry> self_corpus{
      {words("a dog barks loudly"), {words("a dog barks loudly")}},
      {words("rain taps the window"), {words("rain taps the window")}},
      {words("a bell rings twice"), {words("a bell rings twice")}},
  };
  CHECK(cider(self_corpus) == doctest::Approx(1.0).epsilon(1e-9));

  std::vector<CiderEntry> disjoint{
      {words("dog barks"), {words("rain falls")}},
      {words("cat sleeps"), {words("wind blows")}},
  };
  CHECK(cider(disjoint) == 0.0);

  CHECK_THROWS_AS(cider({{words("a"), {words("a")}}}), ConfigError);
}

TEST_CASE("metrics agree with the brute-force oracles on random corpora") {
  Rng rng(4242);
  for (int trial = 0; trial < 50; ++trial) {
    RandomCorpus corpus = random_corpus(rng);
    std::vector<oracles::CiderEntry> oracle_corpus;
    for (const auto& e : corpus.entries) {
      oracle_corpus.push_back({e.candidate, e.references});
      double fast_b = bleu(e.candidate, e.references);
      double slow_b = oracles::bleu(e.candidate, e.references);
      CHECK(std::abs(fast_b - slow_b) < 1e-6);
      double fast_r = rouge_l(e.candidate, e.references);
      double slow_r = oracles::rouge_l(e.candidate, e.references);
      CHECK(std::abs(fast_r - slow_r) < 1e-6);
    }
    CHECK(std::abs(cider(corpus.entries) - oracles::cider(oracle_corpus)) < 1e-6);
  }
}

TEST_CASE("three-entry toy corpus matches the tf-idf oracle") {
  std::vector<CiderEntry> toy{
      {words("a dog barks"), {words("a dog barks"), words("the dog barks loudly")}},
      {words("a cat sleeps"), {words("the cat sleeps")}},
      {words("rain falls on a roof"), {words("rain falls")}},
  };
  std::vector<oracles::CiderEntry> oracle_toy;
  for (const auto& e : toy) oracle_toy.push_back({e.candidate, e.references});
  CHECK(std::abs(cider(toy) - oracles::cider(oracle_toy)) < 1e-6);
  CHECK(cider(toy) > 0.0);
  CHECK(cider(toy) < 1.0);
}

TEST_CASE("metric bounds hold on random corpora") {
  Rng rng(515);
  for (int trial = 0; trial < 20; ++trial) {
    RandomCorpus corpus = random_corpus(rng);
    for (const auto& e : corpus.entries) {
      double b = bleu(e.candidate, e.references);
      double r = rouge_l(e.candidate, e.references);
      CHECK(b >= 0.0);
      CHECK(b <= 1.0);
      CHECK(r >= 0.0);
      CHECK(r <= 1.0);
      CHECK(bleu(e.references[0], e.references) == doctest::Approx(1.0));
      CHECK(rouge_l(e.references[0], {e.references[0]}) == doctest::Approx(1.0));
    }
    CHECK(cider(corpus.entries) >= 0.0);
  }
}

namespace {

const ClassifierParams& fixture_classifier() {
  static ClassifierParams params = [] {
    auto corpus = generate_fixture_corpus(71, 300);
    ClassifierTrainConfig tc;
    tc.seed = 19;
    tc.epochs = 12;
    return train_classifier(corpus, world_vocab(), tc, nullptr);
  }();
  return params;
}

EvalDataset fixture_dataset(size_t n, size_t refs_per_clip = 2) {
  FixtureWorld world = FixtureWorld::create(11);
  EvalDataset dataset;
  dataset.entries = generate_clips(world, 61, n, refs_per_clip);
  return dataset;
}

std::vector<CaptionRecord> echo_captions(const EvalDataset& dataset) {
  std::vector<CaptionRecord> records;
  for (const auto& entry : dataset.entries) {
    CaptionRecord r;
    r.clip_id = entry.id;
    r.text = entry.references[0];
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace

TEST_CASE("audibility metric is a mean of classifier outputs") {
  const ClassifierParams& params = fixture_classifier();
  std::string one = seed_audible_sentences()[2];
  NoGradGuard off;
  double direct = double(classify(params.vocab.encode_text(one), params).value());
  CHECK(audibility_metric({one}, params) == direct);

  std::vector<std::string> audible(seed_audible_sentences().begin(),
                                   seed_audible_sentences().end());
  std::vector<std::string> inaudible(seed_inaudible_sentences().begin(),
                                     seed_inaudible_sentences().end());
  double a_pure = audibility_metric(audible, params);
  double i_pure = audibility_metric(inaudible, params);
  CHECK(a_pure > 0.5);
  std::vector<std::string> mixed;
  for (size_t i = 0; i < 5; ++i) {
    mixed.push_back(audible[i]);
    mixed.push_back(inaudible[i]);
  }
  double m = audibility_metric(mixed, params);
  CHECK(m >= std::min(a_pure, i_pure) - 1e-9);
  CHECK(m <= std::max(a_pure, i_pure) + 1e-9);
  CHECK_THROWS_AS(audibility_metric({}, params), ValidationError);
}

TEST_CASE("evaluate_run scores echoes at the maxima and enforces coverage") {
  EvalDataset dataset = fixture_dataset(8, 1);
  auto captions = echo_captions(dataset);
  MetricsReport report = evaluate_run(dataset, captions, fixture_classifier(),
                                      {{"lambda2", 0.0}});
  CHECK(report.n == 8);
  CHECK(report.bleu == doctest::Approx(1.0));
  CHECK(report.rouge_l == doctest::Approx(1.0));
  CHECK(report.cider == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(report.audibility >= 0.0);
  CHECK(report.audibility <= 1.0);
  std::string rendered = render_report(report);
  CHECK(rendered.find("B") != std::string::npos);
  CHECK(rendered.find("meteor: not computed") != std::string::npos);
  CHECK(rendered.find("\"record\":\"metrics\"") != std::string::npos);

  auto missing = captions;
  missing.pop_back();
  try {
    evaluate_run(dataset, missing, fixture_classifier());
    FAIL("expected coverage error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(dataset.entries.back().id) != std::string::npos);
  }

  auto extra = captions;
  CaptionRecord stranger;
  stranger.clip_id = "clip-9999";
  stranger.text = "a dog barking";
  extra.push_back(stranger);
  try {
    evaluate_run(dataset, extra, fixture_classifier());
    FAIL("expected unknown-clip error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("clip-9999") != std::string::npos);
  }

  auto duplicated = captions;
  duplicated.push_back(captions[0]);
  CHECK_THROWS_AS(evaluate_run(dataset, duplicated, fixture_classifier()), DataError);
}

TEST_CASE("evaluate_run is bit-exact under corpus permutation") {
  EvalDataset dataset = fixture_dataset(10);
  auto captions = echo_captions(dataset);
  // Imperfect captions so the scores are nontrivial.
  for (size_t i = 0; i < captions.size(); ++i) {
    captions[i].text = dataset.entries[i].references.back();
  }
  MetricsReport a = evaluate_run(dataset, captions, fixture_classifier());

  EvalDataset shuffled_data = dataset;
  auto shuffled_caps = captions;
  Rng rng(99);
  std::vector<size_t> perm(dataset.entries.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  for (size_t i = 0; i < perm.size(); ++i) {
    shuffled_data.entries[i] = dataset.entries[perm[i]];
    shuffled_caps[i] = captions[perm[(i + 3) % perm.size()]];
  }
  MetricsReport b = evaluate_run(shuffled_data, shuffled_caps, fixture_classifier());
  CHECK(a.bleu == b.bleu);
  CHECK(a.rouge_l == b.rouge_l);
  CHECK(a.cider == b.cider);
  CHECK(a.audibility == b.audibility);
}
