#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "cachesteer/errors.hpp"
#include "cachesteer/matcher.hpp"
#include "cachesteer/rng.hpp"
#include "cachesteer/world.hpp"

using namespace cachesteer;

namespace {

Embedding fixed_embedding(std::vector<real> v, Modality m) {
  size_t n = v.size();
  return {Tensor::constant({n}, std::move(v)), m};
}

struct TrainedFixture {
  MatcherParams params;
  MatcherTrainReport report;
};

const TrainedFixture& trained_fixture() {
  static TrainedFixture fixture = [] {
    FixtureWorld world = FixtureWorld::create(11);
    auto pairs = generate_matcher_pairs(world, 101, 2000);
    MatcherTrainConfig tc;
    tc.seed = 13;
    TrainedFixture f;
    f.params = train_matcher(pairs, world_vocab(), tc, &f.report);
    return f;
  }();
  return fixture;
}

}  // namespace

TEST_CASE("match loss hand values") {
  auto u = fixed_embedding({1, 2}, Modality::text);
  auto v = fixed_embedding({2, 1}, Modality::audio);
  CHECK(std::abs(double(match_loss(u, v).value()) - (-0.8)) < 1e-6);

  auto e = fixed_embedding({0.3f, -1.2f, 2.0f}, Modality::text);
  auto same = fixed_embedding({0.3f, -1.2f, 2.0f}, Modality::audio);
  CHECK(std::abs(double(match_loss(e, same).value()) - (-1.0)) < 1e-6);

  auto anti = fixed_embedding({-0.3f, 1.2f, -2.0f}, Modality::audio);
  CHECK(std::abs(double(match_loss(e, anti).value()) - 1.0) < 1e-6);

  auto ortho_a = fixed_embedding({1, 0}, Modality::text);
  auto ortho_b = fixed_embedding({0, 5}, Modality::audio);
  CHECK(std::abs(double(match_loss(ortho_a, ortho_b).value())) < 1e-6);

  auto zero = fixed_embedding({0, 0}, Modality::audio);
  CHECK_THROWS_AS(match_loss(ortho_a, zero), ValidationError);
}

TEST_CASE("match loss is symmetric bit-exact") {
  Rng rng(23);
  for (int t = 0; t < 20; ++t) {
    std::vector<real> a(48), b(48);
    for (auto& x : a) x = real(rng.normal(0.0, 1.0));
    for (auto& x : b) x = real(rng.normal(0.0, 1.0));
    auto ea = fixed_embedding(a, Modality::text);
    auto eb = fixed_embedding(b, Modality::audio);
    CHECK(match_loss(ea, eb).value() == match_loss(eb, ea).value());
  }
}

TEST_CASE("encoders are deterministic and validate input") {
  Vocab vocab = world_vocab();
  MatcherParams params = MatcherParams::init(MatcherConfig{}, vocab, 3);
  auto tokens = vocab.encode_text("a dog barking in the park");
  Embedding e1 = encode_text(tokens, params);
  Embedding e2 = encode_text(tokens, params);
  CHECK(e1.vec.data() == e2.vec.data());
  CHECK(e1.modality == Modality::text);
  CHECK(std::abs(double(cosine_similarity(e1.vec, e2.vec).value()) - 1.0) < 1e-6);
  CHECK_THROWS_AS(encode_text({}, params), ValidationError);
  CHECK_THROWS_AS(encode_text({TokenId(vocab.size())}, params), DataError);

  FixtureWorld world = FixtureWorld::create(11);
  Rng rng(5);
  AudioFeature f = world.synth_feature({2}, rng);
  Embedding a1 = encode_audio(f, params);
  Embedding a2 = encode_audio(f, params);
  CHECK(a1.vec.data() == a2.vec.data());
  CHECK(a1.modality == Modality::audio);
  AudioFeature wide;
  wide.vec.assign(7, real(1));
  CHECK_THROWS_AS(encode_audio(wide, params), ShapeError);

  AudioFeature doubled = f;
  for (auto& x : doubled.vec) x *= real(2);
  Embedding a3 = encode_audio(doubled, params);
  double diff = 0;
  for (size_t i = 0; i < a1.vec.size(); ++i) {
    diff += std::abs(double(a1.vec.data()[i] - a3.vec.data()[i]));
  }
  CHECK(diff > 1e-6);  // no scale invariance
}

TEST_CASE("contrastive training rejects degenerate setups") {
  Vocab vocab = world_vocab();
  FixtureWorld world = FixtureWorld::create(11);
  auto pairs = generate_matcher_pairs(world, 31, 12);
  MatcherTrainConfig tc;
  tc.batch_size = 1;
  CHECK_THROWS_AS(train_matcher(pairs, vocab, tc, nullptr), ConfigError);
  MatcherTrainConfig ok;
  CHECK_THROWS_AS(train_matcher({}, vocab, ok, nullptr), DataError);
}

TEST_CASE("trained matcher retrieves, separates, and discriminates") {
  const MatcherParams& params = trained_fixture().params;
  const MatcherTrainReport& report = trained_fixture().report;
  CHECK(report.holdout_retrieval_at1 >= 0.5);
  CHECK(report.holdout_retrieval_at1 > 5.0 / 33.0);  // >= 5x chance
  CHECK(report.holdout_auc > 0.9);
  CHECK(params.temperature() > 0.0);

  // Margin: ground-truth pairs vs shuffled pairing, fresh clips.
  FixtureWorld world = FixtureWorld::create(11);
  auto probe = generate_matcher_pairs(world, 505, 64);
  Vocab vocab = world_vocab();
  NoGradGuard off;
  double matched = 0, shuffled = 0;
  for (size_t i = 0; i < probe.size(); ++i) {
    Embedding t = encode_text(vocab.encode_text(probe[i].caption), params);
    Embedding a = encode_audio(probe[i].feature, params);
    Embedding a_wrong = encode_audio(probe[(i + 7) % probe.size()].feature, params);
    matched += double(cosine_similarity(t.vec, a.vec).value());
    shuffled += double(cosine_similarity(t.vec, a_wrong.vec).value());
  }
  matched /= double(probe.size());
  shuffled /= double(probe.size());
  CHECK(matched - shuffled >= 0.2);
}

TEST_CASE("trained text tower separates a caption from a scrambled-vocab twin") {
  const MatcherParams& params = trained_fixture().params;
  Vocab vocab = world_vocab();
  auto caption = vocab.encode_text("a dog barking loudly and a car horn honking");
  Rng rng(77);
  std::vector<TokenId> random_twin;
  for (size_t i = 0; i < caption.size(); ++i) {
    random_twin.push_back(TokenId(3 + rng.below(vocab.size() - 3)));
  }
  NoGradGuard off;
  Tensor a = encode_text(caption, params).vec;
  Tensor b = encode_text(random_twin, params).vec;
  double dist = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dist += double(a.data()[i] - b.data()[i]) * double(a.data()[i] - b.data()[i]);
  }
  CHECK(std::sqrt(dist) > 1e-3);
}

TEST_CASE("single-event features sit nearest their own event centroid") {
  const MatcherParams& params = trained_fixture().params;
  FixtureWorld world = FixtureWorld::create(11);
  Vocab vocab = world_vocab();
  NoGradGuard off;
  // Centroids of audio embeddings per event from fresh single-event samples.
  Rng rng(911);
  size_t dim = params.config.embed_dim;
  std::vector<std::vector<double>> centroids(4, std::vector<double>(dim, 0.0));
  for (int e = 0; e < 4; ++e) {
    for (int s = 0; s < 8; ++s) {
      AudioFeature f = world.synth_feature({e}, rng);
      Tensor emb = encode_audio(f, params).vec;
      for (size_t i = 0; i < dim; ++i) centroids[e][i] += double(emb.data()[i]);
    }
  }
  auto cos = [&](const std::vector<double>& u, const std::vector<real>& v) {
    double uv = 0, uu = 0, vv = 0;
    for (size_t i = 0; i < u.size(); ++i) {
      uv += u[i] * double(v[i]);
      uu += u[i] * u[i];
      vv += double(v[i]) * double(v[i]);
    }
    return uv / std::sqrt(uu * vv);
  };
  for (int e = 0; e < 4; ++e) {
    AudioFeature clean;
    clean.vec.assign(kAudioDim, real(0));
    for (size_t i = 0; i < kAudioDim; ++i) clean.vec[i] = world.event_basis[e][i];
    Tensor emb = encode_audio(clean, params).vec;
    double own = cos(centroids[e], emb.data());
    double others = 0;
    for (int o = 0; o < 4; ++o) {
      if (o != e) others += cos(centroids[o], emb.data());
    }
    CHECK(own > others / 3.0);
  }
}

TEST_CASE("training is deterministic and checkpoints round-trip") {
  FixtureWorld world = FixtureWorld::create(11);
  auto pairs = generate_matcher_pairs(world, 41, 96);
  Vocab vocab = world_vocab();
  MatcherTrainConfig tc;
  tc.epochs = 3;
  tc.seed = 21;
  MatcherParams p1 = train_matcher(pairs, vocab, tc, nullptr);
  MatcherParams p2 = train_matcher(pairs, vocab, tc, nullptr);
  auto n1 = p1.named_tensors(), n2 = p2.named_tensors();
  for (size_t i = 0; i < n1.size(); ++i) {
    CHECK(n1[i].second.data() == n2[i].second.data());
  }

  auto path = (std::filesystem::temp_directory_path() / "matcher_roundtrip.bin").string();
  MatcherTrainReport report;
  save_matcher(path, p1, report);
  MatcherParams loaded = load_matcher(path);
  CHECK(loaded.vocab.digest() == p1.vocab.digest());
  NoGradGuard off;
  auto tokens = vocab.encode_text("a dog barking");
  Tensor e1 = encode_text(tokens, p1).vec;
  Tensor e2 = encode_text(tokens, loaded).vec;
  CHECK(e1.data() == e2.data());
  std::remove(path.c_str());
}
