#pragma once

// The synthetic audio world: 24 named sound events with an orthonormal
// feature basis, caption templates, and the word universe shared by every
// model. A clip is 1-3 events; its feature is the sum of the event basis
// vectors plus Gaussian noise.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cachesteer/data.hpp"
#include "cachesteer/rng.hpp"
#include "cachesteer/vocab.hpp"

namespace cachesteer {

struct SoundEvent {
  const char* name;    // stable identifier, e.g. "dog_bark"
  const char* noun;    // caption subject, e.g. "dog"
  const char* gerund;  // caption verb, e.g. "barking"
};

inline constexpr size_t kNumEvents = 24;
inline constexpr size_t kAudioDim = 32;

const std::array<SoundEvent, kNumEvents>& sound_events();
int event_index(const std::string& name);  // unknown -> data error

// Word pools for caption and corpus templates.
const std::vector<std::string>& audible_adverbs();
const std::vector<std::string>& audible_places();
const std::vector<std::string>& quiet_places();
const std::vector<std::string>& visual_nouns();
const std::vector<std::string>& static_predicates();

// Tail word pools. Every caption tail has the shape
// "<near|by> the <adjective> <object>"; both connectives serve both kinds of
// tail, so only the two content words decide whether the tail describes a
// lively scene or a silent object.
const std::vector<std::string>& quiet_tail_adjectives();
const std::vector<std::string>& lively_tail_adjectives();
const std::vector<std::string>& quiet_tail_objects();
const std::vector<std::string>& lively_tail_objects();

// Enumerates every connective/adjective/object combination once per cycle.
inline constexpr size_t kTailCycle = 128;
std::string compose_tail(size_t index);

// Sentences seeded verbatim into the audibility corpus, with fixed labels.
const std::vector<std::string>& seed_audible_sentences();
const std::vector<std::string>& seed_inaudible_sentences();

// The closed word universe: every template word, seed sentence word, and the
// generation prompt. All three models share this vocabulary.
Vocab world_vocab();

struct FixtureWorld {
  uint64_t seed = 0;
  std::vector<std::vector<real>> event_basis;  // kNumEvents x kAudioDim, orthonormal

  static FixtureWorld create(uint64_t seed);
  AudioFeature synth_feature(const std::vector<int>& events, Rng& rng,
                             double noise_sigma = 0.05) const;
};

// Caption fragments. Bodies never include the generation prompt.
std::string event_phrase(int event, Rng& rng, bool with_adverb);
std::string caption_body(const std::vector<int>& events, Rng& rng);

// Sampled clip content: 1-3 distinct events.
std::vector<int> sample_events(Rng& rng);

// In-memory corpus generation; serialization lives in datagen.
std::vector<ClipEntry> generate_clips(const FixtureWorld& world, uint64_t seed, size_t n_clips,
                                      size_t refs_per_clip = 2);
std::vector<std::string> generate_lm_corpus(uint64_t seed, size_t n_sentences,
                                            double tail_prob = 0.7);
std::vector<MatcherPair> generate_matcher_pairs(const FixtureWorld& world, uint64_t seed,
                                                size_t n_pairs, double tail_prob = 0.5);
std::vector<LabeledCaption> generate_fixture_corpus(uint64_t seed, size_t n_per_class);

// The prompt every generation starts from.
const std::string& generation_prompt();

}  // namespace cachesteer
