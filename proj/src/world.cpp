#include "cachesteer/world.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "cachesteer/errors.hpp"

namespace cachesteer {

const std::array<SoundEvent, kNumEvents>& sound_events() {
  static const std::array<SoundEvent, kNumEvents> events{{
      {"dog_bark", "dog", "barking"},
      {"siren", "siren", "wailing"},
      {"rain", "rainstorm", "pattering"},
      {"thunder", "thunderclap", "rumbling"},
      {"birds", "bird", "chirping"},
      {"phone", "phone", "ringing"},
      {"drone", "drone", "buzzing"},
      {"cat", "cat", "meowing"},
      {"bell", "bell", "chiming"},
      {"coins", "coin", "jingling"},
      {"washing_machine", "washer", "swishing"},
      {"whip", "whip", "cracking"},
      {"horn", "horn", "honking"},
      {"engine", "motor", "revving"},
      {"door", "door", "creaking"},
      {"clock", "clock", "ticking"},
      {"crowd", "crowd", "cheering"},
      {"baby", "baby", "crying"},
      {"wind", "wind", "howling"},
      {"waves", "wave", "crashing"},
      {"glass", "glass", "shattering"},
      {"train", "train", "clattering"},
      {"drums", "drum", "thumping"},
      {"keyboard", "keyboard", "clacking"},
  }};
  return events;
}

int event_index(const std::string& name) {
  const auto& events = sound_events();
  for (size_t i = 0; i < events.size(); ++i) {
    if (name == events[i].name) return static_cast<int>(i);
  }
  throw DataError("unknown sound event '" + name + "'");
}

const std::vector<std::string>& audible_adverbs() {
  static const std::vector<std::string> pool{"loudly",     "softly", "nearby",
                                             "repeatedly", "sharply", "faintly"};
  return pool;
}

const std::vector<std::string>& audible_places() {
  static const std::vector<std::string> pool{"yard",     "park",    "street",  "hall",
                                             "distance", "morning", "kitchen", "station",
                                             "market"};
  return pool;
}

const std::vector<std::string>& quiet_places() {
  static const std::vector<std::string> pool{"shelf",  "corner", "garage",
                                             "cellar", "attic",  "drawer"};
  return pool;
}

// Tail word pools. Both connectives ("near"/"by") serve both tail kinds, so
// the connective token is class-neutral and the audible-or-not contrast sits
// entirely on the adjective and object positions.
const std::vector<std::string>& quiet_tail_adjectives() {
  static const std::vector<std::string> pool{"stone", "frozen", "old", "tall"};
  return pool;
}

const std::vector<std::string>& lively_tail_adjectives() {
  static const std::vector<std::string> pool{"busy", "noisy", "crowded", "lively"};
  return pool;
}

const std::vector<std::string>& quiet_tail_objects() {
  static const std::vector<std::string> pool{"statue", "lake", "mirror", "fence"};
  return pool;
}

const std::vector<std::string>& lively_tail_objects() {
  static const std::vector<std::string> pool{"market", "station", "kitchen", "park"};
  return pool;
}

std::string compose_tail(size_t index) {
  // Mixed-radix decode: connective, adjective kind, adjective, object kind,
  // object. Walking the index through one full cycle emits every combination
  // exactly once, so corpora built from a running cursor stay word-balanced.
  static const std::array<const char*, 2> connectives{"near", "by"};
  size_t c = index % kTailCycle;
  const char* marker = connectives[c % 2];
  c /= 2;
  const auto& adjs = c % 2 ? lively_tail_adjectives() : quiet_tail_adjectives();
  c /= 2;
  const std::string& adj = adjs[c % 4];
  c /= 4;
  const auto& objs = c % 2 ? lively_tail_objects() : quiet_tail_objects();
  c /= 2;
  const std::string& obj = objs[c % 4];
  return std::string(marker) + " the " + adj + " " + obj;
}

const std::vector<std::string>& visual_nouns() {
  static const std::vector<std::string> pool{
      "car",   "statue", "umbrella", "lake",   "iceberg", "magnet",  "boots", "backpack",
      "bag",   "balls",  "milk",     "fence",  "bench",   "ladder",  "mirror", "carpet",
      "painting"};
  return pool;
}

const std::vector<std::string>& static_predicates() {
  static const std::vector<std::string> pool{"stands", "rests",     "sits",      "floats",
                                             "stays",  "lies",      "remains",   "hangs",
                                             "is stored", "is parked"};
  return pool;
}

namespace {

const std::vector<std::string>& visual_adjectives() {
  static const std::vector<std::string> pool{"frozen", "closed", "stone", "blue",
                                             "old",    "shiny",  "tall",  "rusting"};
  return pool;
}

}  // namespace

const std::vector<std::string>& seed_audible_sentences() {
  static const std::vector<std::string> pool{
      "The barking of a dog in excitement.",
      "Ringing phone awaits an answer.",
      "The buzz of a drone flying overhead.",
      "Birds chirping in early morning.",
      "Jingling coins are counted or played with.",
      "The swishing sound of a washing machine.",
      "Whips cracked in the rodeo.",
      "The meow of a cat.",
      "The school bell rings, signaling the end of class.",
      "Raindrops tapping on rooftops.",
  };
  return pool;
}

const std::vector<std::string>& seed_inaudible_sentences() {
  static const std::vector<std::string> pool{
      "Magnets attract metals.",
      "Ice covers the lake in winter.",
      "Icebergs float on water.",
      "An umbrella stands closed by the door.",
      "A statue in a park.",
      "Rusting car sits in the yard.",
      "Resolved issue is fixed.",
      "Soccer balls are stored in a mesh bag.",
      "Skimmed milk has less fat.",
      "A pair of hiking boots rests next to a backpack.",
  };
  return pool;
}

const std::string& generation_prompt() {
  static const std::string prompt = "Audio of a";
  return prompt;
}

Vocab world_vocab() {
  std::vector<std::string> words;
  auto add_text = [&words](const std::string& text) {
    for (auto& w : tokenize_words(text)) words.push_back(std::move(w));
  };
  add_text(generation_prompt());
  for (const auto& ev : sound_events()) {
    add_text(ev.noun);
    add_text(ev.gerund);
  }
  for (const auto& pool :
       {audible_adverbs(), audible_places(), quiet_places(), quiet_tail_adjectives(),
        lively_tail_adjectives(), quiet_tail_objects(), lively_tail_objects(), visual_nouns(),
        static_predicates(), visual_adjectives(), seed_audible_sentences(),
        seed_inaudible_sentences()}) {
    for (const auto& entry : pool) add_text(entry);
  }
  // Glue words used by the sentence templates below.
  for (const char* glue : {"the", "is", "a", "an", "in", "of", "and", "you", "can", "hear",
                           "sound", "near", "next", "to", "by", "on", "at", "looks"}) {
    words.emplace_back(glue);
  }
  return Vocab::from_words(words);
}

FixtureWorld FixtureWorld::create(uint64_t seed) {
  FixtureWorld world;
  world.seed = seed;
  Rng rng(derive_seed(seed, "event-basis"));
  world.event_basis.assign(kNumEvents, std::vector<real>(kAudioDim, real(0)));
  for (auto& basis : world.event_basis) {
    for (auto& x : basis) x = real(rng.normal());
    // Gram-Schmidt against the rows already placed.
    for (const auto& prev : world.event_basis) {
      if (&prev == &basis) break;
      real proj = 0;
      for (size_t i = 0; i < kAudioDim; ++i) proj += basis[i] * prev[i];
      for (size_t i = 0; i < kAudioDim; ++i) basis[i] -= proj * prev[i];
    }
    real norm = 0;
    for (real x : basis) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < real(1e-4)) throw NumericError("degenerate event basis draw");
    for (auto& x : basis) x /= norm;
  }
  return world;
}

AudioFeature FixtureWorld::synth_feature(const std::vector<int>& events, Rng& rng,
                                         double noise_sigma) const {
  AudioFeature feature;
  feature.vec.assign(kAudioDim, real(0));
  for (int ev : events) {
    if (ev < 0 || static_cast<size_t>(ev) >= kNumEvents) {
      throw DataError("event index outside the fixture world");
    }
    for (size_t i = 0; i < kAudioDim; ++i) feature.vec[i] += event_basis[size_t(ev)][i];
  }
  for (auto& x : feature.vec) x += real(rng.normal(0.0, noise_sigma));
  return feature;
}

std::string event_phrase(int event, Rng& rng, bool with_adverb) {
  const auto& ev = sound_events().at(static_cast<size_t>(event));
  std::string phrase = std::string(ev.noun) + " " + ev.gerund;
  if (with_adverb) {
    const auto& advs = audible_adverbs();
    phrase += " " + advs[rng.below(advs.size())];
  }
  return phrase;
}

std::string caption_body(const std::vector<int>& events, Rng& rng) {
  std::string body;
  for (size_t i = 0; i < events.size(); ++i) {
    if (i > 0) body += " and a ";
    body += event_phrase(events[i], rng, /*with_adverb=*/false);
  }
  return body;
}

namespace {

size_t word_count(const std::string& s) { return tokenize_words(s).size(); }

// Sentence bodies are budgeted so that prompt + body + sentence markers fit
// the LM's maximum sequence length.
constexpr size_t kBodyBudget = 11;

// Most corpus and clip mass sits on a small core of events so their
// next-token races stay dense; the remaining events keep vocabulary coverage.
constexpr size_t kCoreEvents = 8;

int pick_weighted_event(Rng& rng) {
  if (rng.uniform() < 0.8) return static_cast<int>(rng.below(kCoreEvents));
  return static_cast<int>(kCoreEvents + rng.below(kNumEvents - kCoreEvents));
}

}  // namespace

std::vector<int> sample_events(Rng& rng) {
  size_t count = 1 + rng.below(3);
  std::vector<int> events;
  while (events.size() < count) {
    int ev = pick_weighted_event(rng);
    if (std::find(events.begin(), events.end(), ev) == events.end()) events.push_back(ev);
  }
  return events;
}

std::vector<ClipEntry> generate_clips(const FixtureWorld& world, uint64_t seed, size_t n_clips,
                                      size_t refs_per_clip) {
  Rng rng(derive_seed(seed, "clips"));
  std::vector<ClipEntry> clips;
  clips.reserve(n_clips);
  for (size_t i = 0; i < n_clips; ++i) {
    ClipEntry clip;
    std::ostringstream id;
    id << "clip-" << std::setw(4) << std::setfill('0') << i;
    clip.id = id.str();
    clip.event_ids = sample_events(rng);
    clip.feature = world.synth_feature(clip.event_ids, rng);
    clip.feature.clip_id = clip.id;
    clip.references.push_back(caption_body(clip.event_ids, rng));
    for (size_t r = 1; r < refs_per_clip; ++r) {
      std::string ref;
      for (size_t e = 0; e < clip.event_ids.size(); ++e) {
        if (e > 0) ref += " and a ";
        ref += event_phrase(clip.event_ids[e], rng, /*with_adverb=*/e == 0);
      }
      clip.references.push_back(std::move(ref));
    }
    clips.push_back(std::move(clip));
  }
  return clips;
}

std::vector<std::string> generate_lm_corpus(uint64_t seed, size_t n_sentences,
                                            double tail_prob) {
  if (tail_prob < 0.0 || tail_prob > 1.0) {
    throw ConfigError("tail_prob must lie in [0, 1]");
  }
  Rng rng(derive_seed(seed, "lm-corpus"));
  std::vector<std::string> corpus;
  corpus.reserve(n_sentences);
  // Sentence structure and tail words follow fixed cycles instead of
  // independent draws, so the corpus-level odds at every branch point are
  // exact. A model fit to convergence then leaves each next-token race open
  // by no more than its own optimisation noise, which is what lets a small
  // per-token nudge on the cache actually change the caption.
  const size_t tail_slots = static_cast<size_t>(std::lround(tail_prob * 20.0));
  size_t event_cursor = 0;
  size_t tail_cursor = 0;
  auto next_core_event = [&event_cursor] {
    return static_cast<int>(event_cursor++ % kCoreEvents);
  };
  for (size_t i = 0; i < n_sentences; ++i) {
    bool two_events = (i * 3) % 20 < 3;
    bool with_tail = (i * 7) % 20 < tail_slots;
    // Every fifth slot draws from the rare half so the whole vocabulary stays
    // covered without diluting the core races.
    int first = i % 5 == 4 ? static_cast<int>(kCoreEvents + rng.below(kNumEvents - kCoreEvents))
                           : next_core_event();
    std::string body = event_phrase(first, rng, /*with_adverb=*/false);
    if (two_events) {
      int second = next_core_event();
      if (second == first) second = next_core_event();
      body += " and a " + event_phrase(second, rng, /*with_adverb=*/false);
    }
    if (with_tail && word_count(body) + 4 <= kBodyBudget) {
      body += " " + compose_tail(tail_cursor++);
    }
    corpus.push_back("audio of a " + body);
  }
  return corpus;
}

std::vector<MatcherPair> generate_matcher_pairs(const FixtureWorld& world, uint64_t seed,
                                                size_t n_pairs, double tail_prob) {
  Rng rng(derive_seed(seed, "matcher-pairs"));
  std::vector<MatcherPair> pairs;
  pairs.reserve(n_pairs);
  for (size_t i = 0; i < n_pairs; ++i) {
    MatcherPair pair;
    std::vector<int> events = sample_events(rng);
    pair.feature = world.synth_feature(events, rng);
    std::ostringstream id;
    id << "pair-" << i;
    pair.feature.clip_id = id.str();
    std::string body = caption_body(events, rng);
    if (rng.uniform() < tail_prob && word_count(body) + 4 <= kBodyBudget) {
      body += " " + compose_tail(rng.below(kTailCycle));
    }
    // Half the captions carry the generation prompt so the matcher is
    // calibrated on the exact sentence shapes it scores during steering.
    if (rng.uniform() < 0.5) body = "audio of a " + body;
    pair.caption = std::move(body);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

std::vector<LabeledCaption> generate_fixture_corpus(uint64_t seed, size_t n_per_class) {
  if (n_per_class < 50) {
    throw ConfigError("audibility corpus needs at least 50 sentences per class");
  }
  Rng rng(derive_seed(seed, "audibility-corpus"));
  std::vector<LabeledCaption> corpus;
  std::set<std::string> seen;
  auto push = [&](std::string text, AudibilityLabel label) {
    if (!seen.insert(text).second) return false;
    corpus.push_back({std::move(text), label});
    return true;
  };

  for (const auto& s : seed_audible_sentences()) push(s, AudibilityLabel::audible);
  for (const auto& s : seed_inaudible_sentences()) push(s, AudibilityLabel::not_audible);

  const auto& events = sound_events();
  const auto& advs = audible_adverbs();
  const auto& places = audible_places();
  const auto& nooks = quiet_places();
  const auto& vnouns = visual_nouns();
  const auto& preds = static_predicates();
  const auto& vadjs = visual_adjectives();

  auto capitalize = [](std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
  };

  size_t audible_count = seed_audible_sentences().size();
  while (audible_count < n_per_class) {
    const auto& ev = events[rng.below(events.size())];
    std::string s;
    switch (rng.below(9)) {
      case 8:
        // Tail-shaped ending so the lively-scene words carry audible weight
        // while the connective itself stays split across both labels.
        s = std::string(rng.below(2) ? "Audio of a " : "A ") + ev.noun + " " + ev.gerund +
            (rng.below(2) ? " near the " : " by the ") +
            lively_tail_adjectives()[rng.below(lively_tail_adjectives().size())] + " " +
            lively_tail_objects()[rng.below(lively_tail_objects().size())] + ".";
        break;
      case 0:
        s = "The " + std::string(ev.noun) + " is " + ev.gerund + " " +
            advs[rng.below(advs.size())] + ".";
        break;
      case 6:
        // Prompt-shaped caption, mirroring what the generator produces.
        s = "Audio of a " + std::string(ev.noun) + " " + ev.gerund + ".";
        break;
      case 7: {
        const auto& ev2 = events[rng.below(events.size())];
        s = "Audio of a " + std::string(ev.noun) + " " + ev.gerund + " and a " + ev2.noun +
            " " + ev2.gerund + ".";
        break;
      }
      case 1:
        s = "A " + std::string(ev.noun) + " " + ev.gerund + " in the " +
            places[rng.below(places.size())] + ".";
        break;
      case 2:
        s = "The sound of a " + std::string(ev.noun) + " " + ev.gerund + ".";
        break;
      case 3:
        s = "You can hear the " + std::string(ev.noun) + " " + ev.gerund + " " +
            advs[rng.below(advs.size())] + ".";
        break;
      case 4: {
        const auto& ev2 = events[rng.below(events.size())];
        s = "A " + std::string(ev.noun) + " " + ev.gerund + " and a " + ev2.noun + " " +
            ev2.gerund + ".";
        break;
      }
      default:
        s = capitalize(std::string(ev.noun)) + " " + ev.gerund + " " +
            advs[rng.below(advs.size())] + " in the " + places[rng.below(places.size())] + ".";
        break;
    }
    if (push(std::move(s), AudibilityLabel::audible)) ++audible_count;
  }

  size_t inaudible_count = seed_inaudible_sentences().size();
  while (inaudible_count < n_per_class) {
    const std::string& vn = vnouns[rng.below(vnouns.size())];
    std::string s;
    switch (rng.below(9)) {
      case 0:
        s = "A " + vn + " " + preds[rng.below(preds.size())] + " in the " +
            nooks[rng.below(nooks.size())] + ".";
        break;
      case 6:
        s = "Audio of a " + vn + " " + preds[rng.below(preds.size())] + ".";
        break;
      case 7:
        s = "Audio of a " + vn + " in a " + nooks[rng.below(nooks.size())] + ".";
        break;
      case 5:
        // Bare existential: nothing in it makes a sound.
        s = "A " + vn + " in a " + nooks[rng.below(nooks.size())] + ".";
        break;
      case 1: {
        const std::string& vn2 = vnouns[rng.below(vnouns.size())];
        s = "The " + vn + " " + preds[rng.below(preds.size())] + " near the " + vn2 + ".";
        break;
      }
      case 2:
        s = "The " + vn + " looks " + vadjs[rng.below(vadjs.size())] + ".";
        break;
      case 3: {
        const std::string& vn2 = vnouns[rng.below(vnouns.size())];
        s = "A " + vn + " " + preds[rng.below(preds.size())] + " next to the " + vn2 + ".";
        break;
      }
      case 4:
        // Mirror of the audible tail shape with silent-object words.
        s = std::string(rng.below(2) ? "Audio of a " : "The ") + vn + " " +
            preds[rng.below(preds.size())] + (rng.below(2) ? " near the " : " by the ") +
            quiet_tail_adjectives()[rng.below(quiet_tail_adjectives().size())] + " " +
            quiet_tail_objects()[rng.below(quiet_tail_objects().size())] + ".";
        break;
      default: {
        const std::string& vn2 = vnouns[rng.below(vnouns.size())];
        s = "The " + vadjs[rng.below(vadjs.size())] + " " + vn + " " +
            preds[rng.below(preds.size())] + " by the " + vn2 + ".";
        break;
      }
    }
    if (push(std::move(s), AudibilityLabel::not_audible)) ++inaudible_count;
  }
  return corpus;
}

}  // namespace cachesteer
