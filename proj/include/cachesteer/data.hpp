#pragma once

// Plain data records exchanged between dataset generation, training, steering
// and evaluation.

#include <string>
#include <vector>

#include "cachesteer/real.hpp"

namespace cachesteer {

struct AudioFeature {
  std::vector<real> vec;  // fixed width kAudioDim
  std::string clip_id;
};

struct ClipEntry {
  std::string id;
  std::vector<int> event_ids;
  AudioFeature feature;
  std::vector<std::string> references;  // >= 1 per entry
};

struct EvalDataset {
  std::vector<ClipEntry> entries;
};

struct MatcherPair {
  AudioFeature feature;
  std::string caption;
};

enum class AudibilityLabel { not_audible = 0, audible = 1 };

struct LabeledCaption {
  std::string text;
  AudibilityLabel label = AudibilityLabel::not_audible;
};

// Per-token guidance diagnostics captured while generating one caption.
struct TraceStep {
  double l_ce = 0;
  double l_mm = 0;
  double l_aud = 0;
  double total = 0;
};

struct CaptionRecord {
  std::string clip_id;
  std::vector<int> tokens;  // generated ids, prompt stripped
  std::string text;         // detokenized, specials dropped
  std::vector<TraceStep> trace;
  double match_score = 0;  // cosine against the clip's audio
  double p_audible = 0;
};

}  // namespace cachesteer
