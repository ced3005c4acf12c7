#pragma once

// Guided decoding: per-token gradient descent on the key/value cache against
// a weighted sum of a fluency anchor, an audio-match expectation and an
// audibility expectation, interleaved with top-K candidate expansion.

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cachesteer/audibility.hpp"
#include "cachesteer/data.hpp"
#include "cachesteer/eval.hpp"
#include "cachesteer/lm.hpp"
#include "cachesteer/matcher.hpp"
#include "cachesteer/tensor.hpp"

namespace cachesteer {

struct GuidanceWeights {
  real lambda0 = real(0.2);   // cross-entropy anchor to the unsteered model
  real lambda1 = real(1);     // audio-text match expectation
  real lambda2 = real(0.015); // audibility expectation

  void validate() const;  // finite and nonnegative
};

struct SteeringConfig {
  std::string prompt = "Audio of a";
  size_t target_len = 8;
  size_t candidates = 512;  // capped at vocab size with a warning
  size_t grad_steps = 5;
  real step_size = real(0.3);
  size_t beams = 1;  // only single-beam decoding is implemented
  real temperature = real(1);
  uint64_t seed = 7;

  void validate() const;
};

// Read-only model bundle used while generating. Matcher and classifier may be
// omitted when the corresponding weight is zero.
struct GuidanceModels {
  const LMParams* lm = nullptr;
  const MatcherParams* matcher = nullptr;
  const ClassifierParams* classifier = nullptr;
};

struct CandidateSet {
  std::vector<TokenId> ids;  // descending logit, ties to the lowest id
  Tensor probs;              // [K], renormalized after temperature scaling
  bool clamped = false;      // requested K exceeded the vocab size
};

// Top-K expansion of a [V] logits tensor. The probs tensor participates in
// the caller's graph, so candidate probabilities stay differentiable with
// respect to the logits.
CandidateSet candidate_expand(const Tensor& logits, size_t k, real temperature);

// Per-token scratch shared across the gradient iterations of one step: the
// clean-logits anchor, the clip's audio embedding, and memoized per-candidate
// match/audibility losses. Candidate losses depend only on (prefix,
// candidate), so they stay valid until the prefix grows.
struct GuidanceScratch {
  Tensor anchor;       // softmax of the clean logits, constant [V]
  Embedding audio_emb; // encoded once per clip

  std::unordered_map<TokenId, double> match_losses;
  std::unordered_map<TokenId, double> audibility_losses;

  void next_token() {
    anchor = Tensor();
    match_losses.clear();
    audibility_losses.clear();
  }
};

struct AssembledLoss {
  Scalar total;
  double ce = 0;  // component values at assembly time
  double mm = 0;
  double aud = 0;
  CandidateSet candidates;
  StepResult step;  // forward at the feed token over the given cache
};

// Builds the steering loss for the next-token distribution after prefix. The
// cache must cover every prefix position except the last, which is fed
// through the model. When scratch is null (or its fields are unset) the
// clean-cache anchor and audio embedding are computed on the fly.
AssembledLoss assemble_loss(const KVCache& cache, const std::vector<TokenId>& prefix,
                            const AudioFeature* audio, const GuidanceWeights& weights,
                            const SteeringConfig& config, const GuidanceModels& models,
                            GuidanceScratch* scratch = nullptr);

struct SteerInfo {
  double loss_before = 0;
  double loss_after = 0;
  size_t halvings = 0;
  bool fell_back = false;  // non-finite gradient, or no descent in the halving budget
  std::string diagnostic;
};

// One gradient-descent step on every cached key/value tensor. If the loss
// re-evaluated at the updated cache fails to decrease, the step size is
// halved up to five times; if it still fails, the cache is restored
// unchanged. Gradients are re-zeroed before returning. eta = 0 is a no-op.
SteerInfo steer_step(KVCache& cache, const Scalar& loss, real eta,
                     const std::function<double(const KVCache&)>& loss_at);

// Full guided decode for one clip: encode the prompt into a clean cache, then
// per token run grad_steps rounds of assemble_loss + steer_step, re-compute
// logits, expand candidates and take the argmax. Stops at the end token or
// after target_len tokens. Deterministic for fixed models and config.
CaptionRecord generate_caption(const AudioFeature& audio, const GuidanceWeights& weights,
                               const SteeringConfig& config, const GuidanceModels& models);

struct SweepPoint {
  double lambda2 = 0;
  std::vector<CaptionRecord> captions;  // ordered by clip id
  MetricsReport metrics;
};

// Runs generate_caption over the dataset once per grid value, holding the
// other weights at base. Clips are distributed over a worker pool; results
// are identical for any worker count.
std::vector<SweepPoint> sweep_lambda2(const EvalDataset& dataset, const std::vector<double>& grid,
                                      const GuidanceWeights& base, const SteeringConfig& config,
                                      const GuidanceModels& models, size_t workers = 1);

// The default 14-point sweep grid over [0, 0.5].
const std::vector<double>& default_lambda2_grid();

}  // namespace cachesteer
