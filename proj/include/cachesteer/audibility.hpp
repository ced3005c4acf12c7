#pragma once

// Binary audible/not-audible caption classifier: mean-pooled token embeddings
// through a two-layer MLP with a 2-way softmax head. Index 1 is "audible".

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cachesteer/data.hpp"
#include "cachesteer/tensor.hpp"
#include "cachesteer/vocab.hpp"

namespace cachesteer {

struct ClassifierConfig {
  size_t token_dim = 32;
  size_t hidden = 64;
  void validate() const;
};

struct ClassifierParams {
  ClassifierConfig config;
  Vocab vocab;
  Tensor tok_embed;  // [V, token_dim]
  Tensor w1, b1;     // [token_dim, hidden], [hidden]
  Tensor w2, b2;     // [hidden, 2], [2]

  static ClassifierParams init(const ClassifierConfig& config, const Vocab& vocab,
                               uint64_t seed);
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> trainable_tensors() const;
};

// Probability of the positive (audible) label, still on the tape so guidance
// can differentiate through it.
struct AudibilityProb {
  Scalar p_audible;
  real value() const { return p_audible.value(); }
};

AudibilityProb classify(const std::vector<TokenId>& tokens, const ClassifierParams& params);

// -log p, clamped below at 1e-7 before the log.
Scalar audibility_loss(const AudibilityProb& p);

struct ClassifierTrainConfig {
  ClassifierConfig model;
  size_t epochs = 40;
  size_t batch_size = 64;
  real lr = real(3e-4);
  real lr_decay = real(0.1);      // applied every decay_every epochs
  size_t decay_every = 10;
  real weight_decay = real(0.01);
  double holdout_fraction = 0.1;
  uint64_t seed = 7;
};

struct ClassifierTrainReport {
  std::vector<double> epoch_losses;
  double holdout_accuracy = 0;
  size_t train_examples = 0;
  size_t holdout_examples = 0;
};

ClassifierParams train_classifier(const std::vector<LabeledCaption>& corpus, const Vocab& vocab,
                                  const ClassifierTrainConfig& config,
                                  ClassifierTrainReport* report);

inline const char* kClassifierCheckpointMagic = "CACHESTEER-AC-v1";
void save_classifier(const std::string& path, const ClassifierParams& params,
                     const ClassifierTrainReport& report);
ClassifierParams load_classifier(const std::string& path);

}  // namespace cachesteer
