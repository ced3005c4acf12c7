#pragma once

// Two-tower audio/text matching network. Both towers project into a shared
// embedding space; the match score is cosine similarity, trained with a
// symmetric batch-contrastive objective.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cachesteer/data.hpp"
#include "cachesteer/tensor.hpp"
#include "cachesteer/vocab.hpp"

namespace cachesteer {

enum class Modality { text, audio };

struct Embedding {
  Tensor vec;  // [embed_dim]
  Modality modality;
};

struct MatcherConfig {
  size_t token_dim = 48;   // text-tower token embedding width
  size_t hidden = 96;      // tower MLP hidden width
  size_t embed_dim = 48;   // shared space
  size_t audio_dim = 32;
  void validate() const;
};

struct MatcherParams {
  MatcherConfig config;
  Vocab vocab;
  Tensor tok_embed;          // [V, token_dim]
  Tensor text_w1, text_b1;   // [token_dim, hidden], [hidden]
  Tensor text_w2, text_b2;   // [hidden, embed_dim], [embed_dim]
  Tensor audio_w1, audio_b1; // [audio_dim, hidden], [hidden]
  Tensor audio_w2, audio_b2; // [hidden, embed_dim], [embed_dim]
  // Contrastive temperature stored as log(1/tau) so tau stays positive.
  Tensor log_inv_temp;       // [1]

  double temperature() const;  // tau

  static MatcherParams init(const MatcherConfig& config, const Vocab& vocab, uint64_t seed);
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> trainable_tensors() const;
};

Embedding encode_text(const std::vector<TokenId>& tokens, const MatcherParams& params);
Embedding encode_audio(const AudioFeature& feature, const MatcherParams& params);

// Negative cosine similarity; -1 at perfect match, +1 antipodal.
Scalar match_loss(const Embedding& text_emb, const Embedding& audio_emb);

struct MatcherTrainConfig {
  MatcherConfig model;
  size_t epochs = 20;
  size_t batch_size = 32;
  real lr = real(1e-3);
  double holdout_fraction = 0.1;
  uint64_t seed = 7;
};

struct MatcherTrainReport {
  std::vector<double> epoch_losses;     // mean InfoNCE per anchor
  double holdout_retrieval_at1 = 0;     // audio -> own caption, in-batch
  double holdout_auc = 0;               // matched vs mismatched scores
  size_t train_pairs = 0;
  size_t holdout_pairs = 0;
};

MatcherParams train_matcher(const std::vector<MatcherPair>& pairs, const Vocab& vocab,
                            const MatcherTrainConfig& config, MatcherTrainReport* report);

inline const char* kMatcherCheckpointMagic = "CACHESTEER-MM-v1";
void save_matcher(const std::string& path, const MatcherParams& params,
                  const MatcherTrainReport& report);
MatcherParams load_matcher(const std::string& path);

}  // namespace cachesteer
