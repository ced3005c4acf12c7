#pragma once

// Decoder-only transformer with an explicit per-layer key/value cache, plus a
// trainer producing a small fluent model over the fixture caption corpus.

#include <cstdint>
#include <string>
#include <vector>

#include "cachesteer/tensor.hpp"
#include "cachesteer/vocab.hpp"

namespace cachesteer {

struct LMConfig {
  size_t d_model = 64;
  size_t layers = 4;
  size_t heads = 4;
  size_t max_len = 16;
  size_t mlp_mult = 4;

  size_t head_dim() const { return d_model / heads; }
  void validate() const;  // layers >= 2, d divisible by heads
};

struct LMParams {
  LMConfig config;
  Vocab vocab;

  Tensor tok_embed;  // [V, d]
  Tensor pos_embed;  // [max_len, d]
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };
  std::vector<Block> blocks;
  Tensor lnf_g, lnf_b;
  Tensor w_out, b_out;  // [d, V], [V]

  static LMParams init(const LMConfig& config, const Vocab& vocab, uint64_t seed);
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> trainable_tensors() const;
};

// Keys and values per layer, each [heads, len, head_dim]; undefined at len 0.
struct KVCache {
  struct LayerKV {
    Tensor k, v;
  };
  std::vector<LayerKV> layers;
  size_t len = 0;
  size_t heads = 0;
  size_t head_dim = 0;

  static KVCache empty(const LMConfig& config);
  // Appends one position; k_new/v_new are per-layer [d] rows, stored detached.
  void append(const std::vector<Tensor>& k_new, const std::vector<Tensor>& v_new);
  KVCache clone() const;
  void set_trainable(bool on);
  void zero_grad();
  // All K/V tensors in layer order (k then v per layer); empty at len 0.
  std::vector<Tensor> tensors() const;
};

struct StepResult {
  Tensor logits;              // [V]
  std::vector<Tensor> k_new;  // per layer [d]
  std::vector<Tensor> v_new;
};

// Logits for the position following `token`, attending over the cache plus
// the token's own freshly computed keys/values. Does not modify the cache;
// differentiable w.r.t. cache tensors marked trainable.
StepResult lm_step(TokenId token, const KVCache& cache, const LMParams& params);

// lm_step plus extending the cache with the new position (detached).
Tensor forward_next(TokenId token, KVCache& cache, const LMParams& params);

// Full-sequence causal forward for training: logits [T, V].
Tensor forward_sequence(const std::vector<TokenId>& tokens, const LMParams& params);

// Cache for a prefix exactly as unmodified sequential decoding computes it.
KVCache clean_cache(const std::vector<TokenId>& prefix, const LMParams& params);

// Argmax decoding; ties break to the lowest token id; stops at the end token.
// Returns prompt followed by generated ids.
std::vector<TokenId> greedy_decode(const std::vector<TokenId>& prompt, size_t len,
                                   const LMParams& params);

struct LMTrainConfig {
  LMConfig model;
  size_t epochs = 30;
  size_t batch_size = 8;
  real lr = real(3e-3);
  real weight_decay = real(0.01);
  double holdout_fraction = 0.1;
  uint64_t seed = 7;
};

struct LMTrainReport {
  std::vector<double> epoch_losses;
  double holdout_perplexity = 0;
  double unigram_perplexity = 0;  // add-one-smoothed baseline on the same split
  size_t train_sentences = 0;
  size_t holdout_sentences = 0;
};

// Corpus sentences are plain text lines; every word must be in `vocab`.
LMParams train_lm(const std::vector<std::string>& corpus, const Vocab& vocab,
                  const LMTrainConfig& config, LMTrainReport* report = nullptr);

inline const char* kLMCheckpointMagic = "CACHESTEER-LM-v1";
void save_lm(const std::string& path, const LMParams& params, const LMTrainReport& report);
LMParams load_lm(const std::string& path);

}  // namespace cachesteer
