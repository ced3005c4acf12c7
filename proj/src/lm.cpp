#include "cachesteer/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "cachesteer/checkpoint.hpp"
#include "cachesteer/errors.hpp"
#include "cachesteer/log.hpp"
#include "cachesteer/optim.hpp"
#include "cachesteer/rng.hpp"

namespace cachesteer {

void LMConfig::validate() const {
  if (layers < 2) throw ConfigError("language model needs at least 2 layers");
  if (heads == 0 || d_model % heads != 0) {
    std::ostringstream os;
    os << "model width " << d_model << " not divisible by " << heads << " heads";
    throw ConfigError(os.str());
  }
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  if (mlp_mult == 0) throw ConfigError("mlp_mult must be positive");
}

namespace {

Tensor init_weight(Rng& rng, size_t rows, size_t cols) {
  std::vector<real> v(rows * cols);
  double sigma = 1.0 / std::sqrt(static_cast<double>(rows));
  for (auto& x : v) x = real(rng.normal(0.0, sigma));
  return Tensor::param({rows, cols}, std::move(v));
}

Tensor init_embedding(Rng& rng, size_t rows, size_t cols, double sigma) {
  std::vector<real> v(rows * cols);
  for (auto& x : v) x = real(rng.normal(0.0, sigma));
  return Tensor::param({rows, cols}, std::move(v));
}

Tensor zeros_param(size_t n) { return Tensor::param({n}, std::vector<real>(n, real(0))); }
Tensor ones_param(size_t n) { return Tensor::param({n}, std::vector<real>(n, real(1))); }

}  // namespace

LMParams LMParams::init(const LMConfig& config, const Vocab& vocab, uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "lm-init"));
  LMParams p;
  p.config = config;
  p.vocab = vocab;
  size_t d = config.d_model, v = vocab.size(), hidden = d * config.mlp_mult;
  p.tok_embed = init_embedding(rng, v, d, 0.1);
  p.pos_embed = init_embedding(rng, config.max_len, d, 0.1);
  p.blocks.resize(config.layers);
  for (auto& b : p.blocks) {
    b.ln1_g = ones_param(d);
    b.ln1_b = zeros_param(d);
    b.wq = init_weight(rng, d, d);
    b.bq = zeros_param(d);
    b.wk = init_weight(rng, d, d);
    b.bk = zeros_param(d);
    b.wv = init_weight(rng, d, d);
    b.bv = zeros_param(d);
    b.wo = init_weight(rng, d, d);
    b.bo = zeros_param(d);
    b.ln2_g = ones_param(d);
    b.ln2_b = zeros_param(d);
    b.w1 = init_weight(rng, d, hidden);
    b.b1 = zeros_param(hidden);
    b.w2 = init_weight(rng, hidden, d);
    b.b2 = zeros_param(d);
  }
  p.lnf_g = ones_param(d);
  p.lnf_b = zeros_param(d);
  p.w_out = init_weight(rng, d, v);
  p.b_out = zeros_param(v);
  return p;
}

std::vector<std::pair<std::string, Tensor>> LMParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> named;
  named.emplace_back("tok_embed", tok_embed);
  named.emplace_back("pos_embed", pos_embed);
  for (size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    std::string prefix = "block" + std::to_string(i) + ".";
    named.emplace_back(prefix + "ln1_g", b.ln1_g);
    named.emplace_back(prefix + "ln1_b", b.ln1_b);
    named.emplace_back(prefix + "wq", b.wq);
    named.emplace_back(prefix + "bq", b.bq);
    named.emplace_back(prefix + "wk", b.wk);
    named.emplace_back(prefix + "bk", b.bk);
    named.emplace_back(prefix + "wv", b.wv);
    named.emplace_back(prefix + "bv", b.bv);
    named.emplace_back(prefix + "wo", b.wo);
    named.emplace_back(prefix + "bo", b.bo);
    named.emplace_back(prefix + "ln2_g", b.ln2_g);
    named.emplace_back(prefix + "ln2_b", b.ln2_b);
    named.emplace_back(prefix + "w1", b.w1);
    named.emplace_back(prefix + "b1", b.b1);
    named.emplace_back(prefix + "w2", b.w2);
    named.emplace_back(prefix + "b2", b.b2);
  }
  named.emplace_back("lnf_g", lnf_g);
  named.emplace_back("lnf_b", lnf_b);
  named.emplace_back("w_out", w_out);
  named.emplace_back("b_out", b_out);
  return named;
}

std::vector<Tensor> LMParams::trainable_tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

KVCache KVCache::empty(const LMConfig& config) {
  KVCache cache;
  cache.layers.resize(config.layers);
  cache.len = 0;
  cache.heads = config.heads;
  cache.head_dim = config.head_dim();
  return cache;
}

void KVCache::append(const std::vector<Tensor>& k_new, const std::vector<Tensor>& v_new) {
  if (k_new.size() != layers.size() || v_new.size() != layers.size()) {
    throw ShapeError("cache append: wrong layer count");
  }
  size_t d = heads * head_dim;
  for (size_t l = 0; l < layers.size(); ++l) {
    if (k_new[l].size() != d || v_new[l].size() != d) {
      throw ShapeError("cache append: row width mismatch");
    }
    auto splice = [&](const Tensor& old, const Tensor& fresh) {
      std::vector<real> data(heads * (len + 1) * head_dim);
      for (size_t h = 0; h < heads; ++h) {
        real* dst = data.data() + h * (len + 1) * head_dim;
        if (len > 0) {
          const real* src = old.data().data() + h * len * head_dim;
          std::copy_n(src, len * head_dim, dst);
        }
        std::copy_n(fresh.data().data() + h * head_dim, head_dim, dst + len * head_dim);
      }
      return Tensor::constant({heads, len + 1, head_dim}, std::move(data));
    };
    Tensor k2 = splice(layers[l].k, k_new[l]);
    Tensor v2 = splice(layers[l].v, v_new[l]);
    layers[l].k = std::move(k2);
    layers[l].v = std::move(v2);
  }
  ++len;
}

KVCache KVCache::clone() const {
  KVCache copy;
  copy.len = len;
  copy.heads = heads;
  copy.head_dim = head_dim;
  copy.layers.resize(layers.size());
  for (size_t l = 0; l < layers.size(); ++l) {
    if (len > 0) {
      copy.layers[l].k = layers[l].k.detached();
      copy.layers[l].v = layers[l].v.detached();
    }
  }
  return copy;
}

void KVCache::set_trainable(bool on) {
  for (auto& layer : layers) {
    if (layer.k.defined()) layer.k.set_trainable(on);
    if (layer.v.defined()) layer.v.set_trainable(on);
  }
}

void KVCache::zero_grad() {
  for (auto& layer : layers) {
    if (layer.k.defined()) layer.k.zero_grad();
    if (layer.v.defined()) layer.v.zero_grad();
  }
}

std::vector<Tensor> KVCache::tensors() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers) {
    if (layer.k.defined()) out.push_back(layer.k);
    if (layer.v.defined()) out.push_back(layer.v);
  }
  return out;
}

namespace {

void check_token(TokenId token, const LMParams& params) {
  if (token < 0 || static_cast<size_t>(token) >= params.vocab.size()) {
    std::ostringstream os;
    os << "token id " << token << " outside vocabulary of " << params.vocab.size();
    throw DataError(os.str());
  }
}

Tensor block_mlp(const Tensor& x, const LMParams::Block& b) {
  return linear(gelu(linear(x, b.w1, b.b1)), b.w2, b.b2);
}

}  // namespace

StepResult lm_step(TokenId token, const KVCache& cache, const LMParams& params) {
  check_token(token, params);
  if (cache.len >= params.config.max_len) {
    std::ostringstream os;
    os << "cache overflow: length " << cache.len << " at max_len " << params.config.max_len;
    throw ValidationError(os.str());
  }
  size_t heads = params.config.heads;
  StepResult result;
  Tensor x = add(row(params.tok_embed, static_cast<size_t>(token)),
                 row(params.pos_embed, cache.len));
  for (size_t l = 0; l < params.blocks.size(); ++l) {
    const auto& b = params.blocks[l];
    Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
    Tensor q = linear(h, b.wq, b.bq);
    Tensor k = linear(h, b.wk, b.bk);
    Tensor v = linear(h, b.wv, b.bv);
    Tensor attn = attend_cached(q, cache.layers[l].k, cache.layers[l].v, k, v, heads);
    x = add(x, linear(attn, b.wo, b.bo));
    Tensor h2 = layer_norm(x, b.ln2_g, b.ln2_b);
    x = add(x, block_mlp(h2, b));
    result.k_new.push_back(std::move(k));
    result.v_new.push_back(std::move(v));
  }
  result.logits = linear(layer_norm(x, params.lnf_g, params.lnf_b), params.w_out, params.b_out);
  return result;
}

Tensor forward_next(TokenId token, KVCache& cache, const LMParams& params) {
  StepResult step = lm_step(token, cache, params);
  std::vector<Tensor> k_rows, v_rows;
  for (size_t l = 0; l < step.k_new.size(); ++l) {
    k_rows.push_back(step.k_new[l].detached());
    v_rows.push_back(step.v_new[l].detached());
  }
  cache.append(k_rows, v_rows);
  return step.logits;
}

Tensor forward_sequence(const std::vector<TokenId>& tokens, const LMParams& params) {
  if (tokens.empty()) throw ValidationError("forward_sequence: empty token list");
  if (tokens.size() > params.config.max_len) {
    std::ostringstream os;
    os << "sequence of " << tokens.size() << " tokens exceeds max_len "
       << params.config.max_len;
    throw ValidationError(os.str());
  }
  for (TokenId t : tokens) check_token(t, params);
  size_t t_len = tokens.size(), heads = params.config.heads;
  std::vector<int> pos_ids(t_len);
  std::iota(pos_ids.begin(), pos_ids.end(), 0);
  Tensor x = add(embedding_rows(params.tok_embed, std::vector<int>(tokens.begin(), tokens.end())),
                 embedding_rows(params.pos_embed, pos_ids));
  for (const auto& b : params.blocks) {
    Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
    Tensor q = linear(h, b.wq, b.bq);
    Tensor k = linear(h, b.wk, b.bk);
    Tensor v = linear(h, b.wv, b.bv);
    Tensor attn = attend_causal(q, k, v, heads);
    x = add(x, linear(attn, b.wo, b.bo));
    Tensor h2 = layer_norm(x, b.ln2_g, b.ln2_b);
    x = add(x, block_mlp(h2, b));
  }
  return linear(layer_norm(x, params.lnf_g, params.lnf_b), params.w_out, params.b_out);
}

KVCache clean_cache(const std::vector<TokenId>& prefix, const LMParams& params) {
  NoGradGuard off;
  KVCache cache = KVCache::empty(params.config);
  for (TokenId t : prefix) forward_next(t, cache, params);
  return cache;
}

std::vector<TokenId> greedy_decode(const std::vector<TokenId>& prompt, size_t len,
                                   const LMParams& params) {
  if (prompt.empty()) throw ValidationError("greedy_decode: empty prompt");
  NoGradGuard off;
  std::vector<TokenId> out = prompt;
  KVCache cache = KVCache::empty(params.config);
  Tensor logits;
  for (TokenId t : prompt) logits = forward_next(t, cache, params);
  for (size_t i = 0; i < len; ++i) {
    const auto& v = logits.data();
    TokenId next = static_cast<TokenId>(
        std::distance(v.begin(), std::max_element(v.begin(), v.end())));
    out.push_back(next);
    if (next == Vocab::kEnd) break;
    if (i + 1 < len) logits = forward_next(next, cache, params);
  }
  return out;
}

namespace {

std::vector<TokenId> sentence_ids(const std::string& line, const Vocab& vocab,
                                  size_t max_len) {
  std::vector<TokenId> ids{Vocab::kBegin};
  for (TokenId t : vocab.encode_text(line)) ids.push_back(t);
  ids.push_back(Vocab::kEnd);
  if (ids.size() > max_len) {
    std::ostringstream os;
    os << "corpus sentence of " << ids.size() << " tokens exceeds max_len " << max_len << ": '"
       << line << "'";
    throw DataError(os.str());
  }
  return ids;
}

double unigram_perplexity(const std::vector<std::vector<TokenId>>& train,
                          const std::vector<std::vector<TokenId>>& holdout, size_t vocab_size) {
  // Add-one smoothed unigram over predicted positions (everything after <s>).
  std::unordered_map<TokenId, size_t> counts;
  size_t total = 0;
  for (const auto& s : train) {
    for (size_t i = 1; i < s.size(); ++i) {
      ++counts[s[i]];
      ++total;
    }
  }
  double nll = 0;
  size_t n = 0;
  for (const auto& s : holdout) {
    for (size_t i = 1; i < s.size(); ++i) {
      size_t c = counts.count(s[i]) ? counts[s[i]] : 0;
      double p = (double(c) + 1.0) / (double(total) + double(vocab_size));
      nll -= std::log(p);
      ++n;
    }
  }
  return std::exp(nll / double(n));
}

}  // namespace

LMParams train_lm(const std::vector<std::string>& corpus, const Vocab& vocab,
                  const LMTrainConfig& config, LMTrainReport* report) {
  if (corpus.empty()) throw DataError("empty training corpus");
  config.model.validate();

  std::vector<std::vector<TokenId>> sentences;
  sentences.reserve(corpus.size());
  for (const auto& line : corpus) {
    sentences.push_back(sentence_ids(line, vocab, config.model.max_len));
  }

  Rng split_rng(derive_seed(config.seed, "lm-split"));
  std::vector<size_t> order(sentences.size());
  std::iota(order.begin(), order.end(), 0);
  split_rng.shuffle(order);
  size_t holdout_n = std::max<size_t>(1, size_t(double(sentences.size()) *
                                                config.holdout_fraction));
  if (holdout_n >= sentences.size()) holdout_n = sentences.size() / 2;
  std::vector<std::vector<TokenId>> holdout, train;
  for (size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < holdout_n ? holdout : train;
    dst.push_back(sentences[order[i]]);
  }
  if (train.empty()) throw DataError("corpus too small to split");

  LMParams params = LMParams::init(config.model, vocab, config.seed);
  Adam opt(params.trainable_tensors(), config.lr, config.weight_decay);

  LMTrainReport rep;
  rep.train_sentences = train.size();
  rep.holdout_sentences = holdout.size();
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_lr(config.lr * real(std::pow(0.5, double(epoch / 10))));
    Rng epoch_rng(derive_seed(config.seed, "lm-epoch-" + std::to_string(epoch)));
    std::vector<size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    epoch_rng.shuffle(idx);
    double epoch_loss = 0;
    for (size_t start = 0; start < idx.size(); start += config.batch_size) {
      size_t stop = std::min(idx.size(), start + config.batch_size);
      opt.zero_grad();
      real inv_batch = real(1) / real(stop - start);
      for (size_t i = start; i < stop; ++i) {
        const auto& s = train[idx[i]];
        std::vector<TokenId> input(s.begin(), s.end() - 1);
        std::vector<int> targets(s.begin() + 1, s.end());
        Scalar loss = cross_entropy_rows(forward_sequence(input, params), targets);
        epoch_loss += double(loss.value());
        backward(scale(loss, inv_batch));
      }
      opt.step();
    }
    rep.epoch_losses.push_back(epoch_loss / double(train.size()));
    log_debug("lm epoch ", epoch, " mean sentence loss ", rep.epoch_losses.back());
  }

  {
    NoGradGuard off;
    double nll = 0;
    size_t n_tokens = 0;
    for (const auto& s : holdout) {
      std::vector<TokenId> input(s.begin(), s.end() - 1);
      std::vector<int> targets(s.begin() + 1, s.end());
      Scalar loss = cross_entropy_rows(forward_sequence(input, params), targets);
      nll += double(loss.value()) * double(targets.size());
      n_tokens += targets.size();
    }
    rep.holdout_perplexity = std::exp(nll / double(n_tokens));
  }
  rep.unigram_perplexity = unigram_perplexity(train, holdout, vocab.size());
  log_info("lm holdout perplexity ", rep.holdout_perplexity, " vs unigram ",
           rep.unigram_perplexity);
  if (report != nullptr) *report = rep;
  return params;
}

void save_lm(const std::string& path, const LMParams& params, const LMTrainReport& report) {
  Checkpoint ckpt;
  ckpt.magic = kLMCheckpointMagic;
  ckpt.meta = {
      {"config",
       {{"d_model", params.config.d_model},
        {"layers", params.config.layers},
        {"heads", params.config.heads},
        {"max_len", params.config.max_len},
        {"mlp_mult", params.config.mlp_mult}}},
      {"vocab", params.vocab.tokens()},
      {"vocab_digest", params.vocab.digest()},
      {"holdout_perplexity", report.holdout_perplexity},
      {"unigram_perplexity", report.unigram_perplexity},
  };
  ckpt.tensors = params.named_tensors();
  save_checkpoint(path, ckpt);
}

LMParams load_lm(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path, kLMCheckpointMagic);
  LMParams p;
  const auto& cfg = ckpt.meta.at("config");
  p.config.d_model = cfg.at("d_model").get<size_t>();
  p.config.layers = cfg.at("layers").get<size_t>();
  p.config.heads = cfg.at("heads").get<size_t>();
  p.config.max_len = cfg.at("max_len").get<size_t>();
  p.config.mlp_mult = cfg.at("mlp_mult").get<size_t>();
  p.config.validate();
  p.vocab = Vocab::from_token_list(ckpt.meta.at("vocab").get<std::vector<std::string>>());
  p.tok_embed = ckpt.tensor("tok_embed");
  p.pos_embed = ckpt.tensor("pos_embed");
  p.blocks.resize(p.config.layers);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    std::string prefix = "block" + std::to_string(i) + ".";
    b.ln1_g = ckpt.tensor(prefix + "ln1_g");
    b.ln1_b = ckpt.tensor(prefix + "ln1_b");
    b.wq = ckpt.tensor(prefix + "wq");
    b.bq = ckpt.tensor(prefix + "bq");
    b.wk = ckpt.tensor(prefix + "wk");
    b.bk = ckpt.tensor(prefix + "bk");
    b.wv = ckpt.tensor(prefix + "wv");
    b.bv = ckpt.tensor(prefix + "bv");
    b.wo = ckpt.tensor(prefix + "wo");
    b.bo = ckpt.tensor(prefix + "bo");
    b.ln2_g = ckpt.tensor(prefix + "ln2_g");
    b.ln2_b = ckpt.tensor(prefix + "ln2_b");
    b.w1 = ckpt.tensor(prefix + "w1");
    b.b1 = ckpt.tensor(prefix + "b1");
    b.w2 = ckpt.tensor(prefix + "w2");
    b.b2 = ckpt.tensor(prefix + "b2");
  }
  p.lnf_g = ckpt.tensor("lnf_g");
  p.lnf_b = ckpt.tensor("lnf_b");
  p.w_out = ckpt.tensor("w_out");
  p.b_out = ckpt.tensor("b_out");
  return p;
}

}  // namespace cachesteer
