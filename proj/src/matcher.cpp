#include "cachesteer/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cachesteer/checkpoint.hpp"
#include "cachesteer/errors.hpp"
#include "cachesteer/log.hpp"
#include "cachesteer/optim.hpp"
#include "cachesteer/rng.hpp"

namespace cachesteer {

void MatcherConfig::validate() const {
  if (token_dim == 0 || hidden == 0 || embed_dim == 0 || audio_dim == 0) {
    throw ConfigError("matcher dimensions must be positive");
  }
}

namespace {

Tensor init_weight(Rng& rng, size_t rows, size_t cols) {
  std::vector<real> v(rows * cols);
  double sigma = 1.0 / std::sqrt(static_cast<double>(rows));
  for (auto& x : v) x = real(rng.normal(0.0, sigma));
  return Tensor::param({rows, cols}, std::move(v));
}

Tensor tower(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
             const Tensor& b2) {
  return linear(gelu(linear(x, w1, b1)), w2, b2);
}

}  // namespace

MatcherParams MatcherParams::init(const MatcherConfig& config, const Vocab& vocab,
                                  uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "matcher-init"));
  MatcherParams p;
  p.config = config;
  p.vocab = vocab;
  std::vector<real> emb(vocab.size() * config.token_dim);
  for (auto& x : emb) x = real(rng.normal(0.0, 0.1));
  p.tok_embed = Tensor::param({vocab.size(), config.token_dim}, std::move(emb));
  p.text_w1 = init_weight(rng, config.token_dim, config.hidden);
  p.text_b1 = Tensor::param({config.hidden}, std::vector<real>(config.hidden, real(0)));
  p.text_w2 = init_weight(rng, config.hidden, config.embed_dim);
  p.text_b2 = Tensor::param({config.embed_dim}, std::vector<real>(config.embed_dim, real(0)));
  p.audio_w1 = init_weight(rng, config.audio_dim, config.hidden);
  p.audio_b1 = Tensor::param({config.hidden}, std::vector<real>(config.hidden, real(0)));
  p.audio_w2 = init_weight(rng, config.hidden, config.embed_dim);
  p.audio_b2 = Tensor::param({config.embed_dim}, std::vector<real>(config.embed_dim, real(0)));
  p.log_inv_temp = Tensor::param({1}, {real(std::log(1.0 / 0.07))});
  return p;
}

double MatcherParams::temperature() const {
  return 1.0 / std::exp(double(log_inv_temp.data()[0]));
}

std::vector<std::pair<std::string, Tensor>> MatcherParams::named_tensors() const {
  return {
      {"tok_embed", tok_embed},   {"text_w1", text_w1},   {"text_b1", text_b1},
      {"text_w2", text_w2},       {"text_b2", text_b2},   {"audio_w1", audio_w1},
      {"audio_b1", audio_b1},     {"audio_w2", audio_w2}, {"audio_b2", audio_b2},
      {"log_inv_temp", log_inv_temp},
  };
}

std::vector<Tensor> MatcherParams::trainable_tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

Embedding encode_text(const std::vector<TokenId>& tokens, const MatcherParams& params) {
  if (tokens.empty()) throw ValidationError("encode_text: empty token list");
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<size_t>(t) >= params.vocab.size()) {
      std::ostringstream os;
      os << "encode_text: token id " << t << " outside vocabulary of " << params.vocab.size();
      throw DataError(os.str());
    }
  }
  Tensor pooled = mean_rows(
      embedding_rows(params.tok_embed, std::vector<int>(tokens.begin(), tokens.end())));
  Tensor e = tower(pooled, params.text_w1, params.text_b1, params.text_w2, params.text_b2);
  return {e, Modality::text};
}

Embedding encode_audio(const AudioFeature& feature, const MatcherParams& params) {
  if (feature.vec.size() != params.config.audio_dim) {
    std::ostringstream os;
    os << "encode_audio: feature width " << feature.vec.size() << ", expected "
       << params.config.audio_dim;
    throw ShapeError(os.str());
  }
  for (real x : feature.vec) {
    if (!std::isfinite(double(x))) throw DataError("encode_audio: non-finite feature");
  }
  Tensor x = Tensor::constant({params.config.audio_dim}, feature.vec);
  Tensor e = tower(x, params.audio_w1, params.audio_b1, params.audio_w2, params.audio_b2);
  return {e, Modality::audio};
}

Scalar match_loss(const Embedding& text_emb, const Embedding& audio_emb) {
  return scale(cosine_similarity(text_emb.vec, audio_emb.vec), real(-1));
}

namespace {

// log(sum_j exp(x_j)) with the max factored out for stability; gradient flows
// through every element.
Scalar log_sum_exp(const std::vector<Scalar>& xs) {
  size_t m = 0;
  for (size_t j = 1; j < xs.size(); ++j) {
    if (xs[j].value() > xs[m].value()) m = j;
  }
  Scalar total = exp(sub(xs[0], xs[m]));
  for (size_t j = 1; j < xs.size(); ++j) total = add(total, exp(sub(xs[j], xs[m])));
  return add(xs[m], scale(neg_log_clamped(total), real(-1)));
}

std::vector<TokenId> caption_ids(const std::string& caption, const Vocab& vocab) {
  auto ids = vocab.encode_text(caption);
  if (ids.empty()) throw DataError("matcher pair with empty caption");
  return ids;
}

}  // namespace

MatcherParams train_matcher(const std::vector<MatcherPair>& pairs, const Vocab& vocab,
                            const MatcherTrainConfig& config, MatcherTrainReport* report) {
  if (pairs.size() < 4) throw DataError("matcher corpus too small");
  if (config.batch_size < 2) {
    throw ConfigError("contrastive batch needs at least 2 pairs");
  }
  config.model.validate();

  std::vector<std::vector<TokenId>> captions;
  captions.reserve(pairs.size());
  for (const auto& p : pairs) captions.push_back(caption_ids(p.caption, vocab));

  Rng split_rng(derive_seed(config.seed, "matcher-split"));
  std::vector<size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  split_rng.shuffle(order);
  size_t holdout_n = std::max<size_t>(2, size_t(double(pairs.size()) * config.holdout_fraction));
  std::vector<size_t> holdout(order.begin(), order.begin() + holdout_n);
  std::vector<size_t> train(order.begin() + holdout_n, order.end());

  MatcherParams params = MatcherParams::init(config.model, vocab, config.seed);
  Adam opt(params.trainable_tensors(), config.lr);

  MatcherTrainReport rep;
  rep.train_pairs = train.size();
  rep.holdout_pairs = holdout.size();
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng epoch_rng(derive_seed(config.seed, "matcher-epoch-" + std::to_string(epoch)));
    std::vector<size_t> idx = train;
    epoch_rng.shuffle(idx);
    double epoch_loss = 0;
    size_t anchors = 0;
    for (size_t start = 0; start + 2 <= idx.size(); start += config.batch_size) {
      size_t b = std::min(config.batch_size, idx.size() - start);
      if (b < 2) break;
      opt.zero_grad();
      std::vector<Tensor> text_embs, audio_embs;
      for (size_t i = 0; i < b; ++i) {
        size_t p = idx[start + i];
        text_embs.push_back(encode_text(captions[p], params).vec);
        audio_embs.push_back(encode_audio(pairs[p].feature, params).vec);
      }
      Scalar inv_tau = exp(pick(params.log_inv_temp, 0));
      std::vector<std::vector<Scalar>> logits(b);
      for (size_t i = 0; i < b; ++i) {
        logits[i].reserve(b);
        for (size_t j = 0; j < b; ++j) {
          logits[i].push_back(mul(cosine_similarity(text_embs[i], audio_embs[j]), inv_tau));
        }
      }
      Scalar loss = Scalar::constant(0);
      for (size_t i = 0; i < b; ++i) {
        loss = add(loss, sub(log_sum_exp(logits[i]), logits[i][i]));  // text anchor
        std::vector<Scalar> col;
        col.reserve(b);
        for (size_t j = 0; j < b; ++j) col.push_back(logits[j][i]);
        loss = add(loss, sub(log_sum_exp(col), col[i]));  // audio anchor
      }
      loss = scale(loss, real(1) / real(2 * b));
      epoch_loss += double(loss.value()) * double(b);
      anchors += b;
      backward(loss);
      opt.step();
      // Keep 1/tau inside a sane range so the exponentials stay finite.
      real& raw = params.log_inv_temp.mutable_data()[0];
      raw = std::clamp(raw, real(0.0), real(std::log(100.0)));
    }
    rep.epoch_losses.push_back(anchors == 0 ? 0.0 : epoch_loss / double(anchors));
    log_debug("matcher epoch ", epoch, " mean loss ", rep.epoch_losses.back());
  }

  {
    NoGradGuard off;
    std::vector<std::vector<real>> t_emb, a_emb;
    for (size_t p : holdout) {
      t_emb.push_back(encode_text(captions[p], params).vec.data());
      a_emb.push_back(encode_audio(pairs[p].feature, params).vec.data());
    }
    auto cos = [](const std::vector<real>& u, const std::vector<real>& v) {
      double uv = 0, uu = 0, vv = 0;
      for (size_t i = 0; i < u.size(); ++i) {
        uv += double(u[i]) * double(v[i]);
        uu += double(u[i]) * double(u[i]);
        vv += double(v[i]) * double(v[i]);
      }
      return uv / std::sqrt(uu * vv);
    };
    // Retrieval@1 in pools of 33 (the pair's own caption plus 32 distractors).
    size_t pool = std::min<size_t>(33, holdout.size());
    size_t hits = 0, trials = 0;
    for (size_t g = 0; g + pool <= holdout.size(); g += pool) {
      for (size_t i = 0; i < pool; ++i) {
        size_t best = 0;
        double best_s = -2;
        for (size_t j = 0; j < pool; ++j) {
          double s = cos(t_emb[g + j], a_emb[g + i]);
          if (s > best_s) {
            best_s = s;
            best = j;
          }
        }
        hits += best == i;
        ++trials;
      }
    }
    rep.holdout_retrieval_at1 = trials == 0 ? 0.0 : double(hits) / double(trials);
    // AUC: matched score vs every mismatched score.
    size_t wins = 0, ties = 0, comparisons = 0;
    for (size_t i = 0; i < holdout.size(); ++i) {
      double matched = cos(t_emb[i], a_emb[i]);
      for (size_t j = 0; j < holdout.size(); ++j) {
        if (j == i) continue;
        double mismatched = cos(t_emb[i], a_emb[j]);
        wins += matched > mismatched;
        ties += matched == mismatched;
        ++comparisons;
      }
    }
    rep.holdout_auc =
        comparisons == 0 ? 0.0 : (double(wins) + 0.5 * double(ties)) / double(comparisons);
  }
  log_info("matcher retrieval@1 ", rep.holdout_retrieval_at1, " auc ", rep.holdout_auc,
           " tau ", params.temperature());
  if (report != nullptr) *report = rep;
  return params;
}

void save_matcher(const std::string& path, const MatcherParams& params,
                  const MatcherTrainReport& report) {
  Checkpoint ckpt;
  ckpt.magic = kMatcherCheckpointMagic;
  ckpt.meta = {
      {"config",
       {{"token_dim", params.config.token_dim},
        {"hidden", params.config.hidden},
        {"embed_dim", params.config.embed_dim},
        {"audio_dim", params.config.audio_dim}}},
      {"vocab", params.vocab.tokens()},
      {"vocab_digest", params.vocab.digest()},
      {"holdout_retrieval_at1", report.holdout_retrieval_at1},
      {"holdout_auc", report.holdout_auc},
  };
  ckpt.tensors = params.named_tensors();
  save_checkpoint(path, ckpt);
}

MatcherParams load_matcher(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path, kMatcherCheckpointMagic);
  MatcherParams p;
  const auto& cfg = ckpt.meta.at("config");
  p.config.token_dim = cfg.at("token_dim").get<size_t>();
  p.config.hidden = cfg.at("hidden").get<size_t>();
  p.config.embed_dim = cfg.at("embed_dim").get<size_t>();
  p.config.audio_dim = cfg.at("audio_dim").get<size_t>();
  p.config.validate();
  p.vocab = Vocab::from_token_list(ckpt.meta.at("vocab").get<std::vector<std::string>>());
  p.tok_embed = ckpt.tensor("tok_embed");
  p.text_w1 = ckpt.tensor("text_w1");
  p.text_b1 = ckpt.tensor("text_b1");
  p.text_w2 = ckpt.tensor("text_w2");
  p.text_b2 = ckpt.tensor("text_b2");
  p.audio_w1 = ckpt.tensor("audio_w1");
  p.audio_b1 = ckpt.tensor("audio_b1");
  p.audio_w2 = ckpt.tensor("audio_w2");
  p.audio_b2 = ckpt.tensor("audio_b2");
  p.log_inv_temp = ckpt.tensor("log_inv_temp");
  return p;
}

}  // namespace cachesteer
