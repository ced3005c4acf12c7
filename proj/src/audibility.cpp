#include "cachesteer/audibility.hpp"

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

void ClassifierConfig::validate() const {
  if (token_dim == 0 || hidden == 0) {
    throw ConfigError("classifier dimensions must be positive");
  }
}

ClassifierParams ClassifierParams::init(const ClassifierConfig& config, const Vocab& vocab,
                                        uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "classifier-init"));
  ClassifierParams p;
  p.config = config;
  p.vocab = vocab;
  auto weight = [&rng](size_t rows, size_t cols) {
    std::vector<real> v(rows * cols);
    double sigma = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto& x : v) x = real(rng.normal(0.0, sigma));
    return Tensor::param({rows, cols}, std::move(v));
  };
  std::vector<real> emb(vocab.size() * config.token_dim);
  for (auto& x : emb) x = real(rng.normal(0.0, 0.1));
  p.tok_embed = Tensor::param({vocab.size(), config.token_dim}, std::move(emb));
  p.w1 = weight(config.token_dim, config.hidden);
  p.b1 = Tensor::param({config.hidden}, std::vector<real>(config.hidden, real(0)));
  p.w2 = weight(config.hidden, 2);
  p.b2 = Tensor::param({2}, std::vector<real>(2, real(0)));
  return p;
}

std::vector<std::pair<std::string, Tensor>> ClassifierParams::named_tensors() const {
  return {{"tok_embed", tok_embed}, {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
}

std::vector<Tensor> ClassifierParams::trainable_tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

namespace {

Tensor class_logits(const std::vector<TokenId>& tokens, const ClassifierParams& params) {
  if (tokens.empty()) throw ValidationError("classify: empty token list");
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<size_t>(t) >= params.vocab.size()) {
      std::ostringstream os;
      os << "classify: token id " << t << " outside vocabulary of " << params.vocab.size();
      throw DataError(os.str());
    }
  }
  Tensor pooled = mean_rows(
      embedding_rows(params.tok_embed, std::vector<int>(tokens.begin(), tokens.end())));
  return linear(gelu(linear(pooled, params.w1, params.b1)), params.w2, params.b2);
}

}  // namespace

AudibilityProb classify(const std::vector<TokenId>& tokens, const ClassifierParams& params) {
  Tensor probs = softmax(class_logits(tokens, params), 0);
  return {pick(probs, 1)};
}

Scalar audibility_loss(const AudibilityProb& p) { return neg_log_clamped(p.p_audible); }

ClassifierParams train_classifier(const std::vector<LabeledCaption>& corpus, const Vocab& vocab,
                                  const ClassifierTrainConfig& config,
                                  ClassifierTrainReport* report) {
  if (corpus.size() < 4) throw DataError("classifier corpus too small");
  bool any_pos = false, any_neg = false;
  for (const auto& c : corpus) {
    (c.label == AudibilityLabel::audible ? any_pos : any_neg) = true;
  }
  if (!any_pos || !any_neg) {
    throw DataError("classifier corpus must contain both labels");
  }
  config.model.validate();

  std::vector<std::vector<TokenId>> tokens;
  std::vector<int> labels;
  tokens.reserve(corpus.size());
  for (const auto& c : corpus) {
    auto ids = vocab.encode_text(c.text);
    if (ids.empty()) throw DataError("classifier caption with no words: '" + c.text + "'");
    tokens.push_back(std::move(ids));
    labels.push_back(c.label == AudibilityLabel::audible ? 1 : 0);
  }

  Rng split_rng(derive_seed(config.seed, "classifier-split"));
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  split_rng.shuffle(order);
  size_t holdout_n =
      std::max<size_t>(2, size_t(double(corpus.size()) * config.holdout_fraction));
  std::vector<size_t> holdout(order.begin(), order.begin() + holdout_n);
  std::vector<size_t> train(order.begin() + holdout_n, order.end());
  if (train.empty()) throw DataError("classifier corpus too small to split");

  ClassifierParams params = ClassifierParams::init(config.model, vocab, config.seed);
  Adam opt(params.trainable_tensors(), config.lr, config.weight_decay);

  ClassifierTrainReport rep;
  rep.train_examples = train.size();
  rep.holdout_examples = holdout.size();
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_lr(config.lr *
               real(std::pow(double(config.lr_decay), double(epoch / config.decay_every))));
    Rng epoch_rng(derive_seed(config.seed, "classifier-epoch-" + std::to_string(epoch)));
    std::vector<size_t> idx = train;
    epoch_rng.shuffle(idx);
    double epoch_loss = 0;
    for (size_t start = 0; start < idx.size(); start += config.batch_size) {
      size_t stop = std::min(idx.size(), start + config.batch_size);
      opt.zero_grad();
      real inv_batch = real(1) / real(stop - start);
      for (size_t i = start; i < stop; ++i) {
        size_t ex = idx[i];
        std::vector<real> target{labels[ex] == 0 ? real(1) : real(0),
                                 labels[ex] == 1 ? real(1) : real(0)};
        Scalar loss = cross_entropy(class_logits(tokens[ex], params),
                                    Tensor::constant({2}, target));
        epoch_loss += double(loss.value());
        backward(scale(loss, inv_batch));
      }
      opt.step();
    }
    rep.epoch_losses.push_back(epoch_loss / double(train.size()));
    log_debug("classifier epoch ", epoch, " mean loss ", rep.epoch_losses.back());
  }

  {
    NoGradGuard off;
    size_t correct = 0;
    for (size_t ex : holdout) {
      real p = classify(tokens[ex], params).value();
      correct += (p > real(0.5)) == (labels[ex] == 1);
    }
    rep.holdout_accuracy = double(correct) / double(holdout.size());
  }
  log_info("classifier holdout accuracy ", rep.holdout_accuracy);
  if (report != nullptr) *report = rep;
  return params;
}

void save_classifier(const std::string& path, const ClassifierParams& params,
                     const ClassifierTrainReport& report) {
  Checkpoint ckpt;
  ckpt.magic = kClassifierCheckpointMagic;
  ckpt.meta = {
      {"config", {{"token_dim", params.config.token_dim}, {"hidden", params.config.hidden}}},
      {"vocab", params.vocab.tokens()},
      {"vocab_digest", params.vocab.digest()},
      {"holdout_accuracy", report.holdout_accuracy},
  };
  ckpt.tensors = params.named_tensors();
  save_checkpoint(path, ckpt);
}

ClassifierParams load_classifier(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path, kClassifierCheckpointMagic);
  ClassifierParams p;
  const auto& cfg = ckpt.meta.at("config");
  p.config.token_dim = cfg.at("token_dim").get<size_t>();
  p.config.hidden = cfg.at("hidden").get<size_t>();
  p.config.validate();
  p.vocab = Vocab::from_token_list(ckpt.meta.at("vocab").get<std::vector<std::string>>());
  p.tok_embed = ckpt.tensor("tok_embed");
  p.w1 = ckpt.tensor("w1");
  p.b1 = ckpt.tensor("b1");
  p.w2 = ckpt.tensor("w2");
  p.b2 = ckpt.tensor("b2");
  return p;
}

}  // namespace cachesteer
