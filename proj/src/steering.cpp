#include "cachesteer/steering.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>
#include <utility>

#include "cachesteer/errors.hpp"
#include "cachesteer/log.hpp"

namespace cachesteer {

namespace {

bool finite(double v) { return std::isfinite(v); }

void require_finite_nonneg(real v, const char* name) {
  if (!std::isfinite(static_cast<double>(v)) || v < real(0)) {
    throw ConfigError(std::string(name) + " must be finite and nonnegative");
  }
}

std::vector<TokenId> content_words(const std::vector<TokenId>& tokens, const Vocab& vocab) {
  std::vector<TokenId> words;
  words.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (!vocab.is_special(t)) words.push_back(t);
  }
  return words;
}

// Neutral scores for a candidate sentence with no content words: zero cosine
// and an even audible/not-audible split.
constexpr double kNeutralMatchLoss = 0.0;
const double kNeutralAudLoss = std::log(2.0);

}  // namespace

void GuidanceWeights::validate() const {
  require_finite_nonneg(lambda0, "lambda0");
  require_finite_nonneg(lambda1, "lambda1");
  require_finite_nonneg(lambda2, "lambda2");
}

void SteeringConfig::validate() const {
  if (target_len < 1) throw ConfigError("target_len must be at least 1");
  if (candidates < 1) throw ConfigError("candidates must be at least 1");
  if (!std::isfinite(static_cast<double>(step_size)) || step_size <= real(0)) {
    throw ConfigError("step_size must be finite and positive");
  }
  if (beams != 1) throw ConfigError("only single-beam decoding is implemented (beams must be 1)");
  if (!std::isfinite(static_cast<double>(temperature)) || temperature <= real(0)) {
    throw ConfigError("candidate temperature must be finite and positive");
  }
}

CandidateSet candidate_expand(const Tensor& logits, size_t k, real temperature) {
  if (!logits.defined() || logits.rank() != 1) {
    throw ShapeError("candidate_expand expects a rank-1 logits tensor");
  }
  if (k < 1) throw ConfigError("candidate_expand requires k >= 1");
  if (!std::isfinite(static_cast<double>(temperature)) || temperature <= real(0)) {
    throw ConfigError("candidate temperature must be finite and positive");
  }
  const size_t v = logits.size();
  CandidateSet out;
  if (k > v) {
    log_info("candidate count ", k, " exceeds vocab size ", v, "; clamping to ", v);
    out.clamped = true;
    k = v;
  }
  std::vector<TokenId> order(v);
  std::iota(order.begin(), order.end(), 0);
  const std::vector<real>& vals = logits.data();
  std::sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    if (vals[static_cast<size_t>(a)] != vals[static_cast<size_t>(b)]) {
      return vals[static_cast<size_t>(a)] > vals[static_cast<size_t>(b)];
    }
    return a < b;
  });
  order.resize(k);
  out.ids = std::move(order);
  Tensor selected = index_select(logits, out.ids);
  out.probs = softmax(scale(selected, real(1) / temperature), 0);
  return out;
}

AssembledLoss assemble_loss(const KVCache& cache, const std::vector<TokenId>& prefix,
                            const AudioFeature* audio, const GuidanceWeights& weights,
                            const SteeringConfig& config, const GuidanceModels& models,
                            GuidanceScratch* scratch) {
  weights.validate();
  config.validate();
  if (models.lm == nullptr) throw UsageError("assemble_loss requires a language model");
  if (prefix.empty()) throw ValidationError("assemble_loss requires a nonempty prefix");
  if (cache.len + 1 != prefix.size()) {
    throw ShapeError("cache covers " + std::to_string(cache.len) + " positions but the prefix has " +
                     std::to_string(prefix.size()) + " tokens; the cache must cover every prefix position except the feed token");
  }
  const bool want_match = weights.lambda1 > real(0);
  const bool want_aud = weights.lambda2 > real(0);
  if (want_match) {
    if (audio == nullptr || audio->vec.empty()) {
      throw ConfigError("an audio feature is required when lambda1 > 0");
    }
    if (models.matcher == nullptr) throw ConfigError("a matcher is required when lambda1 > 0");
    if (models.matcher->vocab.size() != models.lm->vocab.size()) {
      throw CompatibilityError("matcher vocabulary size differs from the language model vocabulary");
    }
  }
  if (want_aud) {
    if (models.classifier == nullptr) throw ConfigError("a classifier is required when lambda2 > 0");
    if (models.classifier->vocab.size() != models.lm->vocab.size()) {
      throw CompatibilityError("classifier vocabulary size differs from the language model vocabulary");
    }
  }

  GuidanceScratch local;
  GuidanceScratch* s = scratch != nullptr ? scratch : &local;
  const LMParams& lm = *models.lm;
  const TokenId feed = prefix.back();

  AssembledLoss out;
  out.step = lm_step(feed, cache, lm);

  if (!s->anchor.defined()) {
    NoGradGuard ng;
    std::vector<TokenId> context(prefix.begin(), prefix.end() - 1);
    KVCache clean = clean_cache(context, lm);
    Tensor clean_logits = lm_step(feed, clean, lm).logits;
    s->anchor = softmax(clean_logits, 0).detached();
  }
  Scalar ce = cross_entropy(out.step.logits, s->anchor);
  out.ce = static_cast<double>(ce.value());
  Scalar total = scale(ce, weights.lambda0);

  out.candidates = candidate_expand(out.step.logits, config.candidates, config.temperature);
  const size_t k = out.candidates.ids.size();

  std::vector<TokenId> prefix_words;
  if (want_match || want_aud) prefix_words = content_words(prefix, lm.vocab);
  auto sentence_for = [&](TokenId c) {
    std::vector<TokenId> sentence = prefix_words;
    if (!lm.vocab.is_special(c)) sentence.push_back(c);
    return sentence;
  };

  if (want_match) {
    std::vector<real> ms(k);
    {
      NoGradGuard ng;
      if (!s->audio_emb.vec.defined()) {
        Embedding e = encode_audio(*audio, *models.matcher);
        e.vec = e.vec.detached();
        s->audio_emb = e;
      }
      for (size_t i = 0; i < k; ++i) {
        TokenId c = out.candidates.ids[i];
        auto it = s->match_losses.find(c);
        if (it == s->match_losses.end()) {
          std::vector<TokenId> sentence = sentence_for(c);
          double m = sentence.empty()
                         ? kNeutralMatchLoss
                         : static_cast<double>(
                               match_loss(encode_text(sentence, *models.matcher), s->audio_emb)
                                   .value());
          it = s->match_losses.emplace(c, m).first;
        }
        ms[i] = static_cast<real>(it->second);
      }
    }
    Scalar mm = dot(out.candidates.probs, Tensor::constant({k}, std::move(ms)));
    out.mm = static_cast<double>(mm.value());
    total = add(total, scale(mm, weights.lambda1));
  }

  if (want_aud) {
    std::vector<real> as(k);
    {
      NoGradGuard ng;
      for (size_t i = 0; i < k; ++i) {
        TokenId c = out.candidates.ids[i];
        auto it = s->audibility_losses.find(c);
        if (it == s->audibility_losses.end()) {
          std::vector<TokenId> sentence = sentence_for(c);
          double a = sentence.empty()
                         ? kNeutralAudLoss
                         : static_cast<double>(
                               audibility_loss(classify(sentence, *models.classifier)).value());
          it = s->audibility_losses.emplace(c, a).first;
        }
        as[i] = static_cast<real>(it->second);
      }
    }
    Scalar aud = dot(out.candidates.probs, Tensor::constant({k}, std::move(as)));
    out.aud = static_cast<double>(aud.value());
    total = add(total, scale(aud, weights.lambda2));
  }

  out.total = total;
  return out;
}

SteerInfo steer_step(KVCache& cache, const Scalar& loss, real eta,
                     const std::function<double(const KVCache&)>& loss_at) {
  if (!std::isfinite(static_cast<double>(eta)) || eta < real(0)) {
    throw ConfigError("steering step size must be finite and nonnegative");
  }
  if (!loss.defined()) throw UsageError("steer_step requires a loss");
  if (cache.len == 0) throw ValidationError("cannot steer an empty cache");
  if (!loss_at) throw UsageError("steer_step requires a loss evaluator for backtracking");

  SteerInfo info;
  info.loss_before = static_cast<double>(loss.value());
  info.loss_after = info.loss_before;

  std::vector<Tensor> tensors = cache.tensors();
  if (eta == real(0)) {
    cache.zero_grad();
    return info;
  }
  if (!finite(info.loss_before)) {
    info.fell_back = true;
    info.diagnostic = "non-finite loss";
    cache.zero_grad();
    return info;
  }

  backward(loss);

  bool any_grad = false;
  for (const Tensor& t : tensors) {
    if (t.has_grad()) any_grad = true;
  }
  if (!any_grad) {
    throw ValidationError("cache holds no gradients; mark it trainable before steering");
  }
  for (const Tensor& t : tensors) {
    if (!t.has_grad()) continue;
    for (real g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        info.fell_back = true;
        info.diagnostic = "non-finite gradient in cached keys/values";
        cache.zero_grad();
        return info;
      }
    }
  }

  std::vector<std::vector<real>> orig(tensors.size());
  for (size_t i = 0; i < tensors.size(); ++i) orig[i] = tensors[i].data();

  const size_t max_halvings = 5;
  bool accepted = false;
  for (size_t h = 0; h <= max_halvings; ++h) {
    const real step = eta / static_cast<real>(1u << h);
    for (size_t i = 0; i < tensors.size(); ++i) {
      std::vector<real>& d = tensors[i].mutable_data();
      if (!tensors[i].has_grad()) {
        d = orig[i];
        continue;
      }
      const std::vector<real>& g = tensors[i].grad();
      for (size_t j = 0; j < d.size(); ++j) d[j] = orig[i][j] - step * g[j];
    }
    double val;
    {
      NoGradGuard ng;
      val = loss_at(cache);
    }
    if (finite(val) && val < info.loss_before) {
      info.loss_after = val;
      info.halvings = h;
      accepted = true;
      break;
    }
  }
  if (!accepted) {
    for (size_t i = 0; i < tensors.size(); ++i) tensors[i].mutable_data() = orig[i];
    info.fell_back = true;
    info.diagnostic = "no descent within five step-size halvings";
  }
  cache.zero_grad();
  return info;
}

CaptionRecord generate_caption(const AudioFeature& audio, const GuidanceWeights& weights,
                               const SteeringConfig& config, const GuidanceModels& models) {
  weights.validate();
  config.validate();
  if (models.lm == nullptr) throw UsageError("generate_caption requires a language model");
  const LMParams& lm = *models.lm;
  if (models.matcher != nullptr && models.matcher->vocab.digest() != lm.vocab.digest()) {
    throw CompatibilityError("matcher vocabulary differs from the language model vocabulary");
  }
  if (models.classifier != nullptr && models.classifier->vocab.digest() != lm.vocab.digest()) {
    throw CompatibilityError("classifier vocabulary differs from the language model vocabulary");
  }

  std::vector<TokenId> tokens;
  tokens.push_back(Vocab::kBegin);
  for (TokenId t : lm.vocab.encode_text(config.prompt)) tokens.push_back(t);
  const size_t prompt_len = tokens.size();
  if (prompt_len + config.target_len > lm.config.max_len) {
    throw ConfigError("prompt (" + std::to_string(prompt_len) + " tokens) plus target_len (" +
                      std::to_string(config.target_len) + ") exceeds the model context of " +
                      std::to_string(lm.config.max_len));
  }

  KVCache clean;
  {
    NoGradGuard ng;
    std::vector<TokenId> context(tokens.begin(), tokens.end() - 1);
    clean = clean_cache(context, lm);
  }
  KVCache steered = clean.clone();

  CaptionRecord record;
  record.clip_id = audio.clip_id;
  GuidanceScratch scratch;

  for (size_t step_i = 0; step_i < config.target_len; ++step_i) {
    const TokenId feed = tokens.back();
    scratch.next_token();
    {
      NoGradGuard ng;
      Tensor clean_logits = forward_next(feed, clean, lm);
      scratch.anchor = softmax(clean_logits, 0).detached();
    }

    KVCache backup;
    if (config.grad_steps > 0) backup = steered.clone();
    auto loss_at = [&](const KVCache& c) {
      NoGradGuard ng;
      return static_cast<double>(
          assemble_loss(c, tokens, &audio, weights, config, models, &scratch).total.value());
    };

    for (size_t g = 0; g < config.grad_steps; ++g) {
      steered.set_trainable(true);
      steered.zero_grad();
      AssembledLoss al = assemble_loss(steered, tokens, &audio, weights, config, models, &scratch);
      if (!finite(static_cast<double>(al.total.value()))) {
        steered = backup.clone();
        log_info("token ", step_i, ": non-finite loss; using unsteered logits for this step");
        break;
      }
      SteerInfo si = steer_step(steered, al.total, config.step_size, loss_at);
      if (si.fell_back) {
        if (si.diagnostic.find("non-finite") != std::string::npos) {
          steered = backup.clone();
          log_info("token ", step_i, ": ", si.diagnostic, "; using unsteered logits for this step");
        }
        break;  // either restored above or already at a descent floor
      }
    }

    AssembledLoss sel;
    {
      NoGradGuard ng;
      sel = assemble_loss(steered, tokens, &audio, weights, config, models, &scratch);
    }
    const std::vector<real>& probs = sel.candidates.probs.data();
    size_t best = static_cast<size_t>(
        std::max_element(probs.begin(), probs.end()) - probs.begin());
    const TokenId next = sel.candidates.ids[best];

    record.trace.push_back({sel.ce, sel.mm, sel.aud, static_cast<double>(sel.total.value())});
    tokens.push_back(next);
    if (next == Vocab::kEnd) break;
    if (step_i + 1 < config.target_len) {
      steered.append(sel.step.k_new, sel.step.v_new);
    }
  }

  record.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(prompt_len), tokens.end());
  record.text = lm.vocab.text(record.tokens);

  {
    NoGradGuard ng;
    std::vector<TokenId> words = content_words(tokens, lm.vocab);
    if (models.matcher != nullptr && !audio.vec.empty() && !words.empty()) {
      record.match_score = static_cast<double>(
          cosine_similarity(encode_text(words, *models.matcher).vec,
                            encode_audio(audio, *models.matcher).vec)
              .value());
    }
    record.p_audible =
        (models.classifier != nullptr && !words.empty())
            ? static_cast<double>(classify(words, *models.classifier).value())
            : 0.5;
  }
  return record;
}

namespace {

// Suspends gradient accumulation into shared model parameters so concurrent
// generations never write to the same nodes.
class ParamGradPause {
 public:
  explicit ParamGradPause(const GuidanceModels& models) {
    auto take = [&](std::vector<Tensor> ts) {
      for (Tensor& t : ts) {
        saved_.emplace_back(t, t.trainable());
        t.set_trainable(false);
      }
    };
    if (models.lm != nullptr) take(models.lm->trainable_tensors());
    if (models.matcher != nullptr) take(models.matcher->trainable_tensors());
    if (models.classifier != nullptr) take(models.classifier->trainable_tensors());
  }
  ~ParamGradPause() {
    for (auto& [t, was] : saved_) t.set_trainable(was);
  }
  ParamGradPause(const ParamGradPause&) = delete;
  ParamGradPause& operator=(const ParamGradPause&) = delete;

 private:
  std::vector<std::pair<Tensor, bool>> saved_;
};

std::vector<CaptionRecord> caption_pool(const EvalDataset& dataset, const GuidanceWeights& weights,
                                        const SteeringConfig& config, const GuidanceModels& models,
                                        size_t workers) {
  const size_t n = dataset.entries.size();
  std::vector<CaptionRecord> captions(n);
  std::atomic<size_t> cursor{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto run = [&]() {
    while (!failed.load()) {
      const size_t i = cursor.fetch_add(1);
      if (i >= n) break;
      try {
        captions[i] = generate_caption(dataset.entries[i].feature, weights, config, models);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
        break;
      }
    }
  };

  const size_t pool = std::min(std::max<size_t>(workers, 1), std::max<size_t>(n, 1));
  if (pool <= 1) {
    run();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(pool);
    for (size_t i = 0; i < pool; ++i) threads.emplace_back(run);
    for (std::thread& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return captions;
}

}  // namespace

std::vector<SweepPoint> sweep_lambda2(const EvalDataset& dataset, const std::vector<double>& grid,
                                      const GuidanceWeights& base, const SteeringConfig& config,
                                      const GuidanceModels& models, size_t workers) {
  if (grid.empty()) throw ConfigError("sweep grid must be nonempty");
  for (double v : grid) {
    if (!std::isfinite(v) || v < 0) throw ConfigError("sweep grid values must be finite and nonnegative");
  }
  if (dataset.entries.empty()) throw DataError("sweep requires a nonempty dataset");
  if (models.classifier == nullptr) {
    throw ConfigError("sweep requires an audibility classifier for the audibility metric");
  }
  base.validate();
  config.validate();

  ParamGradPause pause(models);
  std::vector<SweepPoint> points;
  points.reserve(grid.size());
  for (double lambda2 : grid) {
    GuidanceWeights w = base;
    w.lambda2 = static_cast<real>(lambda2);
    SweepPoint point;
    point.lambda2 = lambda2;
    point.captions = caption_pool(dataset, w, config, models, workers);
    std::sort(point.captions.begin(), point.captions.end(),
              [](const CaptionRecord& a, const CaptionRecord& b) { return a.clip_id < b.clip_id; });
    nlohmann::json echo = {{"lambda0", static_cast<double>(w.lambda0)},
                           {"lambda1", static_cast<double>(w.lambda1)},
                           {"lambda2", lambda2},
                           {"grad_steps", config.grad_steps},
                           {"candidates", config.candidates},
                           {"step_size", static_cast<double>(config.step_size)},
                           {"target_len", config.target_len}};
    point.metrics = evaluate_run(dataset, point.captions, *models.classifier, echo);
    log_info("sweep lambda2=", lambda2, " audibility=", point.metrics.audibility);
    points.push_back(std::move(point));
  }
  return points;
}

const std::vector<double>& default_lambda2_grid() {
  static const std::vector<double> grid = {0,    0.015, 0.03, 0.06, 0.09, 0.12, 0.15,
                                           0.20, 0.25,  0.30, 0.35, 0.40, 0.45, 0.50};
  return grid;
}

}  // namespace cachesteer
