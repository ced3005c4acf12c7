#include "cachesteer/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "cachesteer/errors.hpp"
#include "cachesteer/log.hpp"
#include "cachesteer/vocab.hpp"

namespace cachesteer {

namespace {

// N-grams keyed as words joined by an unprintable separator.
std::unordered_map<std::string, int> ngram_counts(const WordSeq& s, size_t n) {
  std::unordered_map<std::string, int> counts;
  if (s.size() < n) return counts;
  for (size_t i = 0; i + n <= s.size(); ++i) {
    std::string key = s[i];
    for (size_t j = 1; j < n; ++j) {
      key += '\x1f';
      key += s[i + j];
    }
    counts[key] += 1;
  }
  return counts;
}

void require_refs(const std::vector<WordSeq>& references, const char* where) {
  if (references.empty()) {
    throw ValidationError(std::string(where) + ": no references");
  }
  for (const auto& r : references) {
    if (r.empty()) throw ValidationError(std::string(where) + ": empty reference");
  }
}

// Mean with the addends sorted first, so any permutation of the corpus sums
// in the same order and lands on the same bits.
double stable_mean(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  double total = 0;
  for (double x : xs) total += x;
  return total / double(xs.size());
}

}  // namespace

double bleu(const WordSeq& candidate, const std::vector<WordSeq>& references, size_t max_n) {
  if (candidate.empty()) throw ValidationError("bleu: empty candidate");
  require_refs(references, "bleu");
  if (max_n == 0) throw ValidationError("bleu: max_n must be positive");

  double log_sum = 0;
  size_t orders = 0;
  for (size_t n = 1; n <= max_n; ++n) {
    auto cand = ngram_counts(candidate, n);
    if (cand.empty()) continue;
    std::unordered_map<std::string, int> best_ref;
    for (const auto& ref : references) {
      for (const auto& [g, c] : ngram_counts(ref, n)) {
        auto& slot = best_ref[g];
        slot = std::max(slot, c);
      }
    }
    long total = 0, clipped = 0;
    for (const auto& [g, c] : cand) {
      total += c;
      auto it = best_ref.find(g);
      if (it != best_ref.end()) clipped += std::min(c, it->second);
    }
    double p;
    if (clipped == 0) {
      if (n == 1) return 0.0;
      p = 1.0 / double(total + 1);
    } else {
      p = double(clipped) / double(total);
    }
    log_sum += std::log(p);
    ++orders;
  }
  if (orders == 0) return 0.0;

  size_t c = candidate.size();
  size_t r = references[0].size();
  auto gap = [c](size_t len) { return len > c ? len - c : c - len; };
  for (const auto& ref : references) {
    if (gap(ref.size()) < gap(r) || (gap(ref.size()) == gap(r) && ref.size() < r)) {
      r = ref.size();
    }
  }
  double bp = c > r ? 1.0 : std::exp(1.0 - double(r) / double(c));
  return bp * std::exp(log_sum / double(orders));
}

namespace {

size_t lcs_length(const WordSeq& a, const WordSeq& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double rouge_l(const WordSeq& candidate, const std::vector<WordSeq>& references) {
  if (candidate.empty()) throw ValidationError("rouge_l: empty candidate");
  require_refs(references, "rouge_l");
  constexpr double kBeta2 = 1.2 * 1.2;
  double best = 0;
  for (const auto& ref : references) {
    double lcs = double(lcs_length(candidate, ref));
    if (lcs == 0) continue;
    double p = lcs / double(candidate.size());
    double r = lcs / double(ref.size());
    best = std::max(best, (1.0 + kBeta2) * p * r / (r + kBeta2 * p));
  }
  return best;
}

double cider(const std::vector<CiderEntry>& corpus, size_t max_n) {
  if (corpus.size() < 2) {
    throw ConfigError("cider needs at least 2 corpus entries to define idf");
  }
  for (const auto& entry : corpus) require_refs(entry.references, "cider");

  double n_entries = double(corpus.size());
  // Document frequency per order: entries whose references contain the n-gram.
  std::vector<std::unordered_map<std::string, double>> df(max_n + 1);
  for (size_t n = 1; n <= max_n; ++n) {
    for (const auto& entry : corpus) {
      std::unordered_set<std::string> present;
      for (const auto& ref : entry.references) {
        for (const auto& [g, c] : ngram_counts(ref, n)) present.insert(g);
      }
      for (const auto& g : present) df[n][g] += 1;
    }
  }

  std::vector<double> entry_scores;
  for (const auto& entry : corpus) {
    double order_sum = 0;
    size_t orders = 0;
    for (size_t n = 1; n <= max_n; ++n) {
      auto idf = [&](const std::string& g) {
        auto it = df[n].find(g);
        double d = it == df[n].end() ? 0.0 : it->second;
        return std::log(n_entries / std::max(1.0, d));
      };
      auto cand = ngram_counts(entry.candidate, n);
      bool any = !cand.empty();
      std::unordered_map<std::string, double> wc;
      double nc = 0;
      for (const auto& [g, c] : cand) {
        double w = double(c) * idf(g);
        wc[g] = w;
        nc += w * w;
      }
      double ref_sum = 0;
      for (const auto& ref : entry.references) {
        auto rc = ngram_counts(ref, n);
        any = any || !rc.empty();
        double dot = 0, nr = 0;
        for (const auto& [g, c] : rc) {
          double w = double(c) * idf(g);
          nr += w * w;
          auto it = wc.find(g);
          if (it != wc.end()) dot += w * it->second;
        }
        ref_sum += (nc == 0 || nr == 0) ? 0.0 : dot / std::sqrt(nc * nr);
      }
      if (any) {
        order_sum += ref_sum / double(entry.references.size());
        ++orders;
      }
    }
    entry_scores.push_back(orders == 0 ? 0.0 : order_sum / double(orders));
  }
  return stable_mean(std::move(entry_scores));
}

double audibility_metric(const std::vector<std::string>& captions,
                         const ClassifierParams& classifier) {
  if (captions.empty()) throw ValidationError("audibility metric: no captions");
  NoGradGuard off;
  std::vector<double> probs;
  for (const auto& caption : captions) {
    auto tokens = classifier.vocab.encode_text(caption);
    if (tokens.empty()) {
      throw ValidationError("audibility metric: caption with no words: '" + caption + "'");
    }
    probs.push_back(double(classify(tokens, classifier).value()));
  }
  return stable_mean(std::move(probs));
}

MetricsReport evaluate_run(const EvalDataset& dataset,
                           const std::vector<CaptionRecord>& captions,
                           const ClassifierParams& classifier, nlohmann::json config_echo) {
  if (dataset.entries.empty()) throw DataError("evaluate_run: empty dataset");
  std::unordered_map<std::string, const CaptionRecord*> by_id;
  for (const auto& record : captions) {
    if (!by_id.emplace(record.clip_id, &record).second) {
      throw DataError("evaluate_run: duplicate caption for clip " + record.clip_id);
    }
  }
  std::string missing, extra;
  std::unordered_set<std::string> dataset_ids;
  for (const auto& entry : dataset.entries) {
    dataset_ids.insert(entry.id);
    if (!by_id.count(entry.id)) missing += missing.empty() ? entry.id : ", " + entry.id;
  }
  for (const auto& record : captions) {
    if (!dataset_ids.count(record.clip_id)) {
      extra += extra.empty() ? record.clip_id : ", " + record.clip_id;
    }
  }
  if (!missing.empty()) {
    throw DataError("evaluate_run: no caption for clips: " + missing);
  }
  if (!extra.empty()) {
    throw DataError("evaluate_run: captions for unknown clips: " + extra);
  }

  MetricsReport report;
  report.n = dataset.entries.size();
  report.config_echo = std::move(config_echo);

  std::vector<CiderEntry> cider_corpus;
  std::vector<std::string> texts;
  std::vector<double> bleu_scores, rouge_scores;
  size_t skipped_empty = 0;
  for (const auto& entry : dataset.entries) {
    const CaptionRecord& record = *by_id.at(entry.id);
    WordSeq cand = tokenize_words(record.text);
    std::vector<WordSeq> refs;
    for (const auto& r : entry.references) refs.push_back(tokenize_words(r));
    cider_corpus.push_back({cand, refs});
    if (cand.empty()) {
      // An empty caption scores zero and carries no audibility evidence.
      ++skipped_empty;
      bleu_scores.push_back(0);
      rouge_scores.push_back(0);
      continue;
    }
    bleu_scores.push_back(bleu(cand, refs));
    rouge_scores.push_back(rouge_l(cand, refs));
    texts.push_back(record.text);
  }
  if (skipped_empty > 0) {
    log_info("evaluate_run: ", skipped_empty, " empty captions scored as zero");
  }
  report.bleu = stable_mean(std::move(bleu_scores));
  report.rouge_l = stable_mean(std::move(rouge_scores));
  report.cider = cider(cider_corpus);
  if (texts.empty()) throw DataError("evaluate_run: every caption is empty");
  report.audibility = audibility_metric(texts, classifier);
  return report;
}

std::string render_report(const MetricsReport& report) {
  std::ostringstream os;
  os << "# metrics over " << report.n << " clips\n";
  os << "# bleu: sentence BLEU-4, add-one smoothing for n>=2, closest-ref brevity penalty\n";
  os << "# rouge_l: LCS F-measure, beta=1.2, max over references\n";
  os << "# cider: tf-idf ngram cosine, n=1..4, raw scale (no x10)\n";
  os << "# audibility: mean classifier p_audible\n";
  os << "# meteor: not computed (external dependency), column omitted\n";
  os << std::fixed << std::setprecision(4);
  os << "  B       R       C       A\n";
  os << "  " << report.bleu << "  " << report.rouge_l << "  " << report.cider << "  "
     << report.audibility << "\n";
  nlohmann::json line = {{"record", "metrics"},     {"n", report.n},
                         {"bleu", report.bleu},     {"rouge_l", report.rouge_l},
                         {"cider", report.cider},   {"audibility", report.audibility},
                         {"config", report.config_echo}};
  os << line.dump() << "\n";
  return os.str();
}

}  // namespace cachesteer
