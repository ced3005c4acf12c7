#pragma once

// Caption-quality metrics over word-token sequences plus the audibility
// metric. Exact variants (documented in the report header):
//   bleu    sentence BLEU, clipped n-gram precisions n=1..4 averaged over the
//           orders the candidate has, add-one smoothing on zero counts for
//           n >= 2, brevity penalty e^(1-r/c) with closest reference length;
//           corpus value is the mean over entries
//   rouge_l LCS F-measure, beta = 1.2, max over references, mean over entries
//   cider   tf-idf (raw count x log(N/max(1,df))) n-gram cosine, n=1..4
//           averaged over orders present, mean over references then entries;
//           raw cosine scale, no x10
//   audibility  mean p_audible of the trained classifier over captions

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cachesteer/audibility.hpp"
#include "cachesteer/data.hpp"

namespace cachesteer {

using WordSeq = std::vector<std::string>;

double bleu(const WordSeq& candidate, const std::vector<WordSeq>& references, size_t max_n = 4);
double rouge_l(const WordSeq& candidate, const std::vector<WordSeq>& references);

struct CiderEntry {
  WordSeq candidate;
  std::vector<WordSeq> references;
};
double cider(const std::vector<CiderEntry>& corpus, size_t max_n = 4);

double audibility_metric(const std::vector<std::string>& captions,
                         const ClassifierParams& classifier);

struct MetricsReport {
  double bleu = 0;
  double rouge_l = 0;
  double cider = 0;
  double audibility = 0;
  size_t n = 0;
  nlohmann::json config_echo;
};

// Scores one generation run against the dataset references. Every dataset id
// must have exactly one caption and vice versa.
MetricsReport evaluate_run(const EvalDataset& dataset,
                           const std::vector<CaptionRecord>& captions,
                           const ClassifierParams& classifier,
                           nlohmann::json config_echo = {});

// Human-readable aligned table (columns B, R, C, A; M absent by design)
// followed by a one-line machine-readable JSON summary.
std::string render_report(const MetricsReport& report);

}  // namespace cachesteer
