#pragma once

#include "bcosdiff/interpret.hpp"

#include <string>
#include <vector>

namespace bcosdiff {

/// Plain-text relevance table; tokens scoring below `theta` are flagged.
std::string relevance_table(const RelevanceReport& rep, double theta);

/// One JSON record per unmasked token: {token, score, map_path}.
std::string relevance_jsonl(const RelevanceReport& rep, const std::vector<std::string>& map_paths);

/// Prompts for aggregate relevance analysis: evaluation specs under every
/// template, deduplicated, in a fixed shuffled order.
std::vector<std::string> relevance_prompt_suite(std::size_t n);

struct TokenSummary {
  std::string token;
  WordKind kind;
  std::size_t count = 0;  // occurrences over the suite
  double mean = 0;        // mean relevance per occurrence
};

struct RelevanceSummary {
  std::size_t prompts = 0;
  std::vector<TokenSummary> tokens;  // vocabulary order, occurring tokens only
  double content_mean = 0, filler_mean = 0;
  std::size_t content_n = 0, filler_n = 0;
  double special_max = 0;          // largest score at a masked position
  double frequency_pearson = 0;    // Pearson(count, mean) over tokens
  double ratio() const { return filler_mean > 0 ? content_mean / filler_mean : 0.0; }
};

double pearson(const std::vector<double>& x, const std::vector<double>& y);

class RelevanceAccumulator {
 public:
  explicit RelevanceAccumulator(const Vocabulary& vocab) : vocab_(vocab), sum_(vocab.size(), 0.0), count_(vocab.size(), 0) {}
  void add(const Prompt& p, const RelevanceReport& rep);
  RelevanceSummary summary() const;

 private:
  const Vocabulary& vocab_;
  std::vector<double> sum_;
  std::vector<std::size_t> count_;
  std::size_t prompts_ = 0;
  double special_max_ = 0;
};

template <typename S>
RelevanceSummary summarize_relevance(const DiffusionModel<S>& model, const std::vector<std::string>& prompts, int steps,
                                     std::uint64_t seed) {
  RelevanceAccumulator acc(model.vocab());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Prompt p = model.tokenize(prompts[i]);
    FrozenRun<S> run(model, p, steps, seed + i);
    acc.add(p, relevance_scores(run));
  }
  return acc.summary();
}

std::string summary_table(const RelevanceSummary& s);

}  // namespace bcosdiff
