#include "bcosdiff/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <set>

namespace bcosdiff {

namespace {

std::string format(const char* fmt, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, a);
  return buf;
}

}  // namespace

std::string relevance_table(const RelevanceReport& rep, double theta) {
  std::string out = "prompt: " + rep.prompt + "\n";
  out += "pos  token        score     contribution  flag\n";
  for (const auto& t : rep.tokens) {
    char line[160];
    std::snprintf(line, sizeof line, "%-4lld %-12s %-9s %+.6e %s\n", static_cast<long long>(t.position), t.token.c_str(),
                  format("%.4f", t.score).c_str(), t.contribution, t.score < theta ? "LOW" : "");
    out += line;
  }
  return out;
}

std::string relevance_jsonl(const RelevanceReport& rep, const std::vector<std::string>& map_paths) {
  std::string out;
  for (std::size_t i = 0; i < rep.tokens.size(); ++i) {
    nlohmann::json rec{{"token", rep.tokens[i].token},
                       {"score", rep.tokens[i].score},
                       {"map_path", i < map_paths.size() ? nlohmann::json(map_paths[i]) : nlohmann::json(nullptr)}};
    out += rec.dump() + "\n";
  }
  return out;
}

std::vector<std::string> relevance_prompt_suite(std::size_t n) {
  std::vector<std::string> all;
  std::set<std::string> seen;
  for (const auto& spec : all_specs()) {
    if (spec_split(spec) != Split::kEval) continue;
    for (const auto* group : {&train_templates(), &eval_templates()}) {
      for (const auto& t : *group) {
        std::string c = fill_template(t, spec);
        if (seen.insert(c).second) all.push_back(std::move(c));
      }
    }
  }
  const CounterRng rng(0x5e1ec7, 0);
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[static_cast<std::size_t>(rng.below(i, i))]);
  if (n < all.size()) all.resize(n);
  return all;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) return 0.0;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

void RelevanceAccumulator::add(const Prompt& p, const RelevanceReport& rep) {
  ++prompts_;
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    if (!p.mask[i]) {
      special_max_ = std::max(special_max_, rep.scores[i]);
      continue;
    }
    sum_[static_cast<std::size_t>(p.ids[i])] += rep.scores[i];
    ++count_[static_cast<std::size_t>(p.ids[i])];
  }
}

RelevanceSummary RelevanceAccumulator::summary() const {
  RelevanceSummary s;
  s.prompts = prompts_;
  s.special_max = special_max_;
  double content = 0, filler = 0;
  std::vector<double> freq, mean;
  for (int id = 0; id < vocab_.size(); ++id) {
    const std::size_t n = count_[static_cast<std::size_t>(id)];
    if (n == 0) continue;
    const auto& e = vocab_.entry(id);
    const double m = sum_[static_cast<std::size_t>(id)] / static_cast<double>(n);
    s.tokens.push_back({e.word, e.kind, n, m});
    freq.push_back(static_cast<double>(n));
    mean.push_back(m);
    if (is_content(e.kind)) {
      content += sum_[static_cast<std::size_t>(id)];
      s.content_n += n;
    } else if (e.kind == WordKind::kFiller) {
      filler += sum_[static_cast<std::size_t>(id)];
      s.filler_n += n;
    }
  }
  s.content_mean = s.content_n ? content / static_cast<double>(s.content_n) : 0.0;
  s.filler_mean = s.filler_n ? filler / static_cast<double>(s.filler_n) : 0.0;
  s.frequency_pearson = pearson(freq, mean);
  return s;
}

std::string summary_table(const RelevanceSummary& s) {
  std::string out = "prompts: " + std::to_string(s.prompts) + "\n";
  out += "token        kind     count  mean_relevance\n";
  for (const auto& t : s.tokens) {
    char line[128];
    std::snprintf(line, sizeof line, "%-12s %-8s %-6zu %.4f\n", t.token.c_str(), word_kind_name(t.kind), t.count, t.mean);
    out += line;
  }
  char tail[256];
  std::snprintf(tail, sizeof tail,
                "content mean: %.4f (n=%zu)\nfiller mean: %.4f (n=%zu)\ncontent/filler: %.3f\nmasked max: %.1f\n"
                "pearson(frequency, relevance): %.3f\n",
                s.content_mean, s.content_n, s.filler_mean, s.filler_n, s.ratio(), s.special_max, s.frequency_pearson);
  return out + tail;
}

}  // namespace bcosdiff
