#pragma once

#include "bcosdiff/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

namespace bcosdiff {

/// A deterministic sampling run recorded with every dynamic coefficient
/// frozen. The prompt embedding is the only free leaf; the initial noise,
/// the timestep features and the shift mu enter as constants, so replaying
/// the tape is an affine map of the embedding, composed across all steps.
template <typename S>
class FrozenRun {
 public:
  FrozenRun(const DiffusionModel<S>& model, const Prompt& prompt, int steps, std::uint64_t seed, double eta = 0.0)
      : prompt_(prompt), tape_(std::make_unique<Tape<S>>(true)) {
    if (eta != 0.0) throw ConfigError("explanations require deterministic sampling (eta = 0)");
    if (prompt.active() == 0) throw DataError("prompt is empty after masking special tokens");
    const DiffusionSchedule& s = model.schedule();
    timesteps_ = ddim_timesteps(s.T(), steps);
    Graph<S> g(*tape_, false);
    y_ = tape_->leaf(model.embed(prompt), true);
    Var<S> x = g.constant(initial_noise<S>(s, model.state_shape(), seed));
    for (std::size_t k = 0; k + 1 < timesteps_.size(); ++k) {
      Var<S> x0 = model.predict_x0(g, x, timesteps_[k], y_, prompt.mask);
      x = ddim(x, x0, s, timesteps_[k], timesteps_[k + 1]);
    }
    out_ = x;
    bias_ = replay(Tensor<S>(y_.shape()));
  }

  const Prompt& prompt() const { return prompt_; }
  const std::vector<int>& timesteps() const { return timesteps_; }
  const Tape<S>& tape() const { return *tape_; }

  /// Prompt embedding the run was recorded with, [1,L,d].
  const Tensor<S>& embedding() const { return y_.value(); }
  /// Final state x_0 of the recorded run, [1,6,H,W].
  const Tensor<S>& sample() const { return out_.value(); }
  /// replay(0): the part of the output no prompt token accounts for.
  const Tensor<S>& bias() const { return bias_; }

  /// Final state with the prompt embedding replaced by `y`.
  Tensor<S> replay(const Tensor<S>& y) const { return tape_->replay(out_, {{y_, y}}); }

  /// Gradient of <cotangent, output> with respect to the embedding.
  Tensor<S> pullback(const Tensor<S>& cotangent) const {
    Gradients<S> g = tape_->vjp(out_, cotangent);
    return g.take(y_);
  }

  std::size_t stored_elements() const { return tape_->stored_elements(); }

 private:
  Prompt prompt_;
  std::unique_ptr<Tape<S>> tape_;
  std::vector<int> timesteps_;
  Var<S> y_, out_;
  Tensor<S> bias_;
};

/// R(x) = W(x) x = replay(x) - replay(0), [6,H,W].
template <typename S>
Tensor<S> reconstruction(const FrozenRun<S>& run, const Tensor<S>& y) {
  require_same_shape(y.shape(), run.embedding().shape(), "reconstruction");
  Tensor<S> r = run.replay(y);
  r.array() -= run.bias().array();
  const Shape& s = run.sample().shape();
  return r.reshaped({s[1], s[2], s[3]});
}

template <typename S>
Tensor<S> reconstruction(const FrozenRun<S>& run) {
  return reconstruction(run, run.embedding());
}

template <typename S>
struct NormalizedReconstruction {
  Tensor<S> image;            // [3,H,W], clamped to [0,1]
  std::vector<char> defined;  // [3*H*W], false where the denominator vanishes
  Index undefined = 0;
};

/// R_rgb / (R_rgb + R_comp) per channel; pixels whose denominator is below
/// `eps_div` in magnitude are flagged, not filled.
template <typename S>
NormalizedReconstruction<S> normalize_reconstruction(const Tensor<S>& r, double eps_div = 1e-6) {
  if (r.rank() != 3 || r.dim(0) != 6) throw ShapeError("normalized reconstruction: expected [6,H,W]");
  const Index plane = 3 * r.dim(1) * r.dim(2);
  NormalizedReconstruction<S> out{Tensor<S>({3, r.dim(1), r.dim(2)}), std::vector<char>(static_cast<std::size_t>(plane), 1), 0};
  for (Index i = 0; i < plane; ++i) {
    const S den = r[i] + r[plane + i];
    if (std::abs(den) < static_cast<S>(eps_div) || !std::isfinite(den)) {
      out.defined[static_cast<std::size_t>(i)] = 0;
      ++out.undefined;
      continue;
    }
    out.image[i] = std::clamp(r[i] / den, S(0), S(1));
  }
  return out;
}

template <typename S>
NormalizedReconstruction<S> normalized_reconstruction(const FrozenRun<S>& run, const Tensor<S>& y, double eps_div = 1e-6) {
  return normalize_reconstruction(reconstruction(run, y), eps_div);
}

/// Mean squared difference over defined pixels only.
template <typename S>
double defined_mse(const NormalizedReconstruction<S>& n, const Tensor<S>& reference) {
  require_same_shape(n.image.shape(), reference.shape(), "defined_mse");
  double acc = 0;
  Index count = 0;
  for (Index i = 0; i < reference.size(); ++i) {
    if (!n.defined[static_cast<std::size_t>(i)]) continue;
    const double d = static_cast<double>(n.image[i]) - static_cast<double>(reference[i]);
    acc += d * d;
    ++count;
  }
  if (count == 0) throw NumericError("normalized reconstruction has no defined pixel");
  return acc / static_cast<double>(count);
}

struct TokenRelevance {
  Index position;
  int id;
  std::string token;
  double contribution;  // signed sum over pixels, channels and embedding dims
  double score;         // |contribution| / sum of |contributions|
};

struct RelevanceReport {
  std::string prompt;
  std::vector<TokenRelevance> tokens;  // unmasked tokens in prompt order
  std::vector<double> scores;          // one per position, zero where masked
};

namespace detail {

inline RelevanceReport normalize_contributions(const Prompt& p, const std::vector<double>& contribution) {
  RelevanceReport rep;
  rep.prompt = p.text;
  rep.scores.assign(p.ids.size(), 0.0);
  double total = 0;
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    if (p.mask[i]) total += std::abs(contribution[i]);
  }
  if (!(total > 0) || !std::isfinite(total)) throw NumericError("relevance: all token contributions vanish");
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    if (!p.mask[i]) continue;
    rep.scores[i] = std::abs(contribution[i]) / total;
    rep.tokens.push_back({static_cast<Index>(i), p.ids[i], p.tokens[i], contribution[i], rep.scores[i]});
  }
  return rep;
}

// Embedding with every row except `position` zeroed.
template <typename S>
Tensor<S> isolate_token(const Tensor<S>& y, Index position) {
  const Index len = y.dim(1);
  if (position < 0 || position >= len) throw std::out_of_range("token index outside the prompt");
  Tensor<S> only(y.shape());
  only.matrix(len).row(position) = y.matrix(len).row(position);
  return only;
}

}  // namespace detail

/// Token relevance from one backward pass with unit cotangent:
/// contribution_i = <sum over outputs of dOut/dy_i, y_i>.
template <typename S>
RelevanceReport relevance_scores(const FrozenRun<S>& run) {
  const Tensor<S> g = run.pullback(Tensor<S>::full(run.sample().shape(), S(1)));
  const Tensor<S>& y = run.embedding();
  const Index len = y.dim(1);
  const auto gm = g.matrix(len);
  const auto ym = y.matrix(len);
  std::vector<double> c(static_cast<std::size_t>(len));
  for (Index i = 0; i < len; ++i) c[static_cast<std::size_t>(i)] = static_cast<double>(gm.row(i).dot(ym.row(i)));
  return detail::normalize_contributions(run.prompt(), c);
}

/// Reference implementation by one replay per token.
template <typename S>
RelevanceReport relevance_by_replay(const FrozenRun<S>& run) {
  const Tensor<S>& y = run.embedding();
  std::vector<double> c(static_cast<std::size_t>(y.dim(1)), 0.0);
  for (Index i = 0; i < y.dim(1); ++i) {
    if (!run.prompt().mask[static_cast<std::size_t>(i)]) continue;
    const Tensor<S> r = run.replay(detail::isolate_token(y, i));
    c[static_cast<std::size_t>(i)] = static_cast<double>((r.array() - run.bias().array()).sum());
  }
  return detail::normalize_contributions(run.prompt(), c);
}

/// Channel-summed contribution of token `position` at every pixel, [H,W].
template <typename S>
Tensor<S> token_attribution_map(const FrozenRun<S>& run, Index position) {
  const Prompt& p = run.prompt();
  if (position < 0 || position >= p.length()) throw std::out_of_range("token index outside the prompt");
  if (!p.mask[static_cast<std::size_t>(position)]) {
    throw DataError("token " + std::to_string(position) + " ('" + p.tokens[static_cast<std::size_t>(position)] +
                    "') is masked and has no attribution");
  }
  const Tensor<S> r = run.replay(detail::isolate_token(run.embedding(), position));
  const Shape& s = run.sample().shape();
  const Index hw = s[2] * s[3];
  Tensor<S> map({s[2], s[3]});
  for (Index c = 0; c < s[1]; ++c) {
    map.array() += r.array().segment(c * hw, hw) - run.bias().array().segment(c * hw, hw);
  }
  return map;
}

/// Completeness ledger: ||replay(0)|| relative to ||sample||.
template <typename S>
double bias_fraction(const FrozenRun<S>& run) {
  return static_cast<double>(run.bias().array().matrix().norm() / run.sample().array().matrix().norm());
}

/// sample = R(y) + replay(0), checked element by element. The reconstruction
/// is formed in extended precision, where the difference of two recorded
/// values is exact in practice, so recomposing and rounding back to S
/// reproduces the sample bit for bit unless replay itself drifted.
struct CompletenessLedger {
  std::size_t elements = 0;
  std::size_t mismatches = 0;        // recomposition != sample (bitwise)
  std::size_t naive_mismatches = 0;  // same, with R rounded to S first
  double bias_fraction = 0;          // |replay(0)| / |sample|
};

template <typename S>
CompletenessLedger completeness_ledger(const FrozenRun<S>& run) {
  using Wide = long double;
  const Tensor<S> full = run.replay(run.embedding());
  const Tensor<S>& bias = run.bias();
  const Tensor<S>& sample = run.sample();
  CompletenessLedger l;
  l.elements = static_cast<std::size_t>(sample.size());
  for (Index i = 0; i < sample.size(); ++i) {
    const Wide r = static_cast<Wide>(full[i]) - static_cast<Wide>(bias[i]);
    const S recomposed = static_cast<S>(r + static_cast<Wide>(bias[i]));
    const S naive = static_cast<S>(full[i] - bias[i]) + bias[i];
    const S want = sample[i];
    l.mismatches += std::memcmp(&recomposed, &want, sizeof(S)) != 0;
    l.naive_mismatches += std::memcmp(&naive, &want, sizeof(S)) != 0;
  }
  l.bias_fraction = bias_fraction(run);
  return l;
}

struct AlignmentReport {
  std::size_t units = 0;                // sampled (cos, output) pairs
  std::vector<double> decile_cos;       // mean |cos| per |output| decile, lowest first
  std::vector<double> decile_output;    // mean |output| per decile
  double top_minus_bottom = 0;          // mean |cos| difference, top vs bottom decile
  double z = 0;                         // Welch statistic of that difference
  double p_value = 1;                   // one-sided, top > bottom
};

/// Stratifies |cos(input, weight)| of B-cos units by output magnitude. Units
/// are drawn uniformly (with replacement) from every tagged B-cos output on
/// the tape.
template <typename S>
AlignmentReport alignment_audit(const Tape<S>& tape, std::size_t samples = 20000, std::uint64_t seed = 0) {
  std::vector<int> outputs;
  std::vector<std::size_t> offsets{0};
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const Node<S>& n = tape.node(static_cast<int>(id));
    if (n.tag != NodeTag::kBcosOutput) continue;
    outputs.push_back(static_cast<int>(id));
    offsets.push_back(offsets.back() + static_cast<std::size_t>(n.value.size()));
  }
  AlignmentReport rep;
  if (outputs.empty() || offsets.back() == 0) return rep;
  const CounterRng rng(seed, 0xa11);
  std::vector<std::pair<double, double>> pairs;  // (|out|, |cos|)
  pairs.reserve(samples);
  for (std::size_t k = 0; k < samples; ++k) {
    const std::size_t u = static_cast<std::size_t>(rng.below(k, offsets.back()));
    const std::size_t j = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), u) - offsets.begin()) - 1;
    const Node<S>& out = tape.node(outputs[j]);
    const Node<S>& cos = tape.node(out.partner);
    const Index e = static_cast<Index>(u - offsets[j]);
    pairs.emplace_back(std::abs(static_cast<double>(out.value[e])), std::abs(static_cast<double>(cos.value[e])));
  }
  std::sort(pairs.begin(), pairs.end());
  rep.units = pairs.size();
  const std::size_t n = pairs.size();
  auto stats = [&](std::size_t lo, std::size_t hi, double& mean, double& var, double& out_mean) {
    mean = 0;
    out_mean = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      mean += pairs[i].second;
      out_mean += pairs[i].first;
    }
    const double m = static_cast<double>(hi - lo);
    mean /= m;
    out_mean /= m;
    var = 0;
    for (std::size_t i = lo; i < hi; ++i) var += (pairs[i].second - mean) * (pairs[i].second - mean);
    var /= std::max(1.0, m - 1);
  };
  double bottom_mean = 0, bottom_var = 0, top_mean = 0, top_var = 0;
  for (std::size_t d = 0; d < 10; ++d) {
    const std::size_t lo = n * d / 10, hi = n * (d + 1) / 10;
    if (hi <= lo) continue;
    double mean, var, out_mean;
    stats(lo, hi, mean, var, out_mean);
    rep.decile_cos.push_back(mean);
    rep.decile_output.push_back(out_mean);
    if (d == 0) {
      bottom_mean = mean;
      bottom_var = var / static_cast<double>(hi - lo);
    }
    if (d == 9) {
      top_mean = mean;
      top_var = var / static_cast<double>(hi - lo);
    }
  }
  rep.top_minus_bottom = top_mean - bottom_mean;
  const double se = std::sqrt(top_var + bottom_var);
  rep.z = se > 0 ? rep.top_minus_bottom / se : 0.0;
  rep.p_value = 0.5 * std::erfc(rep.z / std::sqrt(2.0));
  return rep;
}

}  // namespace bcosdiff
