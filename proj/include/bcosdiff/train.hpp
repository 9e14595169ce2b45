#pragma once

#include "bcosdiff/checkpoint.hpp"
#include "bcosdiff/data.hpp"
#include "bcosdiff/model.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace bcosdiff {

struct TrainConfig {
  int steps = 20000;
  int batch = 16;
  double lr = 1e-3;
  double lr_final = 3e-4;  // cosine decay from lr to lr_final over `steps`
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  bool flip = true;
  std::uint64_t seed = 1;

  double lr_at(int step) const {
    const double f = steps > 1 ? std::min(1.0, static_cast<double>(step) / (steps - 1)) : 1.0;
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + std::cos(3.14159265358979323846 * f));
  }
  std::map<std::string, std::string> entries() const;
  void set(const std::string& key, const std::string& value);
};

/// Rendered, encoded training images keyed by spec (rendered once).
class ImageCache {
 public:
  explicit ImageCache(Index size) : size_(size) {}
  template <typename S>
  Tensor<S> encoded(const SceneSpec& spec, bool flip) {
    const std::uint64_t key = spec_hash(spec);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, encode_image(render_scene(spec, size_, size_))).first;
    const Tensor<double>& e = it->second;
    Tensor<S> out = e.template cast<S>();
    if (flip) {
      const Index planes = e.dim(0), h = e.dim(1), w = e.dim(2);
      for (Index p = 0; p < planes * h; ++p) {
        for (Index x = 0; x < w; ++x) out[p * w + x] = static_cast<S>(e[p * w + (w - 1 - x)]);
      }
    }
    return out;
  }

 private:
  Index size_;
  std::unordered_map<std::uint64_t, Tensor<double>> cache_;
};

struct StepDraw {
  std::vector<std::size_t> examples;
  std::vector<int> timesteps;
  std::vector<char> flips;
};

/// Batch composition of a step, a pure function of (seed, step).
StepDraw draw_step(std::uint64_t seed, int step, int batch, std::size_t dataset_size, int T, bool flip);

/// x0-prediction (or eps) trainer with decoupled weight decay. Randomness is
/// keyed by (seed, step), so a run restored from a checkpoint continues
/// bit-identically.
template <typename S>
class Trainer {
 public:
  Trainer(DiffusionModel<S>& model, TrainConfig cfg, std::vector<Example> data)
      : model_(model), cfg_(cfg), data_(std::move(data)), images_(model.config().image_size) {
    if (data_.empty()) throw DataError("training set is empty");
    if (cfg_.batch < 1 || cfg_.steps < 0) throw ConfigError("train: batch must be >= 1 and steps >= 0");
    model_.visit([&](Parameter<S>& p) {
      params_.push_back(&p);
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    });
    for (const auto& ex : data_) prompts_.push_back(model_.tokenize(ex.caption));
  }

  int step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  /// One optimization step; returns the batch loss before the update.
  double advance() {
    const ModelConfig& mc = model_.config();
    const DiffusionSchedule& s = model_.schedule();
    const StepDraw d = draw_step(cfg_.seed, step_, cfg_.batch, data_.size(), s.T(), cfg_.flip);
    const Index n = cfg_.batch, hw = mc.image_size * mc.image_size;
    const Index per = ModelConfig::kChannels * hw;
    Tensor<S> x0(model_.state_shape(n)), x_t(model_.state_shape(n));
    const Tensor<S> noise = normal_tensor<S>(CounterRng(cfg_.seed, 0x7a11).substream(static_cast<std::uint64_t>(step_)),
                                             model_.state_shape(n));
    std::vector<const Prompt*> prompts;
    std::vector<char> mask;
    for (Index b = 0; b < n; ++b) {
      const std::size_t e = d.examples[static_cast<std::size_t>(b)];
      const Tensor<S> img = images_.encoded<S>(data_[e].spec, d.flips[static_cast<std::size_t>(b)] != 0);
      x0.array().segment(b * per, per) = img.array();
      const Tensor<S> eps(img.shape(), noise.array().segment(b * per, per));
      const NoisyState<S> q = q_sample(img, d.timesteps[static_cast<std::size_t>(b)], s, eps);
      x_t.array().segment(b * per, per) = q.x_t.array();
      prompts.push_back(&prompts_[e]);
      mask.insert(mask.end(), prompts_[e].mask.begin(), prompts_[e].mask.end());
    }
    Tape<S> tape;
    Graph<S> g(tape, true);
    Var<S> y = model_.embedder().forward(g, prompts);
    Var<S> out = model_.denoise(g, g.constant(std::move(x_t)), d.timesteps, y, mask);
    Var<S> loss = mse(out, g.constant(mc.target == Target::kX0 ? std::move(x0) : noise));
    const double value = static_cast<double>(loss.value().item());
    if (!std::isfinite(value)) throw NumericError("training loss is not finite at step " + std::to_string(step_));
    Gradients<S> grads = tape.backward(loss);
    apply_update(g, grads);
    track_divergence(value);
    ++step_;
    return value;
  }

  Checkpoint checkpoint() const {
    Checkpoint c = make_checkpoint(model_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      c.blobs.push_back({"adam.m/" + params_[i]->name, dtype_of<S>(), m_[i].template cast<double>()});
      c.blobs.push_back({"adam.v/" + params_[i]->name, dtype_of<S>(), v_[i].template cast<double>()});
    }
    c.meta["step"] = std::to_string(step_);
    c.meta["initial_loss"] = initial_loss_ ? std::to_string(*initial_loss_) : "";
    for (const auto& [k, v] : cfg_.entries()) c.meta["train." + k] = v;
    return c;
  }

  /// Restores optimizer state and step counter (parameters come from
  /// model_from_checkpoint).
  void restore(const Checkpoint& c) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const NamedTensor* m = c.find("adam.m/" + params_[i]->name);
      const NamedTensor* v = c.find("adam.v/" + params_[i]->name);
      if (!m || !v) throw DataError("checkpoint lacks optimizer state for " + params_[i]->name);
      m_[i] = m->value.template cast<S>();
      v_[i] = v->value.template cast<S>();
    }
    auto it = c.meta.find("step");
    if (it == c.meta.end()) throw DataError("checkpoint lacks a step counter");
    step_ = std::stoi(it->second);
    auto il = c.meta.find("initial_loss");
    if (il != c.meta.end() && !il->second.empty()) initial_loss_ = std::stod(il->second);
  }

 private:
  void apply_update(Graph<S>& g, Gradients<S>& grads) {
    std::unordered_map<const Parameter<S>*, Tensor<S>> by_param;
    for (const auto& [p, v] : g.bound()) by_param.emplace(p, grads.take(v));
    double sq = 0;
    for (const auto& [p, gr] : by_param) sq += static_cast<double>(gr.array().matrix().squaredNorm());
    const double norm = std::sqrt(sq);
    const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
    const double t = step_ + 1;
    const double lr = cfg_.lr_at(step_);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t), c2 = 1.0 - std::pow(cfg_.beta2, t);
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto it = by_param.find(params_[i]);
      if (it == by_param.end()) continue;
      const auto gr = (it->second.array() * static_cast<S>(clip)).eval();
      m_[i].array() = b1 * m_[i].array() + (S(1) - b1) * gr;
      v_[i].array() = b2 * v_[i].array() + (S(1) - b2) * gr * gr;
      auto& w = params_[i]->value.array();
      w *= static_cast<S>(1.0 - lr * cfg_.weight_decay);
      w -= static_cast<S>(lr) * (m_[i].array() / static_cast<S>(c1)) /
           ((v_[i].array() / static_cast<S>(c2)).sqrt() + static_cast<S>(cfg_.adam_eps));
    }
  }

  void track_divergence(double loss) {
    if (!initial_loss_) initial_loss_ = loss;
    above_ = loss > 10 * *initial_loss_ ? above_ + 1 : 0;
    if (above_ >= 1000) {
      throw NumericError("training diverged: loss above 10x its initial value for 1000 consecutive steps");
    }
  }

  DiffusionModel<S>& model_;
  TrainConfig cfg_;
  std::vector<Example> data_;
  std::vector<Prompt> prompts_;
  ImageCache images_;
  std::vector<Parameter<S>*> params_;
  std::vector<Tensor<S>> m_, v_;
  int step_ = 0;
  std::optional<double> initial_loss_;
  int above_ = 0;
};

// ---------------------------------------------------------------------------
// Color-accuracy proxy

/// Mean color of the largest non-background pixel group of an image [3,H,W],
/// snapped to the nearest palette color. Empty when no pixel stands out from
/// the background.
std::optional<ColorKind> dominant_color(const Tensor<double>& img);

struct ColorPrompt {
  std::string text;
  ColorKind color;
};

/// Held-out prompts: evaluation templates over evaluation specs, one per
/// distinct caption.
std::vector<ColorPrompt> color_eval_prompts();

struct ColorAccuracy {
  std::size_t correct = 0, total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

template <typename S>
ColorAccuracy eval_color_accuracy(const DiffusionModel<S>& model, const std::vector<ColorPrompt>& prompts, int per_prompt,
                                  int steps, std::uint64_t seed, bool mask_color = false) {
  ColorAccuracy acc;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Prompt p = model.tokenize(prompts[i].text);
    if (mask_color) p = mask_kind(p, model.vocab(), WordKind::kColor);
    for (int k = 0; k < per_prompt; ++k) {
      const auto traj = model.sample(p, steps, seed + i * 1000 + static_cast<std::uint64_t>(k));
      const auto c = dominant_color(traj.image.template cast<double>());
      acc.correct += c && *c == prompts[i].color;
      ++acc.total;
    }
  }
  return acc;
}

}  // namespace bcosdiff
