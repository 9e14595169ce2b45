#include "bcosdiff/train.hpp"

#include <charconv>
#include <set>

namespace bcosdiff {

namespace {

std::string fmt(double x) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_num(const std::string& key, const std::string& v) {
  T x{};
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("train config: bad value '" + v + "' for " + key);
  return x;
}

}  // namespace

std::map<std::string, std::string> TrainConfig::entries() const {
  return {{"steps", std::to_string(steps)},      {"batch", std::to_string(batch)},
          {"lr", fmt(lr)},                       {"lr_final", fmt(lr_final)},
          {"beta1", fmt(beta1)},                 {"beta2", fmt(beta2)},
          {"adam_eps", fmt(adam_eps)},           {"weight_decay", fmt(weight_decay)},
          {"grad_clip", fmt(grad_clip)},         {"flip", flip ? "true" : "false"},
          {"seed", std::to_string(seed)}};
}

void TrainConfig::set(const std::string& key, const std::string& v) {
  if (key == "steps") steps = parse_num<int>(key, v);
  else if (key == "batch") batch = parse_num<int>(key, v);
  else if (key == "lr") lr = parse_num<double>(key, v);
  else if (key == "lr_final") lr_final = parse_num<double>(key, v);
  else if (key == "beta1") beta1 = parse_num<double>(key, v);
  else if (key == "beta2") beta2 = parse_num<double>(key, v);
  else if (key == "adam_eps") adam_eps = parse_num<double>(key, v);
  else if (key == "weight_decay") weight_decay = parse_num<double>(key, v);
  else if (key == "grad_clip") grad_clip = parse_num<double>(key, v);
  else if (key == "flip") flip = v == "true" || v == "1";
  else if (key == "seed") seed = parse_num<std::uint64_t>(key, v);
  else throw ConfigError("train config: unknown key '" + key + "'");
}

StepDraw draw_step(std::uint64_t seed, int step, int batch, std::size_t dataset_size, int T, bool flip) {
  const CounterRng rng = CounterRng(seed, 0x5a3).substream(static_cast<std::uint64_t>(step));
  StepDraw d;
  for (int b = 0; b < batch; ++b) {
    const auto base = static_cast<std::uint64_t>(b) * 3;
    d.examples.push_back(static_cast<std::size_t>(rng.below(base, dataset_size)));
    d.timesteps.push_back(1 + static_cast<int>(rng.below(base + 1, static_cast<std::uint64_t>(T))));
    d.flips.push_back(flip && rng.below(base + 2, 2) == 1);
  }
  return d;
}

std::optional<ColorKind> dominant_color(const Tensor<double>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("dominant_color: expected [3,H,W]");
  const Index plane = img.dim(1) * img.dim(2);
  std::array<std::array<double, 3>, kColors.size()> sums{};
  std::array<std::size_t, kColors.size()> counts{};
  for (Index i = 0; i < plane; ++i) {
    const double px[3] = {img[i], img[plane + i], img[2 * plane + i]};
    double bg = 0;
    for (double v : px) bg += (v - kBackgroundLevel) * (v - kBackgroundLevel);
    if (bg < 0.25 * 0.25) continue;
    std::size_t best = 0;
    double best_d = 1e30;
    for (std::size_t c = 0; c < kColors.size(); ++c) {
      const auto rgb = color_rgb(kColors[c]);
      double d = 0;
      for (int k = 0; k < 3; ++k) d += (px[k] - rgb[k]) * (px[k] - rgb[k]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    ++counts[best];
    for (int k = 0; k < 3; ++k) sums[best][k] += px[k];
  }
  std::size_t top = 0;
  for (std::size_t c = 1; c < kColors.size(); ++c) {
    if (counts[c] > counts[top]) top = c;
  }
  if (counts[top] == 0) return std::nullopt;
  std::size_t best = 0;
  double best_d = 1e30;
  for (std::size_t c = 0; c < kColors.size(); ++c) {
    const auto rgb = color_rgb(kColors[c]);
    double d = 0;
    for (int k = 0; k < 3; ++k) {
      const double mean = sums[top][k] / static_cast<double>(counts[top]);
      d += (mean - rgb[k]) * (mean - rgb[k]);
    }
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return kColors[best];
}

std::vector<ColorPrompt> color_eval_prompts() {
  std::vector<ColorPrompt> out;
  std::set<std::string> seen;
  for (const auto& ex : build_dataset(Split::kEval)) {
    if (seen.insert(ex.caption).second) out.push_back({ex.caption, ex.spec.color});
  }
  return out;
}

}  // namespace bcosdiff
