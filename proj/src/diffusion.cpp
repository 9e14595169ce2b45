#include "bcosdiff/diffusion.hpp"

namespace bcosdiff {

DiffusionSchedule::DiffusionSchedule(int steps, double beta_start, double beta_end, double mu, double sigma,
                                     ScheduleShape shape)
    : steps_(steps), beta_start_(beta_start), beta_end_(beta_end), mu_(mu), sigma_(sigma), shape_(shape) {
  if (steps < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  if (!(sigma > 0)) throw ConfigError("schedule: sigma must be positive");
  beta_.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  alpha_.assign(beta_.size(), 1.0);
  alpha_bar_.assign(beta_.size(), 1.0);
  for (int t = 1; t <= steps; ++t) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    double b;
    if (shape == ScheduleShape::kLinear) {
      b = beta_start + (beta_end - beta_start) * f;
    } else {
      const double r = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * f;
      b = r * r;
    }
    beta_[t] = b;
    alpha_[t] = 1.0 - b;
    alpha_bar_[t] = alpha_bar_[t - 1] * alpha_[t];
  }
}

DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end, double mu, double sigma, ScheduleShape shape) {
  return DiffusionSchedule(steps, beta_start, beta_end, mu, sigma, shape);
}

ScheduleShape parse_schedule_shape(const std::string& name) {
  if (name == "linear") return ScheduleShape::kLinear;
  if (name == "scaled-linear") return ScheduleShape::kScaledLinear;
  throw ConfigError("unknown schedule shape '" + name + "' (expected linear or scaled-linear)");
}

const char* schedule_shape_name(ScheduleShape shape) {
  return shape == ScheduleShape::kLinear ? "linear" : "scaled-linear";
}

MarginalCoefficients q_step_coefficients(const DiffusionSchedule& s, int t) {
  const double a = std::sqrt(s.alpha(t));
  return {a, 1.0 - a, s.sigma() * std::sqrt(1.0 - s.alpha(t))};
}

MarginalCoefficients q_sample_coefficients(const DiffusionSchedule& s, int t) {
  const double a = std::sqrt(s.alpha_bar(t));
  return {a, 1.0 - a, s.sigma() * std::sqrt(1.0 - s.alpha_bar(t))};
}

PosteriorCoefficients posterior_coefficients(const DiffusionSchedule& s, int t) {
  if (t < 1) throw std::out_of_range("posterior_step: t must be >= 1");
  const double ab_t = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
  PosteriorCoefficients c{};
  c.x_t = std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab_t);
  c.x0 = std::sqrt(ab_prev) * s.beta(t) / (1.0 - ab_t);
  c.mu = 1.0 - (c.x_t + c.x0);
  c.variance = s.beta(t) * (1.0 - ab_prev) * s.sigma() * s.sigma() / (1.0 - ab_t);
  return c;
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw ConfigError("sampling steps must lie in [1, T]");
  std::vector<int> ts;
  for (int k = steps; k >= 1; --k) ts.push_back(static_cast<int>(static_cast<long long>(T) * k / steps));
  ts.push_back(0);
  return ts;
}

double ddim_sigma(const DiffusionSchedule& s, int t, int t_prev, double eta) {
  if (eta == 0) return 0;
  const double ab_t = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
}

}  // namespace bcosdiff
