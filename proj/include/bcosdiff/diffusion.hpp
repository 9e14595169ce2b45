#pragma once

#include "bcosdiff/bcos.hpp"
#include "bcosdiff/ops.hpp"
#include "bcosdiff/rng.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace bcosdiff {

enum class ScheduleShape { kLinear, kScaledLinear };

/// Noise schedule of the shifted-mean diffusion process: the terminal
/// distribution is approximately N(mu, sigma^2 I). Index 0 is the clean state
/// (alpha_bar(0) = 1).
class DiffusionSchedule {
 public:
  DiffusionSchedule() = default;
  DiffusionSchedule(int steps, double beta_start, double beta_end, double mu, double sigma, ScheduleShape shape);

  int T() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  double mu() const { return mu_; }
  double sigma() const { return sigma_; }
  ScheduleShape shape() const { return shape_; }

  double beta(int t) const { return beta_.at(check(t, 1)); }
  double alpha(int t) const { return alpha_.at(check(t, 1)); }
  double alpha_bar(int t) const { return alpha_bar_.at(check(t, 0)); }

  /// Whether the terminal marginal is close to pure noise (alpha_bar_T < 0.01).
  bool reaches_noise() const { return alpha_bar_.back() < 0.01; }

 private:
  std::size_t check(int t, int lo) const {
    if (t < lo || t > steps_) {
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(steps_) + "]");
    }
    return static_cast<std::size_t>(t);
  }

  int steps_ = 0;
  double beta_start_ = 0, beta_end_ = 0, mu_ = 0, sigma_ = 1;
  ScheduleShape shape_ = ScheduleShape::kLinear;
  std::vector<double> beta_, alpha_, alpha_bar_;
};

DiffusionSchedule make_schedule(int steps = 1000, double beta_start = 0.00085, double beta_end = 0.012, double mu = 0.5,
                                double sigma = 0.5, ScheduleShape shape = ScheduleShape::kLinear);

ScheduleShape parse_schedule_shape(const std::string& name);
const char* schedule_shape_name(ScheduleShape shape);

/// out = input * x + mu * mu_coef + noise * noise_std.
struct MarginalCoefficients {
  double x, mu, noise_std;
};

/// Coefficients of q(x_t | x_{t-1}).
MarginalCoefficients q_step_coefficients(const DiffusionSchedule& s, int t);
/// Coefficients of q(x_t | x_0).
MarginalCoefficients q_sample_coefficients(const DiffusionSchedule& s, int t);

/// Mean coefficients and variance of q(x_{t-1} | x_t, x_0).
struct PosteriorCoefficients {
  double x_t, x0, mu, variance;
};
PosteriorCoefficients posterior_coefficients(const DiffusionSchedule& s, int t);

/// Evenly spaced timesteps T = t_K > ... > t_1, followed by the final hop to 0.
std::vector<int> ddim_timesteps(int T, int steps);

/// DDIM noise scale sigma_t for a hop t -> t_prev (without the global sigma).
double ddim_sigma(const DiffusionSchedule& s, int t, int t_prev, double eta);

enum class TargetKind { kX0ToEps, kEpsToX0 };

template <typename S>
struct NoisyState {
  Tensor<S> x_t;
  int t = 0;
};

namespace detail {

// a*x + (1-a)*mu + c*noise, evaluated in S so a constant-mu input is a fixed
// point whenever (1-a) is exact.
template <typename S>
Tensor<S> mean_mix(const Tensor<S>& x, double a, double mu, double c, const Tensor<S>* noise) {
  const S as = static_cast<S>(a);
  Tensor<S> out(x.shape(), as * x.array() + (S(1) - as) * static_cast<S>(mu));
  if (noise) {
    require_same_shape(noise->shape(), x.shape(), "noise");
    out.array() += static_cast<S>(c) * noise->array();
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> q_step(const Tensor<S>& x_prev, int t, const DiffusionSchedule& s, const Tensor<S>& noise) {
  const auto c = q_step_coefficients(s, t);
  return detail::mean_mix(x_prev, c.x, s.mu(), c.noise_std, &noise);
}

template <typename S>
NoisyState<S> q_sample(const Tensor<S>& x0, int t, const DiffusionSchedule& s, const Tensor<S>& noise) {
  const auto c = q_sample_coefficients(s, t);
  return {detail::mean_mix(x0, c.x, s.mu(), c.noise_std, &noise), t};
}

/// Solves x_t = sqrt(ab) x0 + (1 - sqrt(ab)) mu + sigma sqrt(1 - ab) eps for
/// the unknown named by `kind`, given the other.
template <typename S>
Tensor<S> convert_target(const Tensor<S>& x_t, int t, const DiffusionSchedule& s, const Tensor<S>& value, TargetKind kind) {
  require_same_shape(x_t.shape(), value.shape(), "convert_target");
  const S a = static_cast<S>(std::sqrt(s.alpha_bar(t)));
  const S mu = static_cast<S>(s.mu());
  const S d = static_cast<S>(s.sigma() * std::sqrt(1.0 - s.alpha_bar(t)));
  if (kind == TargetKind::kX0ToEps) {
    if (!(d > S(0))) throw NumericError("convert_target: noise coefficient vanishes at t = " + std::to_string(t));
    return Tensor<S>(x_t.shape(), (x_t.array() - a * value.array() - (S(1) - a) * mu) / d);
  }
  if (!(a > S(0))) throw NumericError("convert_target: signal coefficient vanishes at t = " + std::to_string(t));
  return Tensor<S>(x_t.shape(), (x_t.array() - (S(1) - a) * mu - d * value.array()) / a);
}

/// Ancestral sample from q(x_{t-1} | x_t, x0_hat).
template <typename S>
Tensor<S> posterior_step(const Tensor<S>& x_t, const Tensor<S>& x0_hat, int t, const DiffusionSchedule& s,
                         const Tensor<S>& noise) {
  require_same_shape(x_t.shape(), x0_hat.shape(), "posterior_step");
  require_same_shape(x_t.shape(), noise.shape(), "posterior_step noise");
  const auto c = posterior_coefficients(s, t);
  return Tensor<S>(x_t.shape(), static_cast<S>(c.x_t) * x_t.array() + static_cast<S>(c.x0) * x0_hat.array() +
                                    static_cast<S>(c.mu * s.mu()) + static_cast<S>(std::sqrt(c.variance)) * noise.array());
}

/// Generalized DDIM update t -> t_prev. With eta = 0 the update is
/// deterministic; otherwise `noise` must be supplied.
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& x_t, const Tensor<S>& x0_hat, int t, int t_prev, const DiffusionSchedule& s,
                    double eta = 0.0, const Tensor<S>* noise = nullptr) {
  if (t_prev >= t || t_prev < 0) throw std::out_of_range("ddim_step: t_prev must lie in [0, t)");
  const Tensor<S> eps = convert_target(x_t, t, s, x0_hat, TargetKind::kX0ToEps);
  const double ab_prev = s.alpha_bar(t_prev);
  const double sig_t = ddim_sigma(s, t, t_prev, eta);
  const double rest = 1.0 - ab_prev - sig_t * sig_t;
  if (rest < 0) throw NumericError("ddim_step: sigma_t^2 exceeds 1 - alpha_bar(t_prev)");
  const S a = static_cast<S>(std::sqrt(ab_prev));
  const S mu = static_cast<S>(s.mu());
  Tensor<S> out(x_t.shape(), a * x0_hat.array() + (S(1) - a) * mu + static_cast<S>(s.sigma() * std::sqrt(rest)) * eps.array());
  if (eta > 0) {
    if (!noise) throw std::invalid_argument("ddim_step: eta > 0 requires a noise tensor");
    require_same_shape(noise->shape(), x_t.shape(), "ddim_step noise");
    out.array() += static_cast<S>(s.sigma() * sig_t) * noise->array();
  }
  return out;
}

/// Tape primitive for the deterministic DDIM hop; forward defers to ddim_step
/// so recorded and plain sampling agree bit for bit.
template <typename S>
class DdimOp final : public Op<S> {
 public:
  DdimOp(const DiffusionSchedule& s, int t, int t_prev) : s_(s), t_(t), t_prev_(t_prev) {
    const double ab_t = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
    const double c_eps = s.sigma() * std::sqrt(1.0 - ab_prev);
    const double d = s.sigma() * std::sqrt(1.0 - ab_t);
    d_xt_ = static_cast<S>(c_eps / d);
    d_x0_ = static_cast<S>(std::sqrt(ab_prev) - c_eps * std::sqrt(ab_t) / d);
  }
  const char* name() const override { return "ddim"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override { return ddim_step(*in[0], *in[1], t_, t_prev_, s_); }
  void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (gin[0]) gin[0]->array() += d_xt_ * g.array();
    if (gin[1]) gin[1]->array() += d_x0_ * g.array();
  }

 private:
  DiffusionSchedule s_;
  int t_, t_prev_;
  S d_xt_, d_x0_;
};

/// Tape primitive for eps -> x0 conversion.
template <typename S>
class EpsToX0Op final : public Op<S> {
 public:
  EpsToX0Op(const DiffusionSchedule& s, int t) : s_(s), t_(t) {
    const double a = std::sqrt(s.alpha_bar(t));
    d_xt_ = static_cast<S>(1.0 / a);
    d_eps_ = static_cast<S>(-s.sigma() * std::sqrt(1.0 - s.alpha_bar(t)) / a);
  }
  const char* name() const override { return "eps_to_x0"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    return convert_target(*in[0], t_, s_, *in[1], TargetKind::kEpsToX0);
  }
  void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (gin[0]) gin[0]->array() += d_xt_ * g.array();
    if (gin[1]) gin[1]->array() += d_eps_ * g.array();
  }

 private:
  DiffusionSchedule s_;
  int t_;
  S d_xt_, d_eps_;
};

template <typename S>
Var<S> ddim(const Var<S>& x_t, const Var<S>& x0_hat, const DiffusionSchedule& s, int t, int t_prev) {
  return make_op<S, DdimOp<S>>({x_t, x0_hat}, s, t, t_prev);
}

template <typename S>
Var<S> eps_to_x0(const Var<S>& x_t, const Var<S>& eps, const DiffusionSchedule& s, int t) {
  return make_op<S, EpsToX0Op<S>>({x_t, eps}, s, t);
}

/// Streams of the counter-based generator used by sampling.
inline constexpr std::uint64_t kInitialNoiseStream = 0x11;
inline constexpr std::uint64_t kStepNoiseStream = 0x12;

/// x_T ~ N(mu, sigma^2 I), keyed by (seed, element index).
template <typename S>
Tensor<S> initial_noise(const DiffusionSchedule& s, const Shape& shape, std::uint64_t seed) {
  Tensor<S> z = normal_tensor<S>(CounterRng(seed, kInitialNoiseStream), shape);
  z.array() = static_cast<S>(s.mu()) + static_cast<S>(s.sigma()) * z.array();
  return z;
}

template <typename S>
struct Trajectory {
  std::vector<int> timesteps;          // t_K, ..., 0
  std::vector<Tensor<S>> states;       // x_{t_K}, ..., x_0
  std::vector<Tensor<S>> predictions;  // x0 predictions, one per model call
  Tensor<S> image;                     // decoded final state [3,H,W]
};

/// Runs the DDIM sampler. `predict_x0(x_t, t)` returns the model's clean
/// estimate with the shape of x_t; `shape` is the state shape, whose last
/// three axes are [6,H,W].
template <typename S, typename Denoiser>
Trajectory<S> sample_loop(const Denoiser& predict_x0, const DiffusionSchedule& s, const Shape& shape, int steps,
                          std::uint64_t seed, double eta = 0.0) {
  if (steps < 1) throw ConfigError("sample_loop: steps must be >= 1");
  Trajectory<S> traj;
  traj.timesteps = ddim_timesteps(s.T(), steps);
  traj.states.push_back(initial_noise<S>(s, shape, seed));
  const CounterRng step_rng(seed, kStepNoiseStream);
  for (std::size_t k = 0; k + 1 < traj.timesteps.size(); ++k) {
    const int t = traj.timesteps[k], t_prev = traj.timesteps[k + 1];
    const Tensor<S>& x_t = traj.states.back();
    Tensor<S> x0 = predict_x0(x_t, t);
    if (!x0.same_shape(x_t)) {
      throw ShapeError("sample_loop: model output " + to_string(x0.shape()) + " does not match state " + to_string(x_t.shape()));
    }
    Tensor<S> next;
    if (eta > 0) {
      const Tensor<S> z = normal_tensor<S>(step_rng.substream(static_cast<std::uint64_t>(k)), shape);
      next = ddim_step(x_t, x0, t, t_prev, s, eta, &z);
    } else {
      next = ddim_step(x_t, x0, t, t_prev, s);
    }
    traj.predictions.push_back(std::move(x0));
    traj.states.push_back(std::move(next));
  }
  const Tensor<S>& last = traj.states.back();
  traj.image = decode_image(last.reshaped({6, last.dim(-2), last.dim(-1)}));
  return traj;
}

}  // namespace bcosdiff
