#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bcosdiff/diffusion.hpp"
#include "support.hpp"

using namespace bcosdiff;
using namespace testing;

namespace {

const DiffusionSchedule& standard() {
  static const DiffusionSchedule s = make_schedule();
  return s;
}

Tensor<double> constant(Shape shape, double v) { return Tensor<double>::full(std::move(shape), v); }

}  // namespace

TEST_CASE("default schedule endpoints") {
  const auto& s = standard();
  CHECK(s.T() == 1000);
  CHECK(s.alpha(1) == doctest::Approx(0.99915).epsilon(1e-14));
  CHECK(s.alpha(1000) == doctest::Approx(0.988).epsilon(1e-14));
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1000) < 0.01);
  CHECK(s.reaches_noise());
  CHECK(s.mu() == 0.5);
  CHECK(s.sigma() == 0.5);
}

TEST_CASE("schedule values match an independent recomputation") {
  for (int T : {1, 2, 10, 1000}) {
    const auto s = make_schedule(T);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double beta = T == 1 ? 0.00085 : 0.00085 + (0.012 - 0.00085) * (t - 1) / double(T - 1);
      prod *= 1.0 - beta;
      CHECK(s.beta(t) == doctest::Approx(beta).epsilon(1e-14));
      CHECK(s.alpha(t) == doctest::Approx(1.0 - beta).epsilon(1e-14));
      CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-12));
      if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
  }
  const auto sq = make_schedule(10, 0.00085, 0.012, 0.5, 0.5, ScheduleShape::kScaledLinear);
  for (int t = 1; t <= 10; ++t) {
    const double r = std::sqrt(0.00085) + (std::sqrt(0.012) - std::sqrt(0.00085)) * (t - 1) / 9.0;
    CHECK(sq.beta(t) == doctest::Approx(r * r).epsilon(1e-14));
  }
  CHECK(parse_schedule_shape(schedule_shape_name(ScheduleShape::kScaledLinear)) == ScheduleShape::kScaledLinear);
  CHECK(parse_schedule_shape("linear") == ScheduleShape::kLinear);
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(make_schedule(0), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.02, 0.01), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.01), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.001, 1.0), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.001, 0.01, 0.5, 0.0), ConfigError);
  CHECK_THROWS_AS(parse_schedule_shape("cosine"), ConfigError);
  CHECK_THROWS_AS(standard().alpha_bar(1001), std::out_of_range);
  CHECK_THROWS_AS(standard().beta(0), std::out_of_range);
  CHECK_FALSE(make_schedule(10).reaches_noise());
}

TEST_CASE("iterated forward steps compose into the closed-form marginal") {
  const auto& s = standard();
  // Track x-coefficient, mu-coefficient and noise variance through q_step.
  double cx = 1.0, cmu = 0.0, var = 0.0;
  for (int t = 1; t <= 1000; ++t) {
    const auto step = q_step_coefficients(s, t);
    cx *= step.x;
    cmu = step.x * cmu + step.mu;
    var = step.x * step.x * var + step.noise_std * step.noise_std;
    const auto closed = q_sample_coefficients(s, t);
    CHECK(cx == doctest::Approx(closed.x).epsilon(1e-12));
    CHECK(cmu == doctest::Approx(closed.mu).epsilon(1e-12));
    CHECK(var == doctest::Approx(closed.noise_std * closed.noise_std).epsilon(1e-12));
    CHECK(closed.x + closed.mu == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("forward maps keep a constant-mu image fixed and reduce to identity where alpha is 1") {
  const auto& s = standard();
  const Tensor<double> mu = constant({2, 3}, 0.5), zero({2, 3});
  RngCursor rng(CounterRng(31));
  const Tensor<double> x = random_tensor(rng, {2, 3}), eps = random_tensor(rng, {2, 3});
  for (int t : {1, 2, 50, 500, 1000}) {
    CHECK(q_step(mu, t, s, zero).identical(mu));
    CHECK(max_abs_diff(q_sample(mu, t, s, zero).x_t, mu) < 1e-15);
    Tensor<double> expect = mu;
    expect.array() += 0.5 * std::sqrt(1.0 - s.alpha_bar(t)) * eps.array();
    CHECK(max_abs_diff(q_sample(mu, t, s, eps).x_t, expect) < 1e-15);
    CHECK(max_abs_diff(posterior_step(mu, mu, t, s, zero), mu) < 1e-15);
    if (t > 1) CHECK(max_abs_diff(ddim_step(mu, mu, t, t - 1, s), mu) < 1e-15);
  }
  CHECK(q_sample(x, 0, s, eps).x_t.identical(x));
  const DiffusionSchedule flat(3, 1e-300, 1e-300, 0.5, 0.5, ScheduleShape::kLinear);
  CHECK(max_abs_diff(q_step(x, 2, flat, eps), x) < 1e-15);
}

TEST_CASE("forward marginal at t = T: Monte-Carlo mean and variance") {
  const auto& s = standard();
  const int n = 100000;
  const CounterRng rng(32, 0);
  const Tensor<double> x0 = constant({1}, 0.9);
  double m = 0, m2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal(static_cast<std::uint64_t>(i));
    const double v = q_sample(x0, s.T(), s, constant({1}, z)).x_t[0];
    m += v;
    m2 += v * v;
  }
  m /= n;
  const double var = m2 / n - m * m;
  const double ab = s.alpha_bar(s.T());
  const double expect_mean = std::sqrt(ab) * 0.9 + (1 - std::sqrt(ab)) * 0.5;
  const double expect_var = 0.25 * (1 - ab);
  CHECK(std::abs(m - expect_mean) < 3 * std::sqrt(expect_var / n));
  CHECK(std::abs(var - expect_var) < 3 * expect_var * std::sqrt(2.0 / n));
}

TEST_CASE("target conversion inverts the reparameterization") {
  const auto& s = standard();
  RngCursor rng(CounterRng(33));
  for (int t : {1, 10, 300, 1000}) {
    const Tensor<double> x0 = random_tensor(rng, {3, 4}), eps = random_tensor(rng, {3, 4});
    const Tensor<double> x_t = q_sample(x0, t, s, eps).x_t;
    CHECK(max_abs_diff(convert_target(x_t, t, s, eps, TargetKind::kEpsToX0), x0) < 1e-12 / std::sqrt(s.alpha_bar(t)));
    CHECK(max_abs_diff(convert_target(x_t, t, s, x0, TargetKind::kX0ToEps), eps) < 1e-12 / std::sqrt(1 - s.alpha_bar(t)));
    const Tensor<double> e2 = convert_target(x_t, t, s, convert_target(x_t, t, s, eps, TargetKind::kEpsToX0), TargetKind::kX0ToEps);
    CHECK(max_abs_diff(e2, eps) < 1e-9);
    // Direct rearrangement, written out per element.
    const Tensor<double> any = random_tensor(rng, {3, 4}), xt = random_tensor(rng, {3, 4});
    const double a = std::sqrt(s.alpha_bar(t)), d = 0.5 * std::sqrt(1 - s.alpha_bar(t));
    const Tensor<double> to_x0 = convert_target(xt, t, s, any, TargetKind::kEpsToX0);
    const Tensor<double> to_eps = convert_target(xt, t, s, any, TargetKind::kX0ToEps);
    for (Index i = 0; i < any.size(); ++i) {
      CHECK(to_x0[i] == doctest::Approx((xt[i] - (1 - a) * 0.5 - d * any[i]) / a).epsilon(1e-12));
      CHECK(to_eps[i] == doctest::Approx((xt[i] - a * any[i] - (1 - a) * 0.5) / d).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(convert_target(constant({1}, 0.0), 0, s, constant({1}, 0.0), TargetKind::kX0ToEps), NumericError);
}

TEST_CASE("posterior coefficients") {
  const auto& s = standard();
  for (int t = 1; t <= 1000; ++t) {
    const auto c = posterior_coefficients(s, t);
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
    CHECK(c.x_t == doctest::Approx(std::sqrt(s.alpha(t)) * (1 - ab_prev) / (1 - ab)).epsilon(1e-12));
    CHECK(c.x0 == doctest::Approx(std::sqrt(ab_prev) * s.beta(t) / (1 - ab)).epsilon(1e-12));
    CHECK(c.x_t + c.x0 + c.mu == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(c.variance >= 0.0);
    CHECK(c.variance == doctest::Approx(s.beta(t) * (1 - ab_prev) * 0.25 / (1 - ab)).epsilon(1e-12));
  }
  CHECK(posterior_coefficients(s, 1).variance == 0.0);
}

TEST_CASE("posterior: Monte-Carlo linear-Gaussian conditioning") {
  const auto& s = standard();
  const int t = 200, n = 1000000;
  const double x0v = 0.8;
  const CounterRng r1(34, 1), r2(34, 2);
  const auto prev = q_sample_coefficients(s, t - 1);
  const auto step = q_step_coefficients(s, t);
  // Draw (x_{t-1}, x_t) jointly and regress x_{t-1} on x_t.
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    const double y = prev.x * x0v + prev.mu * 0.5 + prev.noise_std * r1.normal(static_cast<std::uint64_t>(i));
    const double x = step.x * y + step.mu * 0.5 + step.noise_std * r2.normal(static_cast<std::uint64_t>(i));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    syy += y * y;
  }
  const double mx = sx / n, my = sy / n;
  const double vx = sxx / n - mx * mx, cxy = sxy / n - mx * my, vy = syy / n - my * my;
  const double slope = cxy / vx;
  const double resid = vy - slope * cxy;
  const auto c = posterior_coefficients(s, t);
  CHECK(std::abs(slope - c.x_t) < 3 * std::sqrt(resid / (n * vx)));
  const double mean_at_mx = c.x_t * mx + c.x0 * x0v + c.mu * 0.5;
  CHECK(std::abs(my - mean_at_mx) < 3 * std::sqrt(resid / n));
  CHECK(std::abs(resid - c.variance) < 3 * c.variance * std::sqrt(2.0 / n));
}

TEST_CASE("DDIM step") {
  const auto& s = standard();
  RngCursor rng(CounterRng(35));
  const Tensor<double> x0 = random_tensor(rng, {2, 5}), eps = random_tensor(rng, {2, 5});
  for (int t : {1, 250, 1000}) {
    const Tensor<double> x_t = q_sample(x0, t, s, eps).x_t;
    CHECK(ddim_step(x_t, x0, t, 0, s).identical(x0));
    for (int t_prev : {0, t / 2, t - 1}) {
      if (t_prev >= t) continue;
      CHECK(max_abs_diff(ddim_step(x_t, x0, t, t_prev, s), q_sample(x0, t_prev, s, eps).x_t) < 1e-10);
    }
  }
  const Tensor<double> x_t = q_sample(x0, 500, s, eps).x_t;
  CHECK(ddim_step(x_t, x0, 500, 250, s).identical(ddim_step(x_t, x0, 500, 250, s)));
  CHECK_THROWS_AS(ddim_step(x_t, x0, 500, 500, s), std::out_of_range);
  CHECK_THROWS_AS(ddim_step(x_t, x0, 500, 250, s, 1.0), std::invalid_argument);
  // With eta = 1 the hop matches the ancestral posterior variance.
  const int t = 500;
  CHECK(ddim_sigma(s, t, t - 1, 1.0) * ddim_sigma(s, t, t - 1, 1.0) * 0.25 ==
        doctest::Approx(posterior_coefficients(s, t).variance).epsilon(1e-10));
  CHECK(ddim_sigma(s, t, t - 1, 0.0) == 0.0);
}

TEST_CASE("DDIM and eps->x0 tape primitives differentiate correctly") {
  const auto& s = standard();
  RngCursor rng(CounterRng(36));
  for (auto [t, tp] : {std::pair{1000, 750}, std::pair{250, 0}, std::pair{10, 9}}) {
    const int tt = t, ttp = tp;
    CHECK(gradient_error([&](auto&, auto& v) { return ddim(v[0], v[1], s, tt, ttp); },
                         {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}) < 1e-7);
    CHECK(gradient_error([&](auto&, auto& v) { return eps_to_x0(v[0], v[1], s, tt); },
                         {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}) < 1e-7);
  }
  Tape<double> tape;
  const Tensor<double> a = random_tensor(rng, {4}), b = random_tensor(rng, {4});
  CHECK(ddim(tape.leaf(a), tape.leaf(b), s, 600, 300).value().identical(ddim_step(a, b, 600, 300, s)));
}

TEST_CASE("DDIM timestep subsequences") {
  CHECK(ddim_timesteps(1000, 4) == std::vector<int>{1000, 750, 500, 250, 0});
  CHECK(ddim_timesteps(1000, 1) == std::vector<int>{1000, 0});
  CHECK(ddim_timesteps(10, 10) == std::vector<int>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0});
  const auto ts = ddim_timesteps(1000, 25);
  CHECK(ts.size() == 26);
  CHECK(ts.front() == 1000);
  for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  CHECK_THROWS(ddim_timesteps(1000, 0));
  CHECK_THROWS(ddim_timesteps(10, 11));
}

TEST_CASE("sample loop") {
  const auto& s = standard();
  const Shape shape{1, 6, 2, 2};
  // A toy denoiser: shrink towards a fixed image.
  const Tensor<double> target = constant(shape, 0.3);
  auto predict = [&](const Tensor<double>& x, int) {
    Tensor<double> r = target;
    r.array() += 0.1 * x.array().tanh();
    return r;
  };
  const auto one = sample_loop<double>(predict, s, shape, 1, 7);
  CHECK(one.timesteps == std::vector<int>{1000, 0});
  CHECK(one.states.front().identical(initial_noise<double>(s, shape, 7)));
  CHECK(one.states.back().identical(predict(one.states.front(), 1000)));
  CHECK(one.image.shape() == Shape{3, 2, 2});

  for (int steps : {4, 25}) {
    const auto a = sample_loop<double>(predict, s, shape, steps, 9);
    const auto b = sample_loop<double>(predict, s, shape, steps, 9);
    CHECK(a.states.size() == static_cast<std::size_t>(steps + 1));
    CHECK(a.predictions.size() == static_cast<std::size_t>(steps));
    CHECK(a.image.identical(b.image));
    CHECK(a.states.back().array().allFinite());
    CHECK_FALSE(a.image.identical(sample_loop<double>(predict, s, shape, steps, 10).image));
  }
  auto wrong = [](const Tensor<double>&, int) { return Tensor<double>({1, 6, 2, 3}); };
  CHECK_THROWS_AS(sample_loop<double>(wrong, s, shape, 2, 1), ShapeError);
}

TEST_CASE("initial noise: mean mu, std sigma") {
  const auto& s = standard();
  const Tensor<double> z = initial_noise<double>(s, {200000}, 3);
  const double m = z.array().mean();
  const double v = (z.array() - m).square().mean();
  CHECK(std::abs(m - 0.5) < 3 * 0.5 / std::sqrt(200000.0));
  CHECK(std::abs(v - 0.25) < 3 * 0.25 * std::sqrt(2.0 / 200000));
}
