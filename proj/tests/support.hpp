#pragma once

// Shared helpers for the unit tests: hand-rolled random generators and a
// central-difference gradient oracle.

#include "bcosdiff/ops.hpp"
#include "bcosdiff/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace testing {

using bcosdiff::CounterRng;
using bcosdiff::Index;
using bcosdiff::RngCursor;
using bcosdiff::Shape;
using bcosdiff::Tape;
using bcosdiff::Tensor;
using bcosdiff::Var;

inline Tensor<double> random_tensor(RngCursor& rng, Shape shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

// Uniform integer in [lo, hi].
inline Index random_int(RngCursor& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  return (a.array() - b.array()).abs().maxCoeff();
}

using Builder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Largest relative disagreement between the tape's vector-Jacobian product and
// central differences of <r, f(x)> for a random cotangent r.
inline double gradient_error(const Builder& f, std::vector<Tensor<double>> inputs, std::uint64_t seed = 1,
                             double h = 1e-6) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, Tape<double>& tape) {
    std::vector<Var<double>> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x, true));
    return std::make_pair(f(tape, leaves), leaves);
  };
  Tape<double> tape;
  auto [out, leaves] = evaluate(inputs, tape);
  RngCursor rng(CounterRng(seed, 0x7e57));
  const Tensor<double> r = random_tensor(rng, out.shape());
  const auto grads = tape.vjp(out, r);

  auto objective = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> t;
    const auto o = evaluate(xs, t).first;
    return (o.value().array() * r.array()).sum();
  };
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Index j = 0; j < inputs[i].size(); ++j) {
      auto plus = inputs, minus = inputs;
      plus[i][j] += h;
      minus[i][j] -= h;
      const double numeric = (objective(plus) - objective(minus)) / (2 * h);
      const double analytic = grads[leaves[i]][j];
      const double err = std::abs(numeric - analytic) / std::max(1.0, std::abs(numeric) + std::abs(analytic));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace testing
