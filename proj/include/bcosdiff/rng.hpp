#pragma once

#include "bcosdiff/tensor.hpp"

#include <cstdint>

namespace bcosdiff {

/// Stateless counter-based generator. Every draw is a pure function of
/// (seed, stream, counter), so any element of any noise tensor can be
/// reproduced without replaying earlier draws.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t bits(std::uint64_t counter) const;
  /// Uniform in (0, 1].
  double uniform(std::uint64_t counter) const;
  /// Standard normal (Box-Muller over counters 2c and 2c+1).
  double normal(std::uint64_t counter) const;
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t counter, std::uint64_t n) const;

  CounterRng substream(std::uint64_t tag) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t seed_, stream_, key_;
};

/// Sequential cursor over a CounterRng.
class RngCursor {
 public:
  explicit RngCursor(CounterRng rng) : rng_(rng) {}
  double uniform() { return rng_.uniform(next_++); }
  double normal() { return rng_.normal(next_++); }
  std::uint64_t below(std::uint64_t n) { return rng_.below(next_++, n); }

 private:
  CounterRng rng_;
  std::uint64_t next_ = 0;
};

template <typename S>
Tensor<S> normal_tensor(const CounterRng& rng, Shape shape) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.normal(static_cast<std::uint64_t>(i)));
  return t;
}

}  // namespace bcosdiff
