#pragma once

// Every differentiable primitive paired with random inputs of random shape,
// for the central-difference oracle in support.hpp.

#include "bcosdiff/diffusion.hpp"
#include "support.hpp"

#include <string>

namespace testing {

struct GradientCase {
  std::string name;
  Builder f;
  std::vector<Tensor<double>> inputs;
};

inline std::vector<GradientCase> primitive_gradient_cases(RngCursor& rng) {
  using namespace bcosdiff;
  auto R = [&](Shape s) { return random_tensor(rng, std::move(s)); };
  auto D = [&](Index lo, Index hi) { return random_int(rng, lo, hi); };
  // Positive entries, for operands that act as norms.
  auto P = [&](Shape s) {
    Tensor<double> t = random_tensor(rng, std::move(s));
    t.array() = t.array().abs() + 0.5;
    return t;
  };
  auto mask_of = [&](Index rows, Index keys) {
    std::vector<char> m(static_cast<std::size_t>(rows * keys));
    for (Index r = 0; r < rows; ++r) {
      const Index keep = D(0, keys - 1);
      for (Index k = 0; k < keys; ++k) m[static_cast<std::size_t>(r * keys + k)] = k == keep || D(0, 1);
    }
    return m;
  };
  static const DiffusionSchedule schedule = make_schedule();

  std::vector<GradientCase> cases;
  const Index a = D(1, 3), b = D(1, 4), c = D(1, 4);
  cases.push_back({"add", [](auto&, auto& v) { return add(v[0], v[1]); }, {R({a, b}), R({a, b})}});
  cases.push_back({"sub", [](auto&, auto& v) { return sub(v[0], v[1]); }, {R({a, b}), R({a, b})}});
  cases.push_back({"mul", [](auto&, auto& v) { return mul(v[0], v[1]); }, {R({a, b}), R({a, b})}});
  cases.push_back({"affine", [](auto&, auto& v) { return affine(v[0], 1.7, -0.3); }, {R({b, c})}});
  cases.push_back({"sum", [](auto&, auto& v) { return sum(v[0]); }, {R({a, c})}});
  cases.push_back({"mse", [](auto&, auto& v) { return mse(v[0], v[1]); }, {R({a, c}), R({a, c})}});
  for (double p : {0.0, 0.5, 1.0, 2.0, 3.0}) {
    Tensor<double> x = R({D(2, 8)});
    for (Index i = 0; i < x.size(); ++i) x[i] += x[i] > 0 ? 0.2 : -0.2;  // away from the kink at 0
    cases.push_back({"abs_pow " + std::to_string(p), [p](auto&, auto& v) { return abs_pow(v[0], p); }, {x}});
  }

  cases.push_back({"reshape", [=](auto&, auto& v) { return reshape(v[0], {b, a}); }, {R({a, b})}});
  cases.push_back({"transpose", [](auto&, auto& v) { return transpose(v[0]); }, {R({a, b, c})}});
  {
    const Index h = D(1, 3), w = D(1, 3);
    cases.push_back({"concat_channels", [](auto&, auto& v) { return concat_channels<double>({v[0], v[1]}); },
                     {R({a, D(1, 3), h, w}), R({a, D(1, 3), h, w})}});
  }
  cases.push_back({"concat_last", [](auto&, auto& v) { return concat_last<double>({v[0], v[1]}); },
                   {R({a, b, D(1, 3)}), R({a, b, D(1, 3)})}});
  {
    const Index len = D(2, 5), begin = D(0, len - 1), n = D(1, len - begin);
    cases.push_back({"slice_last", [=](auto&, auto& v) { return slice_last(v[0], begin, n); }, {R({a, b, len})}});
  }
  {
    const Index h = D(1, 3), w = D(1, 3);
    cases.push_back({"broadcast_spatial", [=](auto&, auto& v) { return broadcast_spatial(v[0], h, w); }, {R({a, b})}});
  }
  cases.push_back({"upsample_nearest2x", [](auto&, auto& v) { return upsample_nearest2x(v[0]); }, {R({a, D(1, 2), D(1, 3), D(1, 3)})}});

  {
    const Index m = D(1, 4), k = D(1, 4), n = D(1, 4), q = D(1, 3);
    cases.push_back({"matmul", [](auto&, auto& v) { return matmul(v[0], v[1]); }, {R({m, k}), R({k, n})}});
    cases.push_back({"matmul batched-shared", [](auto&, auto& v) { return matmul(v[0], v[1]); }, {R({q, m, k}), R({k, n})}});
    cases.push_back({"matmul batched", [](auto&, auto& v) { return matmul(v[0], v[1]); }, {R({q, m, k}), R({q, k, n})}});
  }
  {
    const Index n = D(1, 2), ci = D(1, 3), co = D(1, 3), h = D(3, 5), w = D(3, 5), k = 2 * D(0, 1) + 1, st = D(1, 2);
    const Conv2dParams p = Conv2dParams::same(k, st);
    cases.push_back({"conv2d", [=](auto&, auto& v) { return conv2d(v[0], v[1], p); }, {R({n, ci, h, w}), R({co, ci, k, k})}});
    cases.push_back({"patch_norm", [=](auto&, auto& v) { return patch_norm(v[0], k, k, p); }, {R({n, ci, h, w})}});
  }
  cases.push_back({"row_norm", [](auto&, auto& v) { return row_norm(v[0]); }, {R({D(1, 4), D(2, 4)})}});
  cases.push_back({"normalize_rows", [](auto&, auto& v) { return normalize_rows(v[0]); }, {R({D(1, 3), D(1, 3), D(2, 3)})}});
  {
    const Index n = D(1, 3), l = D(1, 3), w = D(2, 4);
    cases.push_back({"cosine", [](auto&, auto& v) { return cosine(v[0], v[1]); }, {R({n, l, w}), P({n, 1, w})}});
  }

  cases.push_back({"rms_inv", [](auto&, auto& v) { return rms_inv(v[0], 1e-6); }, {R({a, D(2, 6)})}});
  cases.push_back({"scale_samples", [](auto&, auto& v) { return scale_samples(v[0], v[1]); }, {R({a, b}), R({a})}});
  {
    const Index n = D(1, 2), q = D(1, 3), keys = D(1, 4);
    const auto m = mask_of(n, keys);
    cases.push_back({"masked_softmax", [=](auto&, auto& v) { return masked_softmax(v[0], m); }, {R({n, q, keys})}});
  }
  {
    const Index vocab = D(2, 5), len = D(1, 4), batch = D(1, 2), dim = D(1, 3);
    std::vector<int> ids;
    for (Index i = 0; i < batch * len; ++i) ids.push_back(static_cast<int>(D(0, vocab - 1)));
    const auto m = mask_of(batch, len);
    cases.push_back({"embed", [=](auto&, auto& v) { return embed(v[0], v[1], ids, m, batch); }, {R({vocab, dim}), R({len, dim})}});
  }
  {
    const int t = static_cast<int>(D(1, 1000)), tp = static_cast<int>(D(0, t - 1));
    cases.push_back({"ddim", [=](auto&, auto& v) { return ddim(v[0], v[1], schedule, t, tp); }, {R({a, b}), R({a, b})}});
    cases.push_back({"eps_to_x0", [=](auto&, auto& v) { return eps_to_x0(v[0], v[1], schedule, t); }, {R({a, b}), R({a, b})}});
  }
  return cases;
}

}  // namespace testing
