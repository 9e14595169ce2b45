#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "primitive_cases.hpp"
#include "support.hpp"

using namespace bcosdiff;
using namespace testing;

namespace {

// Oracles written as plain loops over indices.

Tensor<double> loop_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const bool batched = b.rank() == 3;
  const Index batch = a.rank() == 3 ? a.dim(0) : 1;
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  Shape shape = a.shape();
  shape.back() = n;
  Tensor<double> r(shape);
  for (Index q = 0; q < batch; ++q)
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) {
        double s = 0;
        for (Index l = 0; l < k; ++l) s += a[(q * m + i) * k + l] * b[(batched ? q * k * n : 0) + l * n + j];
        r[(q * m + i) * n + j] = s;
      }
  return r;
}

double padded(const Tensor<double>& x, Index nb, Index c, Index y, Index xx) {
  if (y < 0 || xx < 0 || y >= x.dim(2) || xx >= x.dim(3)) return 0.0;
  return x.at(nb, c, y, xx);
}

Tensor<double> loop_conv(const Tensor<double>& x, const Tensor<double>& k, Conv2dParams p) {
  const Index oh = (x.dim(2) + 2 * p.pad_h - k.dim(2)) / p.stride_h + 1;
  const Index ow = (x.dim(3) + 2 * p.pad_w - k.dim(3)) / p.stride_w + 1;
  Tensor<double> r({x.dim(0), k.dim(0), oh, ow});
  for (Index n = 0; n < x.dim(0); ++n)
    for (Index f = 0; f < k.dim(0); ++f)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double s = 0;
          for (Index c = 0; c < x.dim(1); ++c)
            for (Index u = 0; u < k.dim(2); ++u)
              for (Index v = 0; v < k.dim(3); ++v)
                s += k.at(f, c, u, v) * padded(x, n, c, i * p.stride_h - p.pad_h + u, j * p.stride_w - p.pad_w + v);
          r.at(n, f, i, j) = s;
        }
  return r;
}

Tensor<double> loop_patch_norm(const Tensor<double>& x, Index kh, Index kw, Conv2dParams p) {
  const Index oh = (x.dim(2) + 2 * p.pad_h - kh) / p.stride_h + 1;
  const Index ow = (x.dim(3) + 2 * p.pad_w - kw) / p.stride_w + 1;
  Tensor<double> r({x.dim(0), 1, oh, ow});
  for (Index n = 0; n < x.dim(0); ++n)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j) {
        double s = 0;
        for (Index c = 0; c < x.dim(1); ++c)
          for (Index u = 0; u < kh; ++u)
            for (Index v = 0; v < kw; ++v) {
              const double e = padded(x, n, c, i * p.stride_h - p.pad_h + u, j * p.stride_w - p.pad_w + v);
              s += e * e;
            }
        r.at(n, 0, i, j) = std::sqrt(s);
      }
  return r;
}

Tensor<double> eval1(const std::function<Var<double>(Tape<double>&, Var<double>)>& f, const Tensor<double>& x) {
  Tape<double> t;
  return f(t, t.leaf(x)).value();
}

}  // namespace

TEST_CASE("matmul agrees with a triple loop in all three layouts") {
  RngCursor rng(CounterRng(3));
  for (int trial = 0; trial < 20; ++trial) {
    const Index b = random_int(rng, 1, 3), m = random_int(rng, 1, 5), k = random_int(rng, 1, 6), n = random_int(rng, 1, 4);
    const Tensor<double> a2 = random_tensor(rng, {m, k}), a3 = random_tensor(rng, {b, m, k});
    const Tensor<double> r2 = random_tensor(rng, {k, n}), r3 = random_tensor(rng, {b, k, n});
    Tape<double> t;
    CHECK(max_abs_diff(matmul(t.leaf(a2), t.leaf(r2)).value(), loop_matmul(a2, r2)) < 1e-12);
    CHECK(max_abs_diff(matmul(t.leaf(a3), t.leaf(r2)).value(), loop_matmul(a3, r2)) < 1e-12);
    CHECK(max_abs_diff(matmul(t.leaf(a3), t.leaf(r3)).value(), loop_matmul(a3, r3)) < 1e-12);
  }
}

TEST_CASE("conv2d and patch norms agree with nested sums over random geometries") {
  RngCursor rng(CounterRng(4));
  for (int trial = 0; trial < 25; ++trial) {
    const Index n = random_int(rng, 1, 2), c = random_int(rng, 1, 3), f = random_int(rng, 1, 3);
    const Index kk = random_int(rng, 1, 3), h = random_int(rng, kk, 7), w = random_int(rng, kk, 7);
    const Conv2dParams p{random_int(rng, 1, 2), random_int(rng, 1, 2), random_int(rng, 0, 1), random_int(rng, 0, 1)};
    const Tensor<double> x = random_tensor(rng, {n, c, h, w}), k = random_tensor(rng, {f, c, kk, kk});
    Tape<double> t;
    CHECK(max_abs_diff(conv2d(t.leaf(x), t.leaf(k), p).value(), loop_conv(x, k, p)) < 1e-12);
    CHECK(max_abs_diff(patch_norm(t.leaf(x), kk, kk, p).value(), loop_patch_norm(x, kk, kk, p)) < 1e-12);
  }
}

TEST_CASE("shape errors are reported") {
  Tape<double> t;
  auto a = t.leaf(Tensor<double>({2, 3})), b = t.leaf(Tensor<double>({2, 3}));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(conv2d(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, t.leaf(Tensor<double>({3, 2}))), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4}), ShapeError);
  CHECK_THROWS_AS(abs_pow(a, -1.0), ConfigError);
  CHECK_THROWS_AS(Tensor<double>({0, 2}), ShapeError);
}

TEST_CASE("every primitive's gradient matches central differences") {
  RngCursor rng(CounterRng(5));
  auto R = [&](Shape s) { return random_tensor(rng, std::move(s)); };
  const double tol = 1e-6;

  SUBCASE("elementwise") {
    CHECK(gradient_error([](auto&, auto& v) { return add(v[0], v[1]); }, {R({2, 3}), R({2, 3})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return sub(v[0], v[1]); }, {R({2, 3}), R({2, 3})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return mul(v[0], v[1]); }, {R({2, 3}), R({2, 3})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return affine(v[0], 1.7, -0.3); }, {R({4})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return sum(v[0]); }, {R({3, 2})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return mse(v[0], v[1]); }, {R({3, 2}), R({3, 2})}) < tol);
    for (double p : {0.0, 0.5, 1.0, 2.0, 3.0}) {
      Tensor<double> x = R({6});
      for (Index i = 0; i < x.size(); ++i) x[i] += x[i] > 0 ? 0.2 : -0.2;  // away from the kink at 0
      CHECK(gradient_error([p](auto&, auto& v) { return abs_pow(v[0], p); }, {x}) < tol);
    }
  }
  SUBCASE("layout") {
    CHECK(gradient_error([](auto&, auto& v) { return reshape(v[0], {3, 2}); }, {R({2, 3})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return transpose(v[0]); }, {R({2, 3, 4})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return concat_channels<double>({v[0], v[1]}); }, {R({2, 1, 2, 2}), R({2, 3, 2, 2})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return concat_last<double>({v[0], v[1]}); }, {R({2, 3, 2}), R({2, 3, 1})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return slice_last(v[0], 1, 2); }, {R({2, 3, 4})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return broadcast_spatial(v[0], 2, 3); }, {R({2, 3})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return upsample_nearest2x(v[0]); }, {R({1, 2, 2, 3})}) < tol);
  }
  SUBCASE("linear algebra") {
    CHECK(gradient_error([](auto&, auto& v) { return matmul(v[0], v[1]); }, {R({3, 4}), R({4, 2})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return matmul(v[0], v[1]); }, {R({2, 3, 4}), R({4, 2})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return matmul(v[0], v[1]); }, {R({2, 3, 4}), R({2, 4, 2})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return conv2d(v[0], v[1], Conv2dParams::same(3)); }, {R({1, 2, 4, 4}), R({2, 2, 3, 3})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return conv2d(v[0], v[1], Conv2dParams::same(3, 2)); }, {R({2, 1, 5, 4}), R({1, 1, 3, 3})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return patch_norm(v[0], 3, 3, Conv2dParams::same(3)); }, {R({1, 2, 4, 4})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return row_norm(v[0]); }, {R({3, 4})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return normalize_rows(v[0]); }, {R({3, 2, 2})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return cosine(v[0], v[1]); },
                         {R({2, 3, 4}), Tensor<double>({2, 1, 4}, {1.5, 2, 0.7, 1, 1.1, 3, 0.9, 2.5})}) < tol);
  }
  SUBCASE("normalization, attention, embedding") {
    CHECK(gradient_error([](auto&, auto& v) { return rms_inv(v[0], 1e-6); }, {R({2, 5})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return scale_samples(v[0], v[1]); }, {R({2, 3}), R({2})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return masked_softmax(v[0], {1, 0, 1, 1, 1, 0}); }, {R({2, 2, 3})}) < tol);
    CHECK(gradient_error([](auto&, auto& v) { return embed(v[0], v[1], {1, 2, 0, 2, 2, 1}, {1, 1, 0, 1, 1, 1}, 2); },
                         {R({4, 3}), R({3, 3})}) < tol);
  }
}

TEST_CASE("primitive gradients over randomized shapes") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    RngCursor rng(CounterRng(seed, 0x9d));
    for (const GradientCase& c : primitive_gradient_cases(rng)) {
      CAPTURE(c.name);
      CAPTURE(seed);
      CHECK(gradient_error(c.f, c.inputs, seed) < 1e-6);
    }
  }
}

TEST_CASE("gradient oracle property: random matmul chains") {
  RngCursor rng(CounterRng(6));
  for (int trial = 0; trial < 10; ++trial) {
    const Index m = random_int(rng, 1, 4), k = random_int(rng, 1, 4), n = random_int(rng, 1, 4);
    const double err = gradient_error(
        [](auto&, auto& v) { return mul(matmul(v[0], v[1]), matmul(v[0], v[1])); },
        {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}, static_cast<std::uint64_t>(trial));
    CHECK(err < 1e-6);
  }
}

TEST_CASE("masked softmax gives masked keys exactly zero and rows summing to one") {
  RngCursor rng(CounterRng(7));
  const auto p = eval1([](auto&, auto x) { return masked_softmax(x, {1, 0, 1, 0}); }, random_tensor(rng, {1, 3, 4}, 5.0));
  for (Index i = 0; i < 3; ++i) {
    CHECK(p.at(0, i, 1) == 0.0);
    CHECK(p.at(0, i, 3) == 0.0);
    CHECK(p.at(0, i, 0) + p.at(0, i, 2) == doctest::Approx(1.0).epsilon(1e-15));
  }
  Tape<double> t;
  CHECK_THROWS_AS(masked_softmax(t.leaf(Tensor<double>({1, 1, 2})), {0, 0}), DataError);
}

TEST_CASE("abs_pow treats 0^0 as 1 and cosine is zero where the norm vanishes") {
  const auto p = eval1([](auto&, auto x) { return abs_pow(x, 0.0); }, Tensor<double>({3}, {0.0, -2.0, 3.0}));
  CHECK(p.array().isOnes());
  Tape<double> t;
  const auto c = cosine(t.leaf(Tensor<double>({1, 2, 1}, {1.0, 2.0})), t.leaf(Tensor<double>({1, 1, 1}, {0.0})));
  CHECK(c.value().array().isZero(0.0));
}

TEST_CASE("freezing severs gradients but keeps values") {
  Tape<double> t;
  const Tensor<double> xv({3}, {1.0, -2.0, 0.5});
  Var<double> x = t.leaf(xv, true);
  Var<double> frozen = t.freeze(x);
  CHECK(frozen.value().identical(xv));
  // d/dx sum(x * freeze(x)) = freeze(x) = x, not 2x.
  const auto g = t.backward(sum(mul(x, frozen)));
  CHECK(g[x].identical(xv));

  Tape<double> live;
  Var<double> y = live.leaf(xv, true);
  CHECK(live.dynamic(y).id() == y.id());
  const auto g2 = live.backward(sum(mul(y, live.dynamic(y))));
  CHECK(max_abs_diff(g2[y], Tensor<double>({3}, {2.0, -4.0, 1.0})) == 0.0);

  Tape<double> frozen_tape(true);
  Var<double> z = frozen_tape.leaf(xv, true);
  CHECK(frozen_tape.node(frozen_tape.dynamic(z).id()).frozen);
}

TEST_CASE("replay reproduces recorded values bit-exactly and recomputes changed leaves") {
  RngCursor rng(CounterRng(8));
  Tape<double> t;
  const Tensor<double> xv = random_tensor(rng, {2, 3}), wv = random_tensor(rng, {3, 4});
  Var<double> x = t.leaf(xv, true), w = t.leaf(wv);
  Var<double> out = masked_softmax(reshape(matmul(x, w), {1, 2, 4}), {1, 1, 0, 1});
  CHECK(t.replay(out, {{x, xv}}).identical(out.value()));
  CHECK(t.replay(out, {}).identical(out.value()));

  const Tensor<double> x2 = random_tensor(rng, {2, 3});
  Tape<double> fresh;
  Var<double> ref = masked_softmax(reshape(matmul(fresh.leaf(x2), fresh.leaf(wv)), {1, 2, 4}), {1, 1, 0, 1});
  CHECK(t.replay(out, {{x, x2}}).identical(ref.value()));
  CHECK_THROWS_AS(t.replay(out, {{out, out.value()}}), std::invalid_argument);
}

TEST_CASE("a graph with frozen coefficients replays as a linear map") {
  RngCursor rng(CounterRng(9));
  Tape<double> t(true);
  const Tensor<double> xv = random_tensor(rng, {4, 3});
  Var<double> x = t.leaf(xv, true);
  // A small nonlinear network whose nonlinearity lives in dynamic coefficients.
  Var<double> s = t.dynamic(masked_softmax(reshape(matmul(x, transpose(x)), {1, 4, 4}), {1, 1, 1, 1}));
  Var<double> h = matmul(s, reshape(x, {1, 4, 3}));
  Var<double> out = scale_samples(reshape(h, {1, 12}), t.dynamic(rms_inv(reshape(h, {1, 12}), 1e-6)));

  CHECK(t.replay(out, {{x, Tensor<double>({4, 3})}}).array().isZero(0.0));
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor<double> a = random_tensor(rng, {4, 3}), b = random_tensor(rng, {4, 3});
    Tensor<double> ab = a;
    ab.array() = 0.7 * a.array() - 1.3 * b.array();
    Tensor<double> expect = t.replay(out, {{x, a}});
    expect.array() = 0.7 * expect.array() - 1.3 * t.replay(out, {{x, b}}).array();
    CHECK(max_abs_diff(t.replay(out, {{x, ab}}), expect) < 1e-12);
  }
  // The gradient of a linear map is its transpose: <g, x> = <1, out> at x.
  const auto g = t.vjp(out, Tensor<double>::full(out.shape(), 1.0));
  CHECK((g[x].array() * xv.array()).sum() == doctest::Approx(out.value().array().sum()).epsilon(1e-12));
}

TEST_CASE("stored elements count every recorded value") {
  Tape<double> t;
  Var<double> a = t.leaf(Tensor<double>({2, 3}));
  add(a, a);
  sum(a);
  CHECK(t.stored_elements() == 6 + 6 + 1);
  CHECK(t.size() == 3);
}

TEST_CASE("counter RNG is a pure function of seed, stream and counter") {
  const CounterRng a(42, 1), b(42, 1), c(42, 2), d(43, 1);
  for (std::uint64_t i = 0; i < 100; ++i) {
    CHECK(a.bits(i) == b.bits(i));
    CHECK(a.bits(i) != c.bits(i));
    CHECK(a.bits(i) != d.bits(i));
    CHECK(a.below(i, 7) < 7);
    const double u = a.uniform(i);
    CHECK((u >= 0.0 && u < 1.0));
  }
  CHECK(a.substream(5).bits(0) == b.substream(5).bits(0));
  CHECK(a.substream(5).bits(0) != a.substream(6).bits(0));
}

TEST_CASE("normal draws have zero mean and unit variance") {
  const CounterRng r(11, 0);
  const int n = 200000;
  double m = 0, v = 0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal(static_cast<std::uint64_t>(i));
    m += z;
    v += z * z;
  }
  m /= n;
  v = v / n - m * m;
  // Five standard errors.
  CHECK(std::abs(m) < 5.0 / std::sqrt(n));
  CHECK(std::abs(v - 1.0) < 5.0 * std::sqrt(2.0 / n));
}
