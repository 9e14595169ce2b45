#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bcosdiff/checkpoint.hpp"
#include "fixtures.hpp"
#include "support.hpp"

#include <filesystem>
#include <fstream>

using namespace bcosdiff;
using namespace testing;

namespace {

struct FrozenNet {
  Tape<double> tape{true};
  Var<double> x, tf, y, out;
};

// One U-Net evaluation recorded with frozen coefficients and three input leaves.
void record(FrozenNet& n, const DiffusionModel<double>& m, const Tensor<double>& x, int t, const Prompt& p) {
  Graph<double> g(n.tape, false);
  n.x = n.tape.leaf(x, true);
  n.tf = n.tape.leaf(m.time_features({t}), true);
  n.y = n.tape.leaf(m.embed(p), true);
  n.out = m.unet().forward(g, n.x, n.tf, n.y, p.mask);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("bcosdiff_test_" + name)).string();
}

}  // namespace

TEST_CASE("timestep features: closed form and injectivity") {
  const Index dim = 32;
  const auto e = timestep_embedding<double>(7, dim);
  for (Index i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -double(i) / (dim / 2));
    CHECK(e[i] == doctest::Approx(std::cos(7 * freq)).epsilon(1e-14));
    CHECK(e[dim / 2 + i] == doctest::Approx(std::sin(7 * freq)).epsilon(1e-14));
  }
  std::vector<Tensor<double>> all;
  for (int t = 0; t <= 1000; ++t) all.push_back(timestep_embedding<double>(t, dim));
  double closest = 1e300;
  for (int a = 0; a <= 1000; ++a)
    for (int b = a + 1; b <= 1000; ++b) closest = std::min(closest, max_abs_diff(all[a], all[b]));
  CHECK(closest > 1e-4);
  CHECK_THROWS_AS(timestep_embedding<double>(1, 7), ConfigError);
}

TEST_CASE("model config serialization and validation") {
  ModelConfig c = tiny_config(3);
  c.bcos_b = 1.5;
  c.target = Target::kEps;
  c.schedule_shape = ScheduleShape::kScaledLinear;
  const ModelConfig back = ModelConfig::parse(c.serialize());
  CHECK(back.serialize() == c.serialize());
  CHECK(back.bcos_b == 1.5);
  CHECK(back.target == Target::kEps);

  ModelConfig bad = tiny_config();
  CHECK_THROWS_AS(bad.set("no_such_key", "1"), ConfigError);
  CHECK_THROWS_AS(bad.set("image_size", "eight"), ConfigError);
  bad.image_size = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.bcos_b = 0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(parse_target("v"), ConfigError);
}

TEST_CASE("initialization is a pure function of the init seed") {
  const auto v = Vocabulary::standard();
  const DiffusionModel<double> a(tiny_config(1), v), b(tiny_config(1), v), c(tiny_config(2), v);
  std::vector<const Parameter<double>*> pa, pb, pc;
  a.visit([&](const Parameter<double>& p) { pa.push_back(&p); });
  b.visit([&](const Parameter<double>& p) { pb.push_back(&p); });
  c.visit([&](const Parameter<double>& p) { pc.push_back(&p); });
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value.identical(pb[i]->value));
    any_diff = any_diff || !pa[i]->value.identical(pc[i]->value);
  }
  CHECK(any_diff);
  CHECK(DiffusionModel<float>(ModelConfig{}, v).parameter_count() == 188512);
}

TEST_CASE("no parameter is an additive offset") {
  const DiffusionModel<double> m(tiny_config(), Vocabulary::standard());
  std::size_t n = 0;
  m.visit([&](const Parameter<double>& p) {
    ++n;
    CHECK((p.role == ParamRole::kBcosWeight || p.role == ParamRole::kQueryKey || p.role == ParamRole::kTokenTable ||
           p.role == ParamRole::kPositional));
    CHECK(p.name.find("bias") == std::string::npos);
  });
  CHECK(n > 10);
}

TEST_CASE("output shape and input validation") {
  const DiffusionModel<double> m(tiny_config(), Vocabulary::standard());
  const Prompt p = m.tokenize("a red circle");
  Tape<double> tape;
  Graph<double> g(tape, false);
  RngCursor rng(CounterRng(41));
  const Tensor<double> x = random_tensor(rng, m.state_shape(2));
  Var<double> y = g.constant(Tensor<double>({2, 10, 8}));
  std::vector<char> mask = p.mask;
  mask.insert(mask.end(), p.mask.begin(), p.mask.end());
  Var<double> out = m.denoise(g, g.constant(x), {5, 900}, y, mask);
  CHECK(out.shape() == m.state_shape(2));
  CHECK_THROWS_AS(m.denoise(g, g.constant(random_tensor(rng, {2, 6, 5, 5})), {5, 900}, y, mask), ShapeError);
  CHECK_THROWS_AS(m.time_features({1001}), std::out_of_range);
}

TEST_CASE("padding positions cannot influence the denoiser") {
  const DiffusionModel<double> m(tiny_config(), Vocabulary::standard());
  const Prompt p = m.tokenize("a red circle");
  RngCursor rng(CounterRng(42));
  const Tensor<double> x = random_tensor(rng, m.state_shape());
  Tensor<double> y = m.embed(p);
  auto run = [&](const Tensor<double>& yy) {
    Tape<double> tape;
    Graph<double> g(tape, false);
    return m.denoise(g, g.constant(x), {300}, g.constant(yy), p.mask).value();
  };
  const Tensor<double> base = run(y);
  for (std::size_t i = 0; i < p.mask.size(); ++i) {
    if (p.mask[i]) continue;
    for (Index c = 0; c < 8; ++c) y.at(0, static_cast<Index>(i), c) = 50.0 + c;
  }
  CHECK(run(y).identical(base));
}

TEST_CASE("with frozen coefficients the denoiser is linear in all of its inputs") {
  const DiffusionModel<double> m(tiny_config(), Vocabulary::standard());
  const Prompt p = m.tokenize("the large blue square");
  RngCursor rng(CounterRng(43));
  const Tensor<double> x = random_tensor(rng, m.state_shape());
  FrozenNet n;
  record(n, m, x, 400, p);
  const Tensor<double> zx(x.shape()), zt(n.tf.shape()), zy(n.y.shape());

  // Zero in, zero out: no input-independent term exists.
  CHECK(n.tape.replay(n.out, {{n.x, zx}, {n.tf, zt}, {n.y, zy}}).array().isZero(0.0));
  // Completeness: the three partial contributions add back to the output.
  Tensor<double> total = n.tape.replay(n.out, {{n.tf, zt}, {n.y, zy}});
  total.array() += n.tape.replay(n.out, {{n.x, zx}, {n.y, zy}}).array();
  total.array() += n.tape.replay(n.out, {{n.x, zx}, {n.tf, zt}}).array();
  const double scale = n.out.value().array().abs().maxCoeff();
  CHECK(max_abs_diff(total, n.out.value()) < 1e-12 * scale);
  // The pullback of a linear map contracts with its inputs to the output sum.
  const auto g = n.tape.vjp(n.out, Tensor<double>::full(n.out.shape(), 1.0));
  const double contracted = (g[n.x].array() * x.array()).sum() + (g[n.tf].array() * n.tf.value().array()).sum() +
                            (g[n.y].array() * n.y.value().array()).sum();
  CHECK(contracted == doctest::Approx(n.out.value().array().sum()).epsilon(1e-10));
  // Superposition for random inputs.
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor<double> ya = random_tensor(rng, zy.shape()), yb = random_tensor(rng, zy.shape());
    Tensor<double> yab = ya;
    yab.array() += 2.0 * yb.array();
    Tensor<double> expect = n.tape.replay(n.out, {{n.x, zx}, {n.tf, zt}, {n.y, ya}});
    expect.array() += 2.0 * n.tape.replay(n.out, {{n.x, zx}, {n.tf, zt}, {n.y, yb}}).array();
    CHECK(max_abs_diff(n.tape.replay(n.out, {{n.x, zx}, {n.tf, zt}, {n.y, yab}}), expect) < 1e-12 * scale);
  }
}

TEST_CASE("the unfrozen denoiser is not linear") {
  const DiffusionModel<double> m(tiny_config(), Vocabulary::standard());
  const Prompt p = m.tokenize("a red circle");
  RngCursor rng(CounterRng(44));
  const Tensor<double> x = random_tensor(rng, m.state_shape());
  auto run = [&](const Tensor<double>& xx) {
    Tape<double> tape;
    Graph<double> g(tape, false);
    return m.denoise(g, g.constant(xx), {300}, g.constant(m.embed(p)), p.mask).value();
  };
  Tensor<double> x2 = x;
  x2.array() *= 2.0;
  Tensor<double> twice = run(x);
  twice.array() *= 2.0;
  CHECK(max_abs_diff(run(x2), twice) > 1e-6);
}

TEST_CASE("eps-target models convert their output to a clean estimate") {
  ModelConfig c = tiny_config();
  c.target = Target::kEps;
  const DiffusionModel<double> m(c, Vocabulary::standard());
  const Prompt p = m.tokenize("a red circle");
  RngCursor rng(CounterRng(45));
  const Tensor<double> x = random_tensor(rng, m.state_shape());
  Tape<double> tape;
  Graph<double> g(tape, false);
  Var<double> xv = g.constant(x), y = g.constant(m.embed(p));
  const Tensor<double> raw = m.denoise(g, xv, {600}, y, p.mask).value();
  const Tensor<double> x0 = m.predict_x0(g, xv, 600, y, p.mask).value();
  CHECK(max_abs_diff(x0, convert_target(x, 600, m.schedule(), raw, TargetKind::kEpsToX0)) < 1e-12);
}

TEST_CASE("sampling is deterministic and finite at 4 and 25 steps") {
  const DiffusionModel<float> m(tiny_config(), Vocabulary::standard());
  const Prompt p = m.tokenize("a small green ring");
  for (int steps : {4, 25}) {
    const auto a = m.sample(p, steps, 5), b = m.sample(p, steps, 5);
    CHECK(a.image.identical(b.image));
    CHECK(a.states.back().array().allFinite());
    CHECK(a.image.shape() == Shape{3, 8, 8});
  }
  Prompt empty = p;
  std::fill(empty.mask.begin(), empty.mask.end(), 0);
  CHECK_THROWS_AS(m.sample(empty, 4, 1), DataError);
}

TEST_CASE("checkpoints round-trip parameters, config and vocabulary") {
  const DiffusionModel<float> m(tiny_config(9), Vocabulary::standard());
  Checkpoint c = make_checkpoint(m);
  c.meta["note"] = "x=y";
  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, c);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.config.serialize() == m.config().serialize());
  CHECK(back.vocab == m.vocab());
  CHECK(back.meta.at("note") == "x=y");
  const DiffusionModel<float> r = model_from_checkpoint<float>(back);
  std::vector<Tensor<float>> pa, pb;
  m.visit([&](const Parameter<float>& p) { pa.push_back(p.value); });
  r.visit([&](const Parameter<float>& p) { pb.push_back(p.value); });
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].identical(pb[i]));

  const DiffusionModel<float> via_double = m.cast<double>().cast<float>();
  std::size_t i = 0;
  via_double.visit([&](const Parameter<float>& p) { CHECK(p.value.identical(pa[i++])); });

  // Sampling from the restored model reproduces the original bit for bit.
  const Prompt p = m.tokenize("a red cross");
  CHECK(m.sample(p, 3, 2).image.identical(r.sample(p, 3, 2).image));
  std::filesystem::remove(path);
}

TEST_CASE("corrupt or mismatched checkpoints are rejected") {
  const DiffusionModel<float> m(tiny_config(), Vocabulary::standard());
  const std::string path = temp_path("corrupt.ckpt");
  save_checkpoint(path, make_checkpoint(m));
  std::string bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  write(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::string bad = bytes;
  bad[0] = 'X';
  write(bad);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);

  Checkpoint c = make_checkpoint(m);
  c.blobs.pop_back();
  CHECK_THROWS_AS(model_from_checkpoint<float>(c), DataError);
  c = make_checkpoint(m);
  c.blobs.front().value = Tensor<double>({1});
  CHECK_THROWS_AS(model_from_checkpoint<float>(c), DataError);
}
