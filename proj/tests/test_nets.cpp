#include "gtmm/nets/nets.hpp"
#include "gtmm/tensor/grad_check.hpp"

#include <doctest.h>

#include <cmath>

using namespace gtmm;
using T = Tensor<double>;

namespace {

T randn(Shape shape, Rng& rng, double scale = 1.0) {
  Index n = 1;
  for (Index d : shape) n *= d;
  Vec<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return T::constant(std::move(shape), std::move(v));
}

T uniform01(Shape shape, Rng& rng) {
  Index n = 1;
  for (Index d : shape) n *= d;
  Vec<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.uniform();
  return T::constant(std::move(shape), std::move(v));
}

void fill(ParameterStore<double>& store, double value) {
  for (const auto& e : store.entries()) {
    T t = e.tensor;
    t.mutable_value().setConstant(value);
  }
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("lstm with zero parameters stays at zero") {
  ParameterStore<double> store;
  Rng rng(1);
  Lstm<double> cell(store, "lstm", 3, 4, rng);
  fill(store, 0.0);
  LstmState<double> s = cell.initial(2);
  for (int t = 0; t < 3; ++t) s = cell.step(s, randn({2, 3}, rng));
  CHECK(s.h.value().isZero());
  CHECK(s.c.value().isZero());
}

TEST_CASE("lstm with a saturated forget gate keeps its cell") {
  ParameterStore<double> store;
  Rng rng(1);
  const Index H = 3;
  Lstm<double> cell(store, "lstm", 2, H, rng);
  fill(store, 0.0);
  T b = cell.bias();
  b.mutable_value().segment(H, H).setConstant(20.0);
  LstmState<double> s{T::zeros({1, H}), T::constant({1, H}, Vec<double>::LinSpaced(H, -1.0, 1.0))};
  const LstmState<double> next = cell.step(s, randn({1, 2}, rng));
  CHECK((next.c.value() - s.c.value()).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("scalar lstm matches a hand-written cell") {
  ParameterStore<double> store;
  Rng rng(7);
  Lstm<double> cell(store, "lstm", 2, 1, rng);
  for (const auto& e : store.entries()) {
    T t = e.tensor;
    for (Index i = 0; i < t.size(); ++i) t.mutable_value()[i] = rng.uniform(-1, 1);
  }
  // weight rows: x0, x1, h; columns: input, forget, candidate, output
  const auto& w = cell.weight().value();
  const auto& b = cell.bias().value();
  double h = 0.3, c = -0.2;
  LstmState<double> s{T::constant({1, 1}, Vec<double>::Constant(1, h)), T::constant({1, 1}, Vec<double>::Constant(1, c))};
  for (int t = 0; t < 4; ++t) {
    const double x0 = rng.uniform(-1, 1), x1 = rng.uniform(-1, 1);
    Vec<double> xv(2);
    xv << x0, x1;
    s = cell.step(s, T::constant({1, 2}, xv));
    double pre[4];
    for (int g = 0; g < 4; ++g) pre[g] = x0 * w[0 * 4 + g] + x1 * w[1 * 4 + g] + h * w[2 * 4 + g] + b[g];
    c = sigm(pre[1]) * c + sigm(pre[0]) * std::tanh(pre[2]);
    h = sigm(pre[3]) * std::tanh(c);
    CHECK(std::abs(s.h.item() - h) < 1e-12);
    CHECK(std::abs(s.c.item() - c) < 1e-12);
  }
}

TEST_CASE("lstm forget bias starts at +1") {
  ParameterStore<double> store;
  Rng rng(1);
  Lstm<double> cell(store, "lstm", 2, 3, rng);
  CHECK((cell.bias().value().segment(3, 3) == 1.0).all());
  CHECK(cell.bias().value().head(3).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(5.0));
}

TEST_CASE("initialization stays inside 1/sqrt(fan_in)") {
  Rng rng(3);
  const Vec<double> v = uniform_init<double>(rng, 10000, 25);
  CHECK(v.cwiseAbs().maxCoeff() <= 0.2);
  CHECK(v.cwiseAbs().maxCoeff() > 0.19);
}

TEST_CASE("mlp identity and bias cases") {
  ParameterStore<double> store;
  Rng rng(2);
  Mlp<double> id(store, "id", MlpSpec{3, {3}, {Activation::identity}}, rng);
  T w = id.layers()[0].weight();
  w.mutable_value().setZero();
  for (Index i = 0; i < 3; ++i) w.mutable_value()[i * 3 + i] = 1.0;
  T b = id.layers()[0].bias();
  b.mutable_value().setZero();
  const T x = randn({4, 3}, rng);
  CHECK((id(x).value() == x.value()).all());

  Mlp<double> act(store, "act", MlpSpec{2, {3}, {Activation::tanh}}, rng);
  T bias = act.layers()[0].bias();
  bias.mutable_value() << -1.0, 0.5, 2.0;
  const T y = act(T::zeros({1, 2}));
  CHECK(y.value()[0] == doctest::Approx(std::tanh(-1.0)));
  CHECK(y.value()[2] == doctest::Approx(std::tanh(2.0)));
}

TEST_CASE("mlp layer list validation") {
  CHECK_THROWS(MlpSpec{0, {3}, {Activation::tanh}}.validate());
  CHECK_THROWS(MlpSpec{2, {}, {}}.validate());
  CHECK_THROWS(MlpSpec{2, {3, 4}, {Activation::tanh}}.validate());
  ParameterStore<double> store;
  Rng rng(1);
  Mlp<double> m(store, "m", MlpSpec{2, {3}, {Activation::tanh}}, rng);
  CHECK_THROWS_AS(m(T::zeros({1, 5})), ShapeError);
}

TEST_CASE("encoder zero image with zero biases gives zero features") {
  for (CodecKind kind : {CodecKind::small_conv, CodecKind::mlp}) {
    ParameterStore<double> store;
    Rng rng(1);
    EncoderSpec spec;
    spec.kind = kind;
    Encoder<double> enc(store, "enc", spec, rng);
    for (const auto& e : store.entries()) {
      if (e.name.find("bias") != std::string::npos) {
        T t = e.tensor;
        t.mutable_value().setZero();
      }
    }
    CHECK(enc(T::zeros({2, 64})).value().isZero());
  }
}

TEST_CASE("encoder is deterministic") {
  ParameterStore<double> store;
  Rng rng(1);
  Encoder<double> enc(store, "enc", EncoderSpec{}, rng);
  const T x = uniform01({1, 64}, rng);
  const T two = concat<double>({x, x}, 0);
  const T f = enc(two);
  CHECK((f.value().head(64) == f.value().tail(64)).all());
}

TEST_CASE("decoder with zero z and parameters gives logits 0") {
  ParameterStore<double> store;
  Rng rng(1);
  DecoderSpec spec;
  Decoder<double> dec(store, "dec", spec, rng);
  fill(store, 0.0);
  const T l = dec(T::zeros({3, spec.latent}));
  CHECK(l.shape() == Shape{3, 64});
  CHECK(l.value().isZero());
}

TEST_CASE("decoder output dims equal encoder input dims") {
  for (ImageDims d : {ImageDims{1, 8, 8}, ImageDims{1, 12, 12}, ImageDims{1, 28, 28}, ImageDims{1, 7, 9},
                      ImageDims{3, 10, 6}}) {
    for (CodecKind kind : {CodecKind::small_conv, CodecKind::mlp}) {
      ParameterStore<float> store;
      Rng rng(1);
      DecoderSpec spec;
      spec.mirror.kind = kind;
      spec.mirror.image = d;
      spec.extra = 5;
      Decoder<float> dec(store, "dec", spec, rng);
      const Tensor<float> out = dec(Tensor<float>::zeros({2, 8}), Tensor<float>::zeros({2, 5}));
      CHECK(out.shape() == Shape{2, d.pixels()});
    }
  }
}

TEST_CASE("decoder checks widths") {
  ParameterStore<double> store;
  Rng rng(1);
  Decoder<double> dec(store, "dec", DecoderSpec{}, rng);
  CHECK_THROWS_AS(dec(T::zeros({1, 3})), ShapeError);
  CHECK_THROWS_AS(Encoder<double>(store, "enc", EncoderSpec{}, rng)(T::zeros({1, 10})), ShapeError);
}

TEST_CASE("encoder features gradient wrt pixels") {
  ParameterStore<double> store;
  Rng rng(5);
  Encoder<double> enc(store, "enc", EncoderSpec{}, rng);
  std::vector<T> x{T::parameter({1, 64}, uniform01({1, 64}, rng).value())};
  GradCheckOptions opt;
  opt.retry_above = 1e-6;
  const auto r = grad_check([&] { return sum(enc(x[0])); }, x, opt);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("mlp gradient wrt parameters and input") {
  ParameterStore<double> store;
  Rng rng(6);
  Mlp<double> m(store, "m", MlpSpec{4, {6, 3}, {Activation::tanh, Activation::identity}}, rng);
  std::vector<T> wrt = store.tensors();
  wrt.push_back(T::parameter({2, 4}, randn({2, 4}, rng).value()));
  const T c = randn({2, 3}, rng);
  const auto r = grad_check([&] { return sum(mul(m(wrt.back()), c)); }, wrt);
  CHECK(r.max_rel_error < 1e-5);
}
