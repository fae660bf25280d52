#include "gtmm/memory/memory.hpp"
#include "gtmm/verify/verify.hpp"

#include <doctest.h>

#include <cmath>
#include <deque>

using namespace gtmm;
using T = Tensor<double>;

namespace {

T vec(Shape shape, std::initializer_list<double> values) {
  Vec<double> v(static_cast<Index>(values.size()));
  Index i = 0;
  for (double x : values) v[i++] = x;
  return T::constant(std::move(shape), std::move(v));
}

T randn(Shape shape, Rng& rng) {
  Index n = 1;
  for (Index d : shape) n *= d;
  Vec<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.normal();
  return T::constant(std::move(shape), std::move(v));
}

MemoryConfig small(MemoryKind kind) {
  MemoryConfig c;
  c.kind = kind;
  c.latent = 3;
  c.features = 4;
  c.hidden = 5;
  c.heads = 2;
  c.slots = 4;
  return c;
}

void zero_prefix(ParameterStore<double>& store, const std::string& prefix) {
  for (const auto& e : store.entries()) {
    if (e.name.rfind(prefix, 0) == 0) {
      T t = e.tensor;
      t.mutable_value().setZero();
    }
  }
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus_ref(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

MemoryInput<double> input(const T& z, bool write = true) { return {z, T(), T(), write}; }

}  // namespace

TEST_CASE("psi widths") {
  MemoryConfig c = small(MemoryKind::vrnn);
  CHECK(c.psi_width() == 5);
  c.kind = MemoryKind::introspection;
  CHECK(c.psi_width() == 6);
  c.kind = MemoryKind::dnc;
  CHECK(c.psi_width() == 2 * 3 + 5);
  c.word = 7;
  CHECK(c.psi_width() == 2 * 7 + 5);
}

TEST_CASE("every kind steps and returns psi of the declared width") {
  for (MemoryKind kind : {MemoryKind::vrnn, MemoryKind::introspection, MemoryKind::ntm, MemoryKind::lru,
                          MemoryKind::dnc}) {
    ParameterStore<double> store;
    Rng rng(3);
    MemorySystem<double> mem(store, "mem", small(kind), rng);
    MemoryState<double> s = mem.initial(2);
    for (int t = 0; t < 6; ++t) {
      MemoryInput<double> in{randn({2, 3}, rng), randn({2, 4}, rng), T(), t > 0};
      MemoryStep<double> out = mem.step(s, in);
      CHECK(out.psi.shape() == Shape{2, mem.psi_width()});
      CHECK(out.psi.value().allFinite());
      s = out.state;
    }
  }
}

TEST_CASE("names parse and bad configs are rejected") {
  for (MemoryKind kind : {MemoryKind::vrnn, MemoryKind::introspection, MemoryKind::ntm, MemoryKind::lru,
                          MemoryKind::dnc}) {
    CHECK(parse_memory_kind(to_string(kind)) == kind);
  }
  CHECK_THROWS(parse_memory_kind("lstm"));
  MemoryConfig c = small(MemoryKind::lru);
  c.usage_decay = 1.0;
  CHECK_THROWS(c.validate());
  c = small(MemoryKind::ntm);
  c.slots = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("initial states") {
  ParameterStore<double> store;
  Rng rng(1);
  {
    MemorySystem<double> m(store, "ntm", small(MemoryKind::ntm), rng);
    const auto s = std::get<NtmState<double>>(m.initial(2));
    CHECK(s.memory.shape() == Shape{2, 4, 3});
    CHECK(s.memory.value().isZero());
    for (Index r = 0; r < 4; ++r) CHECK(s.read_weights.value()[r * 4] == 1.0);
    CHECK(s.read_weights.value().sum() == 4.0);
    CHECK(s.write_weights.value()[0] == 1.0);
  }
  {
    MemorySystem<double> m(store, "lru", small(MemoryKind::lru), rng);
    const auto s = std::get<LruState<double>>(m.initial(1));
    CHECK((s.read_weights.value() == 0.25).all());
    CHECK(s.usage.value().isZero());
  }
  {
    MemorySystem<double> m(store, "dnc", small(MemoryKind::dnc), rng);
    const auto s = std::get<DncState<double>>(m.initial(1));
    CHECK(s.links.shape() == Shape{1, 4, 4});
    CHECK(s.links.value().isZero());
    CHECK(s.precedence.value().isZero());
  }
  {
    MemorySystem<double> m(store, "intro", small(MemoryKind::introspection), rng);
    const auto s = std::get<IntrospectionState<double>>(m.initial(1));
    CHECK(s.fill == 0);
    CHECK(s.rows.size() == 4);
    CHECK_THROWS(s.buffer());
  }
}

TEST_CASE("introspection with one stored row returns the gated row") {
  ParameterStore<double> store;
  Rng rng(2);
  MemorySystem<double> mem(store, "mem", small(MemoryKind::introspection), rng);
  MemoryStep<double> first = mem.step(mem.initial(1), input(vec({1, 3}, {9, 9, 9}), false));
  CHECK(first.psi.value().isZero());
  const T z = vec({1, 3}, {0.5, -1.0, 2.0});
  MemoryStep<double> second = mem.step(first.state, input(z));
  const double g = sigm(2.0);
  for (Index r = 0; r < 2; ++r) {
    for (Index j = 0; j < 3; ++j) CHECK(second.psi.value()[r * 3 + j] == doctest::Approx(z.value()[j] * g));
  }
}

TEST_CASE("introspection with a zeroed scorer averages the buffer") {
  ParameterStore<double> store;
  Rng rng(2);
  MemorySystem<double> mem(store, "mem", small(MemoryKind::introspection), rng);
  zero_prefix(store, "mem.scorer");
  MemoryState<double> s = mem.initial(1);
  const std::vector<T> zs{vec({1, 3}, {1, 0, 0}), vec({1, 3}, {0, 2, 0}), vec({1, 3}, {0, 0, 3})};
  MemoryStep<double> out = mem.step(s, input(zs[0], false));
  for (const T& z : zs) out = mem.step(out.state, input(z));
  const auto& st = std::get<IntrospectionState<double>>(out.state);
  CHECK(st.fill == 3);
  CHECK((st.read_weights.value() - 1.0 / 3.0).cwiseAbs().maxCoeff() < 1e-15);
  const double g = sigm(2.0);
  CHECK(out.psi.value()[0] == doctest::Approx(g / 3));
  CHECK(out.psi.value()[1] == doctest::Approx(2 * g / 3));
  CHECK(out.psi.value()[5] == doctest::Approx(g));
}

TEST_CASE("introspection read weights are normalized softplus scores") {
  ParameterStore<double> store;
  Rng rng(8);
  MemoryConfig cfg = small(MemoryKind::introspection);
  MemorySystem<double> mem(store, "mem", cfg, rng);
  MemoryStep<double> out = mem.step(mem.initial(1), input(randn({1, 3}, rng), false));
  for (int t = 0; t < 2; ++t) out = mem.step(out.state, input(randn({1, 3}, rng)));
  const auto& st = std::get<IntrospectionState<double>>(out.state);
  REQUIRE(st.fill == 2);
  // scorer by hand: tanh(h W0 + b0) W1 + b1
  const Index H = cfg.hidden, R = cfg.heads, L = cfg.slots;
  const auto& h = st.controller.h.value();
  const auto& w0 = store.get("mem.scorer.0.weight").value();
  const auto& b0 = store.get("mem.scorer.0.bias").value();
  const auto& w1 = store.get("mem.scorer.1.weight").value();
  const auto& b1 = store.get("mem.scorer.1.bias").value();
  std::vector<double> a(static_cast<std::size_t>(H));
  for (Index j = 0; j < H; ++j) {
    double acc = b0[j];
    for (Index i = 0; i < H; ++i) acc += h[i] * w0[i * H + j];
    a[static_cast<std::size_t>(j)] = std::tanh(acc);
  }
  for (Index r = 0; r < R; ++r) {
    double k[2], total = 0;
    for (Index i = 0; i < 2; ++i) {
      const Index col = r * L + i;
      double acc = b1[col];
      for (Index j = 0; j < H; ++j) acc += a[static_cast<std::size_t>(j)] * w1[j * R * L + col];
      k[i] = softplus_ref(acc);
      total += k[i];
    }
    for (Index i = 0; i < 2; ++i) CHECK(st.read_weights.value()[r * 2 + i] == doctest::Approx(k[i] / total).epsilon(1e-12));
  }
}

TEST_CASE("introspection buffer is a FIFO of the last L samples") {
  ParameterStore<double> store;
  Rng rng(4);
  MemorySystem<double> mem(store, "mem", small(MemoryKind::introspection), rng);
  MemoryStep<double> out = mem.step(mem.initial(1), input(randn({1, 3}, rng), false));
  std::deque<double> ref;
  for (int t = 0; t < 7; ++t) {
    const double v = t + 1.0;
    out = mem.step(out.state, input(vec({1, 3}, {v, v, v})));
    ref.push_back(v);
    if (ref.size() > 4) ref.pop_front();
  }
  const auto& st = std::get<IntrospectionState<double>>(out.state);
  CHECK(st.fill == 4);
  std::vector<double> stored;
  for (const auto& r : st.rows) stored.push_back(r.value()[0]);
  std::sort(stored.begin(), stored.end());
  CHECK(stored == std::vector<double>(ref.begin(), ref.end()));
  // the next overwrite lands on the oldest row
  CHECK(st.rows[static_cast<std::size_t>(st.cursor)].value()[0] == ref.front());
}

TEST_CASE("content attention example") {
  const T m = vec({1, 2, 2}, {1, 0, 0, 1});
  const T w = content_attention(m, vec({1, 1, 2}, {1, 0}), vec({1, 1}, {1.0}));
  CHECK(w.value()[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)));
  CHECK(w.value()[1] == doctest::Approx(1.0 / (std::exp(1.0) + 1.0)));
  // large beta is nearly a hard lookup
  const T hard = content_attention(m, vec({1, 1, 2}, {0, 3}), vec({1, 1}, {50.0}));
  CHECK(hard.value()[1] > 1 - 1e-12);
}

TEST_CASE("erase and add example") {
  const T m = vec({1, 2, 2}, {1, 2, 3, 4});
  const T out = erase_and_add(m, vec({1, 2}, {1, 0}), vec({1, 2}, {1, 0.5}), vec({1, 2}, {5, 6}));
  // row 0: [1*(1-1) + 5, 2*(1-0.5) + 6], row 1 untouched
  CHECK(out.value()[0] == 5.0);
  CHECK(out.value()[1] == 7.0);
  CHECK(out.value()[2] == 3.0);
  CHECK(out.value()[3] == 4.0);
}

TEST_CASE("circular shift moves mass around the ring") {
  const T w = vec({1, 1, 4}, {1, 0, 0, 0});
  CHECK((circular_shift(w, vec({1, 1, 3}, {0, 0, 1})).value() == vec({4}, {0, 1, 0, 0}).value()).all());
  CHECK((circular_shift(w, vec({1, 1, 3}, {1, 0, 0})).value() == vec({4}, {0, 0, 0, 1}).value()).all());
  CHECK((circular_shift(w, vec({1, 1, 3}, {0, 1, 0})).value() == w.value()).all());
  const T mixed = circular_shift(vec({1, 1, 4}, {0.1, 0.2, 0.3, 0.4}), vec({1, 1, 3}, {0.2, 0.5, 0.3}));
  CHECK(mixed.value().sum() == doctest::Approx(1.0));
  // slot 0 receives 0.2 * w[1] + 0.5 * w[0] + 0.3 * w[3]
  CHECK(mixed.value()[0] == doctest::Approx(0.2 * 0.2 + 0.5 * 0.1 + 0.3 * 0.4));
}

TEST_CASE("sharpen with gamma one keeps a distribution") {
  const T w = vec({1, 1, 3}, {0.2, 0.3, 0.5});
  CHECK((sharpen(w, vec({1, 1}, {1.0})).value() - w.value()).cwiseAbs().maxCoeff() < 1e-9);
  const T s = sharpen(w, vec({1, 1}, {3.0}));
  CHECK(s.value()[2] > 0.5);
}

TEST_CASE("temporal links record write order") {
  const Index L = 6;
  auto one_hot = [&](Index i) {
    Vec<double> v = Vec<double>::Zero(L);
    v[i] = 1.0;
    return T::constant({1, L}, v);
  };
  T links = T::zeros({1, L, L});
  T prec = T::zeros({1, L});
  links = update_links(links, one_hot(2), prec);
  prec = update_precedence(prec, one_hot(2));
  CHECK(links.value().isZero());
  CHECK(prec.value()[2] == 1.0);
  links = update_links(links, one_hot(5), prec);
  prec = update_precedence(prec, one_hot(5));
  CHECK(links.value()[5 * L + 2] == 1.0);
  CHECK(links.value().sum() == 1.0);
  CHECK(prec.value()[5] == 1.0);
  CHECK(prec.value()[2] == 0.0);
  // forward read from slot 2 lands on slot 5
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      links.value().data(), L, L);
  Eigen::VectorXd from = Eigen::VectorXd::Zero(L);
  from[2] = 1.0;
  const Eigen::VectorXd fwd = m * from;
  CHECK(fwd[5] == 1.0);
  CHECK(fwd.sum() == 1.0);
}

TEST_CASE("soft writes keep link bounds") {
  Rng rng(12);
  const Index L = 5;
  T links = T::zeros({1, L, L});
  T prec = T::zeros({1, L});
  for (int t = 0; t < 50; ++t) {
    Vec<double> w(L);
    for (Index i = 0; i < L; ++i) w[i] = rng.uniform();
    w *= rng.uniform() / w.sum();
    const T wt = T::constant({1, L}, w);
    links = update_links(links, wt, prec);
    prec = update_precedence(prec, wt);
    const auto& v = links.value();
    CHECK(v.minCoeff() >= 0.0);
    CHECK(v.maxCoeff() <= 1.0);
    for (Index i = 0; i < L; ++i) CHECK(v[i * L + i] == 0.0);
    CHECK(prec.value().sum() <= 1.0 + 1e-12);
  }
}

TEST_CASE("lru usage with zero decay is this step's reads plus write") {
  ParameterStore<double> store;
  Rng rng(6);
  MemoryConfig cfg = small(MemoryKind::lru);
  cfg.usage_decay = 0.0;
  MemorySystem<double> mem(store, "mem", cfg, rng);
  MemoryStep<double> out = mem.step(mem.initial(2), input(randn({2, 3}, rng), false));
  for (int t = 0; t < 5; ++t) {
    out = mem.step(out.state, input(randn({2, 3}, rng)));
    const auto& st = std::get<LruState<double>>(out.state);
    const Vec<double> expect = sum(st.read_weights, 1).value() + st.write_weights.value();
    CHECK((st.usage.value() - expect).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(st.write_weights.value().head(4).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("kind mismatch and batch changes are rejected") {
  ParameterStore<double> store;
  Rng rng(1);
  MemorySystem<double> ntm(store, "ntm", small(MemoryKind::ntm), rng);
  MemorySystem<double> lru(store, "lru", small(MemoryKind::lru), rng);
  CHECK_THROWS(lru.step(ntm.initial(1), input(T::zeros({1, 3}))));
  CHECK_THROWS_AS(ntm.step(ntm.initial(2), input(T::zeros({1, 3}))), ShapeError);
  CHECK_THROWS_AS(ntm.step(ntm.initial(1), input(T::zeros({1, 7}))), ShapeError);
}

TEST_CASE("randomized invariants on a short rollout") {
  const SuiteReport r = memory_invariant_suite(5, 400);
  for (const Check& c : r.checks) {
    INFO(c.name << " " << c.value << " " << c.detail);
    CHECK(c.passed);
  }
}
