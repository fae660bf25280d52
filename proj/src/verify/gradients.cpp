#include "gtmm/verify/verify.hpp"

#include "gtmm/tensor/grad_check.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>

namespace gtmm {

namespace {

using T = Tensor<double>;

constexpr double kPrimitiveLimit = 1e-5;
constexpr double kCompositeLimit = 1e-4;

Vec<double> uniform_values(Rng& rng, Index n, double lo, double hi) {
  Vec<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
  return v;
}

T leaf(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  const Index n = numel(s);
  return T::parameter(std::move(s), uniform_values(rng, n, lo, hi));
}

T constant(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  const Index n = numel(s);
  return T::constant(std::move(s), uniform_values(rng, n, lo, hi));
}

// |x| in [lo, hi] with a random sign; keeps kinks and poles out of reach of h
T signed_leaf(Rng& rng, Shape s, double lo, double hi) {
  const Index n = numel(s);
  Vec<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return T::parameter(std::move(s), std::move(v));
}

Index pick(Rng& rng, Index lo, Index hi) { return lo + rng.uniform_index(hi - lo + 1); }

struct Tally {
  Tally(std::string n, double l) : name(std::move(n)), limit(l) {}

  std::string name;
  double limit;
  double worst = 0.0;
  std::string detail;
  Index cases = 0;
  std::size_t coords = 0;
  std::size_t retried = 0;

  void add(const GradCheckResult& r) {
    ++cases;
    coords += r.coordinates;
    retried += r.retried;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      char buf[160];
      std::snprintf(buf, sizeof buf, "input %zu [%ld]: autodiff %.6g vs numeric %.6g", r.worst_tensor,
                    static_cast<long>(r.worst_index), r.worst_autodiff, r.worst_numeric);
      detail = buf;
    }
  }

  Check check() const {
    Check c;
    c.name = name;
    c.value = worst;
    c.limit = limit;
    c.passed = cases > 0 && worst < limit;
    c.detail = std::to_string(cases) + (cases == 1 ? " case, " : " cases, ") + std::to_string(coords) + " coords";
    if (retried > 0) c.detail += " (" + std::to_string(retried) + " re-measured at smaller h)";
    if (!c.passed) c.detail += ", " + detail;
    return c;
  }
};

// Composite maps: a central difference of f carries roughly eps |f| / h of
// rounding noise, so the relative-error floor follows |f| instead of
// staying at 1e-8. Pure rounding then scores about 1e-4 of the floor.
GradCheckResult composite_check(const std::function<T()>& f, std::vector<T> wrt, std::size_t max_coords = 0) {
  GradCheckOptions opt;
  opt.max_coords_per_tensor = max_coords;
  opt.floor = std::max(1e-8, 1e4 * std::numeric_limits<double>::epsilon() * std::abs(f().item()) / opt.h);
  opt.retry_above = kCompositeLimit / 10;
  return grad_check(f, wrt, opt);
}

// Contracts the map's output with a fixed random tensor so every output
// coordinate contributes to the scalar being checked.
GradCheckResult check_map(const std::function<T()>& op, std::vector<T> wrt, Rng& rng, bool composite = false) {
  const T w = constant(rng, op().shape());
  const auto f = [&] { return sum(mul(op(), w)); };
  return composite ? composite_check(f, std::move(wrt)) : grad_check(f, wrt);
}

Shape broadcast_partner(Rng& rng, Index m, Index n) {
  switch (rng.uniform_index(4)) {
    case 0: return {m, n};
    case 1: return {n};
    case 2: return {m, 1};
    default: return {1};
  }
}

void primitive_checks(SuiteReport& report, Rng& rng, Index cases) {
  using Binary = T (*)(const T&, const T&);
  const std::vector<std::pair<const char*, Binary>> binaries{
      {"add", &add<double>}, {"sub", &sub<double>}, {"mul", &mul<double>}};
  for (const auto& [name, fn] : binaries) {
    Tally t{std::string("primitive ") + name, kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const Index m = pick(rng, 1, 4), n = pick(rng, 1, 4);
      T a = leaf(rng, {m, n}), b = leaf(rng, broadcast_partner(rng, m, n));
      if (rng.uniform() < 0.5) std::swap(a, b);
      t.add(check_map([&] { return fn(a, b); }, {a, b}, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive div", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const Index m = pick(rng, 1, 4), n = pick(rng, 1, 4);
      T a = leaf(rng, {m, n}), b = signed_leaf(rng, broadcast_partner(rng, m, n), 0.5, 2.0);
      t.add(check_map([&] { return div(a, b); }, {a, b}, rng));
    }
    report.checks.push_back(t.check());
  }

  struct UnaryCase {
    const char* name;
    std::function<T(const T&)> fn;
    std::function<T(Rng&, Shape)> input;
  };
  const auto plain = [](double lo, double hi) { return [lo, hi](Rng& r, Shape s) { return leaf(r, std::move(s), lo, hi); }; };
  const std::vector<UnaryCase> unaries{
      {"scale", [](const T& x) { return scale(x, -1.7); }, plain(-2, 2)},
      {"add_scalar", [](const T& x) { return add_scalar(x, 0.3); }, plain(-2, 2)},
      {"neg", [](const T& x) { return neg(x); }, plain(-2, 2)},
      {"sigmoid", [](const T& x) { return sigmoid(x); }, plain(-3, 3)},
      {"tanh", [](const T& x) { return tanh(x); }, plain(-3, 3)},
      {"softplus", [](const T& x) { return softplus(x); }, plain(-3, 3)},
      {"relu", [](const T& x) { return relu(x); }, [](Rng& r, Shape s) { return signed_leaf(r, std::move(s), 0.05, 2); }},
      {"exp", [](const T& x) { return exp(x); }, plain(-2, 2)},
      {"log", [](const T& x) { return log(x); }, plain(0.2, 3)},
      {"square", [](const T& x) { return square(x); }, plain(-2, 2)},
      {"sqrt", [](const T& x) { return sqrt(x); }, plain(0.2, 3)},
      {"clamp", [](const T& x) { return clamp(x, -0.5, 0.5); },
       [](Rng& r, Shape s) {
         const Index n = numel(s);
         Vec<double> v(n);
         for (Index i = 0; i < n; ++i) {
           do v[i] = r.uniform(-1.5, 1.5);
           while (std::abs(std::abs(v[i]) - 0.5) < 0.02);
         }
         return T::parameter(std::move(s), std::move(v));
       }},
      {"softmax", [](const T& x) { return softmax(x); }, plain(-2, 2)},
      {"sum", [](const T& x) { return sum(x); }, plain(-2, 2)},
      {"mean", [](const T& x) { return mean(x); }, plain(-2, 2)},
  };
  for (const auto& u : unaries) {
    Tally t{std::string("primitive ") + u.name, kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      Shape s;
      const Index rank = pick(rng, 1, 3);
      for (Index r = 0; r < rank; ++r) s.push_back(pick(rng, 1, 4));
      T x = u.input(rng, s);
      t.add(check_map([&] { return u.fn(x); }, {x}, rng));
    }
    report.checks.push_back(t.check());
  }

  {
    Tally t{"primitive sum(axis)", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      T x = leaf(rng, {pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)});
      const int axis = static_cast<int>(pick(rng, -3, 2));
      const bool keep = rng.uniform() < 0.5;
      t.add(check_map([&] { return sum(x, axis, keep); }, {x}, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive matmul", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const Index k = pick(rng, 1, 4), n = pick(rng, 1, 4);
      Shape as{pick(rng, 1, 4), k};
      if (rng.uniform() < 0.5) as.insert(as.begin(), pick(rng, 1, 3));
      T a = leaf(rng, as), b = leaf(rng, {k, n});
      t.add(check_map([&] { return matmul(a, b); }, {a, b}, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive bmm", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const Index B = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
      const bool ta = rng.uniform() < 0.5, tb = rng.uniform() < 0.5;
      T a = leaf(rng, ta ? Shape{B, k, m} : Shape{B, m, k});
      T b = leaf(rng, tb ? Shape{B, n, k} : Shape{B, k, n});
      t.add(check_map([&] { return bmm(a, b, ta, tb); }, {a, b}, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive reshape", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const Index a = pick(rng, 1, 4), b = pick(rng, 1, 4), d = pick(rng, 1, 4);
      T x = leaf(rng, {a, b, d});
      const Shape to = rng.uniform() < 0.5 ? Shape{a * b, d} : Shape{a * b * d};
      t.add(check_map([&] { return reshape(x, to); }, {x}, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive concat", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const int rank = static_cast<int>(pick(rng, 1, 3));
      const int axis = static_cast<int>(pick(rng, 0, rank - 1));
      Shape base;
      for (int r = 0; r < rank; ++r) base.push_back(pick(rng, 1, 3));
      std::vector<T> parts;
      for (Index p = 0, n = pick(rng, 1, 3); p < n; ++p) {
        Shape s = base;
        s[static_cast<std::size_t>(axis)] = pick(rng, 1, 3);
        parts.push_back(leaf(rng, s));
      }
      const int used = rng.uniform() < 0.5 ? axis : axis - rank;
      t.add(check_map([&] { return concat(parts, used); }, parts, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive slice", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      Shape s{pick(rng, 1, 4), pick(rng, 1, 5), pick(rng, 1, 4)};
      const int axis = static_cast<int>(pick(rng, 0, 2));
      const Index extent = s[static_cast<std::size_t>(axis)];
      const Index start = pick(rng, 0, extent - 1), len = pick(rng, 1, extent - start);
      T x = leaf(rng, s);
      t.add(check_map([&] { return slice(x, axis, start, len); }, {x}, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive cosine_scores", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      // W = 1 makes every cosine +-1, a constant
      const Index B = pick(rng, 1, 2), L = pick(rng, 1, 4), W = pick(rng, 2, 4), R = pick(rng, 1, 3);
      T m = leaf(rng, {B, L, W}), k = leaf(rng, {B, R, W});
      t.add(check_map([&] { return cosine_scores(m, k); }, {m, k}, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive conv2d", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const Conv2dGeometry g{pick(rng, 1, 2), pick(rng, 0, 1)};
      const Index kh = pick(rng, 1, 3), kw = pick(rng, 1, 3);
      const Index H = pick(rng, std::max<Index>(1, kh - 2 * g.padding), 5);
      const Index W = pick(rng, std::max<Index>(1, kw - 2 * g.padding), 5);
      const Index N = pick(rng, 1, 2), C = pick(rng, 1, 2), O = pick(rng, 1, 3);
      T x = leaf(rng, {N, C, H, W}), w = leaf(rng, {O, C, kh, kw});
      std::vector<T> wrt{x, w};
      T b;
      if (rng.uniform() < 0.5) wrt.push_back(b = leaf(rng, {O}));
      t.add(check_map([&] { return conv2d(x, w, b, g); }, wrt, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive conv_transpose2d", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const Conv2dGeometry g{pick(rng, 1, 2), pick(rng, 0, 1)};
      const Index kh = pick(rng, 1 + 2 * g.padding, 4), kw = pick(rng, 1 + 2 * g.padding, 4);
      const Index N = pick(rng, 1, 2), C = pick(rng, 1, 2), O = pick(rng, 1, 3);
      T x = leaf(rng, {N, C, pick(rng, 1, 4), pick(rng, 1, 4)}), w = leaf(rng, {C, O, kh, kw});
      std::vector<T> wrt{x, w};
      T b;
      if (rng.uniform() < 0.5) wrt.push_back(b = leaf(rng, {O}));
      t.add(check_map([&] { return conv_transpose2d(x, w, b, g); }, wrt, rng));
    }
    report.checks.push_back(t.check());
  }
  {
    Tally t{"primitive least_used_allocation", kPrimitiveLimit};
    for (Index c = 0; c < cases; ++c) {
      const Index rows = pick(rng, 1, 3), L = pick(rng, 1, 6);
      Vec<double> u(rows * L);
      // distinct usages, so the sort order is locally constant
      for (Index r = 0; r < rows; ++r) {
        for (Index i = 0; i < L; ++i) {
          bool close;
          do {
            u[r * L + i] = rng.uniform(0.05, 0.95);
            close = false;
            for (Index j = 0; j < i; ++j) close |= std::abs(u[r * L + i] - u[r * L + j]) < 1e-2;
          } while (close);
        }
      }
      T x = T::parameter({rows, L}, u);
      t.add(check_map([&] { return least_used_allocation(x); }, {x}, rng));
    }
    report.checks.push_back(t.check());
  }
}

void net_checks(SuiteReport& report, Rng& rng) {
  const auto params_and = [](const ParameterStore<double>& store, std::vector<T> extra) {
    std::vector<T> all = store.tensors();
    all.insert(all.end(), extra.begin(), extra.end());
    return all;
  };
  {
    ParameterStore<double> store;
    Linear<double> lin(store, "lin", 4, 3, rng);
    T x = leaf(rng, {2, 4});
    Tally t{"net linear", kCompositeLimit};
    t.add(check_map([&] { return lin(x); }, params_and(store, {x}), rng, true));
    report.checks.push_back(t.check());
  }
  {
    ParameterStore<double> store;
    Mlp<double> mlp(store, "mlp", MlpSpec{4, {5, 6, 3}, {Activation::tanh, Activation::relu, Activation::identity}}, rng);
    T x = leaf(rng, {3, 4});
    Tally t{"net mlp", kCompositeLimit};
    t.add(check_map([&] { return mlp(x); }, params_and(store, {x}), rng, true));
    report.checks.push_back(t.check());
  }
  {
    ParameterStore<double> store;
    Lstm<double> lstm(store, "lstm", 3, 4, rng);
    T h0 = leaf(rng, {2, 4}), c0 = leaf(rng, {2, 4});
    std::vector<T> xs;
    for (int i = 0; i < 3; ++i) xs.push_back(leaf(rng, {2, 3}));
    Tally t{"net lstm (3 chained steps)", kCompositeLimit};
    std::vector<T> wrt = params_and(store, {h0, c0});
    wrt.insert(wrt.end(), xs.begin(), xs.end());
    t.add(check_map(
        [&] {
          LstmState<double> s{h0, c0};
          std::vector<T> outs;
          for (const auto& x : xs) {
            s = lstm.step(s, x);
            outs.push_back(s.h);
          }
          outs.push_back(s.c);
          return concat(outs, 1);
        },
        wrt, rng, true));
    report.checks.push_back(t.check());
  }
  for (CodecKind kind : {CodecKind::small_conv, CodecKind::mlp}) {
    const std::string tag = kind == CodecKind::mlp ? "mlp" : "small-conv";
    EncoderSpec spec;
    spec.kind = kind;
    spec.image = {1, 8, 8};
    spec.features = 6;
    spec.hidden = {10};
    {
      ParameterStore<double> store;
      Encoder<double> enc(store, "enc", spec, rng);
      T x = leaf(rng, {2, 64}, 0.0, 1.0);
      Tally t{"net encoder " + tag, kCompositeLimit};
      t.add(check_map([&] { return enc(x); }, params_and(store, {x}), rng, true));
      report.checks.push_back(t.check());
    }
    {
      ParameterStore<double> store;
      DecoderSpec d{spec, 3, kind == CodecKind::mlp ? 0 : 4};
      Decoder<double> dec(store, "dec", d, rng);
      T z = leaf(rng, {2, 3});
      T e = d.extra > 0 ? leaf(rng, {2, d.extra}) : T();
      Tally t{"net decoder " + tag, kCompositeLimit};
      t.add(check_map([&] { return dec(z, e); }, params_and(store, d.extra > 0 ? std::vector<T>{z, e} : std::vector<T>{z}),
                      rng, true));
      report.checks.push_back(t.check());
    }
    {
      ParameterStore<double> store;
      Encoder<double> enc(store, "enc", spec, rng);
      Decoder<double> dec(store, "dec", DecoderSpec{spec, spec.features, 0}, rng);
      T x = leaf(rng, {2, 64}, 0.0, 1.0);
      Tally t{"net decode(encode) " + tag, kCompositeLimit};
      t.add(check_map([&] { return dec(enc(x)); }, params_and(store, {x}), rng, true));
      report.checks.push_back(t.check());
    }
  }
}

MemoryConfig small_memory(MemoryKind kind) {
  MemoryConfig m;
  m.kind = kind;
  m.latent = 3;
  m.context = 2;
  m.features = 4;
  m.hidden = 5;
  m.heads = 2;
  m.slots = 4;
  return m;
}

// Sums the state tensors that feed later steps, so their gradients are
// checked too.
T state_tail(const MemoryState<double>& state) {
  return std::visit(
      [](const auto& s) -> T {
        using St = std::decay_t<decltype(s)>;
        T acc = sum(s.controller.c);
        if constexpr (std::is_same_v<St, NtmState<double>> || std::is_same_v<St, LruState<double>> ||
                      std::is_same_v<St, DncState<double>>) {
          acc = add(acc, sum(s.memory));
          acc = add(acc, sum(square(s.read_weights)));
        }
        if constexpr (std::is_same_v<St, DncState<double>>) {
          acc = add(acc, sum(square(s.links)));
          acc = add(acc, sum(s.usage));
        }
        return acc;
      },
      state);
}

void memory_checks(SuiteReport& report, Rng& rng) {
  for (MemoryKind kind : {MemoryKind::vrnn, MemoryKind::introspection, MemoryKind::ntm, MemoryKind::lru, MemoryKind::dnc}) {
    ParameterStore<double> store;
    const MemoryConfig cfg = small_memory(kind);
    MemorySystem<double> mem(store, "memory", cfg, rng);
    const Index B = 2, steps = 4;
    std::vector<T> z, feats, ctx;
    for (Index t = 0; t < steps; ++t) {
      z.push_back(leaf(rng, {B, cfg.latent}, -1.5, 1.5));
      feats.push_back(leaf(rng, {B, cfg.features}));
      ctx.push_back(leaf(rng, {B, cfg.context}));
    }
    std::vector<T> wrt = store.tensors();
    for (Index t = 0; t < steps; ++t) {
      wrt.push_back(z[static_cast<std::size_t>(t)]);
      wrt.push_back(ctx[static_cast<std::size_t>(t)]);
      if (kind == MemoryKind::vrnn) wrt.push_back(feats[static_cast<std::size_t>(t)]);
    }
    Tally t{"memory " + to_string(kind) + " step", kCompositeLimit};
    t.add(check_map(
        [&] {
          MemoryState<double> state = mem.initial(B);
          std::vector<T> outs;
          for (Index i = 0; i < steps; ++i) {
            const auto u = static_cast<std::size_t>(i);
            MemoryStep<double> st = mem.step(state, {z[u], feats[u], ctx[u], i > 0});
            outs.push_back(reshape(st.psi, {B * cfg.psi_width()}));
            state = std::move(st.state);
          }
          outs.push_back(reshape(state_tail(state), {1}));
          return concat(outs, 0);
        },
        wrt, rng, true));
    report.checks.push_back(t.check());
  }
}

void free_energy_checks(SuiteReport& report, Rng& rng) {
  for (MemoryKind kind : {MemoryKind::vrnn, MemoryKind::introspection, MemoryKind::ntm, MemoryKind::lru, MemoryKind::dnc}) {
    ModelConfig mc;
    mc.memory = small_memory(kind);
    mc.memory.context = 0;
    mc.memory.features = 6;
    mc.encoder.image = {1, 8, 8};
    mc.encoder.features = 6;
    mc.head_hidden = 5;
    Gtmm<double> model(mc, rng.next_u64());
    const Index B = 2, T_ = 3;
    std::vector<T> frames, noise;
    for (Index t = 0; t < T_; ++t) {
      frames.push_back(constant(rng, {B, 64}, 0.0, 1.0));
      Vec<double> e(B * mc.latent());
      for (Index i = 0; i < e.size(); ++i) e[i] = rng.normal();
      noise.push_back(T::constant({B, mc.latent()}, e));
    }
    std::vector<T> wrt = model.parameters().tensors();
    Tally t{"free energy " + to_string(kind), kCompositeLimit};
    t.add(composite_check([&] { return model.sequence_elbo(frames, {}, noise).loss; }, wrt));
    report.checks.push_back(t.check());
  }
}

}  // namespace

SuiteReport gradient_suite(std::uint64_t seed, Index cases_per_primitive) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "gradient suite";
  Rng rng = seeded_rng(seed, "verify-gradients", 0);
  primitive_checks(report, rng, cases_per_primitive);
  net_checks(report, rng);
  memory_checks(report, rng);
  free_energy_checks(report, rng);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace gtmm
