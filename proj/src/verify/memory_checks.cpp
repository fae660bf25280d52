#include "gtmm/verify/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>

namespace gtmm {

namespace {

using T = Tensor<double>;

constexpr double kSimplexTol = 1e-6;
constexpr double kBoundTol = 1e-9;
constexpr Index kEpisode = 40;  // steps between state resets

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

T cut(const T& t) { return t.defined() ? t.detach() : t; }

void cut(LstmState<double>& s) {
  s.h = cut(s.h);
  s.c = cut(s.c);
}

// Keeps one step's graph alive at a time.
void cut(MemoryState<double>& state) {
  std::visit(
      [](auto& s) {
        using St = std::decay_t<decltype(s)>;
        cut(s.controller);
        if constexpr (std::is_same_v<St, IntrospectionState<double>>) {
          for (auto& r : s.rows) r = cut(r);
          s.read_weights = cut(s.read_weights);
        } else if constexpr (!std::is_same_v<St, VrnnState<double>>) {
          s.memory = cut(s.memory);
          s.read_weights = cut(s.read_weights);
          s.write_weights = cut(s.write_weights);
          s.reads = cut(s.reads);
          if constexpr (std::is_same_v<St, LruState<double>>) s.usage = cut(s.usage);
          if constexpr (std::is_same_v<St, DncState<double>>) {
            s.usage = cut(s.usage);
            s.precedence = cut(s.precedence);
            s.links = cut(s.links);
          }
        }
      },
      state);
}

/// Running maximum with a short description of where it happened.
struct Worst {
  double value = 0.0;
  std::string where;
  void see(double v, const std::string& w) {
    if (v > value || (std::isnan(v) && !std::isnan(value))) {
      value = v;
      where = w;
    }
  }
};

std::string at_step(Index step) { return "step " + std::to_string(step); }

// Each row along the last axis: nonnegative and summing to 1 (or at most 1).
void see_weights(Worst& w, const T& weights, bool sub_simplex, Index step) {
  if (!weights.defined() || weights.size() == 0) return;
  const auto m = weights.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    const double s = m.row(r).sum();
    double dev = sub_simplex ? std::max(0.0, s - 1.0) : std::abs(s - 1.0);
    dev = std::max(dev, -m.row(r).minCoeff());
    w.see(dev, at_step(step));
  }
}

// reads [B, R * W] against the rows of memory [B, L, W]; with sub-simplex
// weights the zero vector joins the hull
void see_reads(Worst& w, const T& reads, const T& memory, Index R, bool with_zero, Index step) {
  const Index B = memory.dim(0), L = memory.dim(1), W = memory.dim(2);
  const auto& m = memory.value();
  const auto& rd = reads.value();
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < W; ++c) {
      double lo = with_zero ? 0.0 : std::numeric_limits<double>::infinity();
      double hi = with_zero ? 0.0 : -std::numeric_limits<double>::infinity();
      for (Index i = 0; i < L; ++i) {
        lo = std::min(lo, m[(b * L + i) * W + c]);
        hi = std::max(hi, m[(b * L + i) * W + c]);
      }
      for (Index r = 0; r < R; ++r) {
        const double v = rd[b * R * W + r * W + c];
        w.see(std::max({0.0, lo - v, v - hi}), at_step(step));
      }
    }
  }
}

MemoryConfig invariant_config(MemoryKind kind) {
  MemoryConfig c;
  c.kind = kind;
  c.latent = 3;
  c.hidden = 8;
  c.heads = 2;
  c.slots = 5;
  c.features = 4;
  return c;
}

void randomize(ParameterStore<double>& store, Rng& rng) {
  for (const auto& e : store.entries()) {
    T t = e.tensor;
    for (Index i = 0; i < t.size(); ++i) t.mutable_value()[i] = rng.uniform(-1.5, 1.5);
  }
}

T random_tensor(Shape shape, Rng& rng, double scale) {
  Index n = 1;
  for (Index d : shape) n *= d;
  Vec<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return T::constant(std::move(shape), std::move(v));
}

Check make_check(const std::string& name, const Worst& w, double limit) {
  return {name, w.value, limit, w.value <= limit, w.where};
}

void introspection_checks(SuiteReport& report, std::uint64_t seed, Index steps) {
  const MemoryConfig cfg = invariant_config(MemoryKind::introspection);
  const Index B = 2, K = cfg.latent, R = cfg.heads, L = cfg.slots;
  ParameterStore<double> store;
  Rng init = seeded_rng(seed, "verify-memory-init", 1);
  MemorySystem<double> mem(store, "memory", cfg, init);
  Rng rng = seeded_rng(seed, "verify-memory", 1);
  const T gates = store.get("memory.gates");

  Worst simplex, fifo, hull, empty_psi;
  MemoryState<double> state;
  std::vector<std::deque<std::vector<double>>> written(B);
  for (Index step = 0; step < steps; ++step) {
    const bool fresh = step % kEpisode == 0;
    if (fresh) {
      randomize(store, rng);
      state = mem.initial(B);
      for (auto& d : written) d.clear();
    }
    MemoryInput<double> in;
    in.z_prev = random_tensor({B, K}, rng, 2.0);
    in.x_features = random_tensor({B, cfg.features}, rng, 1.0);
    in.write = !fresh;
    MemoryStep<double> out = mem.step(state, in);
    const auto& s = std::get<IntrospectionState<double>>(out.state);

    if (in.write) {
      for (Index b = 0; b < B; ++b) {
        const auto& z = in.z_prev.value();
        written[static_cast<std::size_t>(b)].emplace_back(z.data() + b * K, z.data() + (b + 1) * K);
        if (static_cast<Index>(written[static_cast<std::size_t>(b)].size()) > L) {
          written[static_cast<std::size_t>(b)].pop_front();
        }
      }
    }
    // FIFO: the written rows, read from the oldest at the cursor onwards,
    // are exactly the latest min(n, L) latents in order
    const Index fill = static_cast<Index>(written[0].size());
    if (s.fill != fill) fifo.see(1.0, at_step(step) + ": fill mismatch");
    for (Index b = 0; b < B && s.fill == fill; ++b) {
      const auto& d = written[static_cast<std::size_t>(b)];
      for (Index j = 0; j < fill; ++j) {
        const Index slot = fill < L ? j : (s.cursor + j) % L;
        const auto& row = s.rows[static_cast<std::size_t>(slot)].value();
        for (Index k = 0; k < K; ++k) {
          fifo.see(std::abs(row[b * K + k] - d[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)]),
                   at_step(step));
        }
      }
    }

    const auto& psi = out.psi.value();
    if (fill == 0) {
      empty_psi.see(psi.cwiseAbs().maxCoeff(), at_step(step));
    } else {
      see_weights(simplex, s.read_weights, false, step);
      // undo the gates to recover each head's read, then bound it by the rows
      const auto& g = gates.value();
      for (Index b = 0; b < B; ++b) {
        const auto& d = written[static_cast<std::size_t>(b)];
        for (Index r = 0; r < R; ++r) {
          for (Index k = 0; k < K; ++k) {
            double lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (const auto& z : d) {
              lo = std::min(lo, z[static_cast<std::size_t>(k)]);
              hi = std::max(hi, z[static_cast<std::size_t>(k)]);
            }
            const double phi = psi[b * R * K + r * K + k] * (1.0 + std::exp(-g[r * K + k]));
            hull.see(std::max({0.0, lo - phi, phi - hi}) / std::max(1.0, hi - lo), at_step(step));
          }
        }
      }
    }
    state = std::move(out.state);
    cut(state);
  }
  report.checks.push_back(make_check("introspection read weights on simplex", simplex, kSimplexTol));
  report.checks.push_back(make_check("introspection FIFO contents", fifo, 0.0));
  report.checks.push_back(make_check("introspection reads inside row hull", hull, kBoundTol));
  report.checks.push_back(make_check("introspection empty buffer gives zero context", empty_psi, 0.0));
}

void content_checks(SuiteReport& report, MemoryKind kind, std::uint64_t seed, Index steps) {
  const MemoryConfig cfg = invariant_config(kind);
  const Index B = 2, K = cfg.latent, R = cfg.heads;
  const bool dnc = kind == MemoryKind::dnc;
  ParameterStore<double> store;
  const auto idx = static_cast<std::uint64_t>(kind);
  Rng init = seeded_rng(seed, "verify-memory-init", idx);
  MemorySystem<double> mem(store, "memory", cfg, init);
  Rng rng = seeded_rng(seed, "verify-memory", idx);
  const std::string name = to_string(kind);

  Worst simplex, hull, links_range, diag, row_sum, col_sum, usage;
  MemoryState<double> state;
  for (Index step = 0; step < steps; ++step) {
    const bool fresh = step % kEpisode == 0;
    if (fresh) {
      randomize(store, rng);
      state = mem.initial(B);
    }
    MemoryInput<double> in;
    in.z_prev = random_tensor({B, K}, rng, 2.0);
    in.x_features = random_tensor({B, cfg.features}, rng, 1.0);
    in.write = !fresh;
    MemoryStep<double> out = mem.step(state, in);

    std::visit(
        [&](const auto& s) {
          using St = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<St, NtmState<double>> || std::is_same_v<St, LruState<double>> ||
                        std::is_same_v<St, DncState<double>>) {
            see_weights(simplex, s.read_weights, dnc, step);
            if (in.write) see_weights(simplex, s.write_weights, dnc, step);
            see_reads(hull, s.reads, s.memory, R, dnc, step);
            if constexpr (std::is_same_v<St, LruState<double>>) {
              const double bound = (R + 1) / (1.0 - cfg.usage_decay);
              const auto& u = s.usage.value();
              usage.see(std::max({0.0, -u.minCoeff(), u.maxCoeff() - bound}), at_step(step));
            }
            if constexpr (std::is_same_v<St, DncState<double>>) {
              const Index L = cfg.slots;
              const auto& tl = s.links.value();
              for (Index b = 0; b < B; ++b) {
                for (Index i = 0; i < L; ++i) {
                  double rs = 0.0, cs = 0.0;
                  for (Index j = 0; j < L; ++j) {
                    const double v = tl[(b * L + i) * L + j];
                    links_range.see(std::max({0.0, -v, v - 1.0}), at_step(step));
                    rs += v;
                    cs += tl[(b * L + j) * L + i];
                  }
                  diag.see(std::abs(tl[(b * L + i) * L + i]), at_step(step));
                  row_sum.see(std::max(0.0, rs - 1.0), at_step(step));
                  col_sum.see(std::max(0.0, cs - 1.0), at_step(step));
                }
              }
              const auto& u = s.usage.value();
              usage.see(std::max({0.0, -u.minCoeff(), u.maxCoeff() - 1.0}), at_step(step));
            }
          }
        },
        out.state);
    state = std::move(out.state);
    cut(state);
  }
  report.checks.push_back(
      make_check(name + (dnc ? " weights on sub-simplex" : " weights on simplex"), simplex, kSimplexTol));
  report.checks.push_back(make_check(name + " reads inside row hull", hull, kBoundTol));
  if (kind == MemoryKind::lru) report.checks.push_back(make_check("lru usage within decay bound", usage, 0.0));
  if (dnc) {
    report.checks.push_back(make_check("dnc usage in [0, 1]", usage, 0.0));
    report.checks.push_back(make_check("dnc link entries in [0, 1]", links_range, 0.0));
    report.checks.push_back(make_check("dnc link diagonal", diag, 0.0));
    report.checks.push_back(make_check("dnc link row sums", row_sum, kSimplexTol));
    report.checks.push_back(make_check("dnc link column sums", col_sum, kSimplexTol));
  }
}

void vrnn_checks(SuiteReport& report, std::uint64_t seed, Index steps) {
  const MemoryConfig cfg = invariant_config(MemoryKind::vrnn);
  const Index B = 2;
  ParameterStore<double> store;
  Rng init = seeded_rng(seed, "verify-memory-init", 0);
  MemorySystem<double> mem(store, "memory", cfg, init);
  Rng rng = seeded_rng(seed, "verify-memory", 0);
  Worst width, bounded;
  MemoryState<double> state;
  for (Index step = 0; step < steps; ++step) {
    if (step % kEpisode == 0) {
      randomize(store, rng);
      state = mem.initial(B);
    }
    MemoryInput<double> in;
    in.z_prev = random_tensor({B, cfg.latent}, rng, 2.0);
    in.x_features = random_tensor({B, cfg.features}, rng, 1.0);
    in.write = step % kEpisode != 0;
    MemoryStep<double> out = mem.step(state, in);
    width.see(out.psi.dim(1) == cfg.hidden ? 0.0 : 1.0, at_step(step));
    // psi is h = o * tanh(c)
    bounded.see(std::max(0.0, out.psi.value().cwiseAbs().maxCoeff() - 1.0), at_step(step));
    state = std::move(out.state);
    cut(state);
  }
  report.checks.push_back(make_check("vrnn context width", width, 0.0));
  report.checks.push_back(make_check("vrnn context within [-1, 1]", bounded, 0.0));
}

// Random usage vectors with repeated minima: the largest allocation must go
// to the lowest-index least-used slot, and 0/1 usage must give a one-hot.
void allocation_checks(SuiteReport& report, std::uint64_t seed, Index cases) {
  Rng rng = seeded_rng(seed, "verify-allocation", 0);
  constexpr Index L = 6;
  Worst wrong_slot, not_one_hot;
  for (Index n = 0; n < cases; ++n) {
    const bool binary = n % 2 == 0;
    Vec<double> u(L);
    const double low = binary ? 0.0 : rng.uniform(0.0, 0.5);
    for (Index i = 0; i < L; ++i) {
      if (binary) {
        u[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
      } else {
        u[i] = rng.uniform() < 0.4 ? low : rng.uniform(low + 0.05, 1.0);
      }
    }
    if (binary && u.minCoeff() > 0.0) u[rng.uniform_index(L)] = 0.0;
    if (!binary && u.minCoeff() > low) u[rng.uniform_index(L)] = low;
    Index expect = 0;
    while (u[expect] != u.minCoeff()) ++expect;
    const T a = least_used_allocation<double>(T::constant({1, L}, u));
    Index got = 0;
    a.value().maxCoeff(&got);
    wrong_slot.see(got == expect ? 0.0 : 1.0, "case " + std::to_string(n));
    if (binary) {
      Vec<double> one_hot = Vec<double>::Zero(L);
      one_hot[expect] = 1.0;
      not_one_hot.see((a.value() - one_hot).cwiseAbs().maxCoeff(), "case " + std::to_string(n));
    }
  }
  report.checks.push_back(make_check("least-used tie-break toward lowest index", wrong_slot, 0.0));
  report.checks.push_back(make_check("least-used one-hot on 0/1 usage", not_one_hot, kSimplexTol));
}

}  // namespace

SuiteReport memory_invariant_suite(std::uint64_t seed, Index steps) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "memory invariants";
  vrnn_checks(report, seed, steps);
  introspection_checks(report, seed, steps);
  for (MemoryKind kind : {MemoryKind::ntm, MemoryKind::lru, MemoryKind::dnc}) content_checks(report, kind, seed, steps);
  allocation_checks(report, seed, steps);
  report.seconds = seconds_since(t0);
  return report;
}

}  // namespace gtmm
