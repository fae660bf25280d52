#include "gtmm/verify/verify.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>

namespace gtmm {

namespace {

constexpr double kMinP = 1e-3;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Pearson statistic and degrees of freedom, accumulated over groups that
/// each have their own expected distribution.
struct ChiSquare {
  double stat = 0.0;
  double dof = 0.0;

  // counts against a uniform distribution over counts.size() bins
  void add_uniform(const std::vector<double>& counts) {
    if (counts.size() < 2) return;
    double n = 0.0;
    for (double c : counts) n += c;
    if (n == 0.0) return;
    const double e = n / static_cast<double>(counts.size());
    for (double c : counts) stat += (c - e) * (c - e) / e;
    dof += static_cast<double>(counts.size() - 1);
  }

  double p_value() const {
    if (dof < 1.0) return 0.0;
    return boost::math::cdf(boost::math::complement(boost::math::chi_squared(dof), stat));
  }
};

Check p_check(const std::string& name, const ChiSquare& chi) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "chi2 %.1f on %.0f dof", chi.stat, chi.dof);
  const double p = chi.p_value();
  return {name, p, kMinP, p > kMinP, buf};
}

struct Generator {
  std::string name;
  TaskConfig cfg;
  const DatasetSource* ds;
};

}  // namespace

SuiteReport task_validator_suite(std::uint64_t seed, Index samples) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "task validators";

  const ImageDims dims{1, 12, 12};
  const DatasetSource digits = synth_glyphs(10, 20, dims, stream_key(seed, "verify-digits", 0));
  const DatasetSource alphabets = synth_alphabets(4, 6, 5, dims, stream_key(seed, "verify-alphabets", 0));

  const auto config = [&](TaskKind kind) {
    TaskConfig c;
    c.kind = kind;
    c.l = 12;
    c.k = 5;
    c.image = dims;
    if (kind == TaskKind::rotation) c.image = {1, 8, 8};
    return c;
  };
  std::vector<Generator> gens{
      {"perfect recall", config(TaskKind::perfect_recall), &digits},
      {"parity recall", config(TaskKind::parity_recall), &digits},
      {"one-shot train", config(TaskKind::one_shot), &alphabets},
      {"one-shot test", config(TaskKind::one_shot), &alphabets},
      {"dynamic dependency", config(TaskKind::dynamic_dependency), &digits},
      {"similarity recall", config(TaskKind::similarity_recall), &digits},
      {"map walk", config(TaskKind::mnist_map), &digits},
      {"rotation", config(TaskKind::rotation), &digits},
  };
  gens[3].cfg.split = Split::test;

  for (std::size_t g = 0; g < gens.size(); ++g) {
    const auto& gen = gens[g];
    const TaskConfig& cfg = gen.cfg;
    const Index l = cfg.l, k = cfg.k;
    Index invalid = 0;
    std::string first;

    // tallies for the distribution checks
    std::map<int, double> prefix_labels;
    std::vector<double> offsets(static_cast<std::size_t>(std::max<Index>(l - k, 1)), 0.0);
    std::vector<double> starts(static_cast<std::size_t>(cfg.grid * cfg.grid), 0.0);
    std::map<Index, std::vector<double>> moves;  // cell -> counts per legal move
    Index split_leaks = 0;
    double max_ratio = 0.0;

    for (Index i = 0; i < samples; ++i) {
      const SequenceSample s = generate_sample(*gen.ds, cfg, stream_key(seed, "verify-tasks-" + gen.name, i));
      if (std::string e = validate_sample(s, cfg); !e.empty()) {
        if (invalid++ == 0) first = "sample " + std::to_string(i) + ": " + e;
        continue;
      }
      switch (cfg.kind) {
        case TaskKind::perfect_recall:
        case TaskKind::parity_recall:
        case TaskKind::dynamic_dependency:
          for (Index t = 0; t < l; ++t) prefix_labels[s.labels[static_cast<std::size_t>(t)]] += 1.0;
          break;
        case TaskKind::one_shot:
          for (Index t = 0; t < l; ++t) {
            const int c = s.labels[static_cast<std::size_t>(t)];
            prefix_labels[c] += 1.0;
            if (gen.ds->holdout[static_cast<std::size_t>(c)] != (cfg.split == Split::test)) ++split_leaks;
          }
          break;
        case TaskKind::similarity_recall:
          offsets[static_cast<std::size_t>(s.offset)] += 1.0;
          break;
        case TaskKind::mnist_map: {
          const int gsz = static_cast<int>(cfg.grid);
          starts[static_cast<std::size_t>(s.cells[0] * gsz + s.cells[1])] += 1.0;
          for (Index t = 1; t < s.T; ++t) {
            const int r = s.cells[static_cast<std::size_t>(2 * (t - 1))];
            const int c = s.cells[static_cast<std::size_t>(2 * (t - 1) + 1)];
            // legal moves in up, down, left, right order
            std::vector<int> legal;
            if (r > 0) legal.push_back(0);
            if (r < gsz - 1) legal.push_back(1);
            if (c > 0) legal.push_back(2);
            if (c < gsz - 1) legal.push_back(3);
            auto& counts = moves[r * gsz + c];
            counts.resize(legal.size(), 0.0);
            const auto a = s.action(t);
            const int m = static_cast<int>(std::max_element(a.begin(), a.end()) - a.begin());
            const auto pos = std::find(legal.begin(), legal.end(), m);
            if (pos != legal.end()) counts[static_cast<std::size_t>(pos - legal.begin())] += 1.0;
          }
          break;
        }
        case TaskKind::rotation: {
          double lo = 1e300, hi = 0.0;
          for (Index t = 1; t < s.T; ++t) {
            const double d = s.actions[static_cast<std::size_t>(t)];
            lo = std::min(lo, d);
            hi = std::max(hi, d);
          }
          max_ratio = std::max(max_ratio, lo > 0.0 ? hi / lo : 1e300);
          break;
        }
      }
    }
    report.checks.push_back({gen.name + " samples pass the validator", static_cast<double>(invalid), 0.0, invalid == 0,
                             first});

    switch (cfg.kind) {
      case TaskKind::perfect_recall:
      case TaskKind::parity_recall:
      case TaskKind::dynamic_dependency:
      case TaskKind::one_shot: {
        const std::vector<int> pool = gen.ds->classes_in(
            cfg.kind == TaskKind::one_shot ? std::optional<bool>(cfg.split == Split::test) : std::nullopt);
        std::vector<double> counts;
        for (int c : pool) counts.push_back(prefix_labels[c]);
        ChiSquare chi;
        chi.add_uniform(counts);
        report.checks.push_back(p_check(gen.name + " prefix classes uniform (p)", chi));
        if (cfg.kind == TaskKind::one_shot) {
          report.checks.push_back({gen.name + " classes stay in their split", static_cast<double>(split_leaks), 0.0,
                                   split_leaks == 0, ""});
        }
        break;
      }
      case TaskKind::similarity_recall: {
        ChiSquare chi;
        chi.add_uniform(offsets);
        report.checks.push_back(p_check(gen.name + " offset uniform (p)", chi));
        break;
      }
      case TaskKind::mnist_map: {
        ChiSquare start, move;
        start.add_uniform(starts);
        for (const auto& [cell, counts] : moves) move.add_uniform(counts);
        report.checks.push_back(p_check(gen.name + " start cell uniform (p)", start));
        report.checks.push_back(p_check(gen.name + " moves uniform over legal moves (p)", move));
        break;
      }
      case TaskKind::rotation:
        report.checks.push_back({gen.name + " angular step ratio", max_ratio, 1.5, max_ratio > 1.5,
                                 "largest over smallest increment, must exceed the limit"});
        break;
    }
  }
  report.seconds = seconds_since(t0);
  return report;
}

}  // namespace gtmm
