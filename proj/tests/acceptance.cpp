// Acceptance runner: one PASS/FAIL line per criterion. `--only <name>`
// runs a single criterion; ctest registers each one separately.

#include "gtmm/cli/cli.hpp"
#include "gtmm/harness/train.hpp"
#include "gtmm/verify/verify.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

using namespace gtmm;
namespace fs = std::filesystem;

namespace {

// pinned tolerances and budgets
constexpr std::uint64_t kSeed = 1;
constexpr double kGradientBudget = 300.0;
constexpr Index kKlPairs = 50;
constexpr Index kKlSamples = 1000000;
constexpr double kKlBudget = 60.0;
constexpr Index kMemorySteps = 10000;
constexpr double kMemoryBudget = 120.0;
constexpr Index kTaskSamples = 1000;
constexpr double kTaskBudget = 120.0;
constexpr int kReplicas = 3;
constexpr Index kTrendSteps = 5000;
constexpr double kRecallRatio = 0.5;
constexpr int kRecallReplicasNeeded = 2;
constexpr double kParityRatio = 0.7;
constexpr double kTrendBudget = 45 * 60.0;

struct Outcome {
  bool passed = false;
  std::string summary;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Suite criteria pass when every check passes inside the runtime budget
// (budget 0: no runtime bound).
Outcome from_suite(const SuiteReport& r, double budget) {
  int failed = 0;
  for (const Check& c : r.checks) {
    if (c.passed) continue;
    ++failed;
    std::cout << "    failed check: " << c.name << " " << c.value << " (limit " << c.limit << ") " << c.detail << "\n";
  }
  Outcome o;
  o.passed = r.passed() && (budget <= 0 || r.seconds < budget);
  o.summary = std::to_string(r.checks.size()) + " checks, " + std::to_string(failed) + " failed";
  if (r.checks.size() == 1) o.summary += " (" + fmt("%.3g", r.checks[0].value) + " vs " + fmt("%.3g", r.checks[0].limit) + ")";
  o.summary += ", " + fmt("%.1f", r.seconds) + " s";
  if (budget > 0) o.summary += " (budget " + fmt("%.0f", budget) + " s)";
  return o;
}

TrainConfig trend_config(MemoryKind model, TaskKind task, int replica) {
  TrainConfig c;
  c.model = model;
  c.task.kind = task;
  c.task.l = 10;
  c.task.k = 5;
  c.task.image = {1, 8, 8};
  c.latent = 8;
  c.hidden = 64;
  c.heads = 5;
  c.slots = 15;
  c.lr = 1e-3;
  c.batch = 10;
  c.steps = kTrendSteps;
  c.clip_norm = 10.0;
  c.seed = kSeed;
  c.replica = replica;
  c.eval_every = 500;
  c.eval_batches = 10;
  c.wall_clock = false;
  return c;
}

// Final-row recall ratio of each replica; runs land in acceptance_runs/.
std::vector<double> trend_ratios(MemoryKind model, TaskKind task) {
  std::vector<double> out;
  for (int r = 0; r < kReplicas; ++r) {
    const TrainConfig cfg = trend_config(model, task, r);
    const fs::path dir = fs::path("acceptance_runs") / (to_string(task) + "-" + to_string(model) + "-r" + std::to_string(r));
    fs::remove_all(dir);
    const TrainResult res = train(cfg, dir);
    out.push_back(recall_ratio(res.rows.back().kl, cfg.task.l, cfg.task.k));
    std::cout << "    " << to_string(model) << " replica " << r << ": ratio " << fmt("%.3f", out.back()) << "\n"
              << std::flush;
  }
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.3f", x);
  return s;
}

Outcome recall_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto intro = trend_ratios(MemoryKind::introspection, TaskKind::perfect_recall);
  const auto vrnn = trend_ratios(MemoryKind::vrnn, TaskKind::perfect_recall);
  int below = 0;
  for (double r : intro) below += r < kRecallRatio;
  const double secs = seconds_since(t0);
  Outcome o;
  o.passed = below >= kRecallReplicasNeeded && mean(vrnn) > mean(intro) && secs < kTrendBudget;
  o.summary = "introspection ratios [" + list(intro) + "], " + std::to_string(below) + "/" +
              std::to_string(kReplicas) + " below " + fmt("%.2f", kRecallRatio) + " (need " +
              std::to_string(kRecallReplicasNeeded) + "); vrnn mean " + fmt("%.3f", mean(vrnn)) + " [" + list(vrnn) +
              "] vs introspection mean " + fmt("%.3f", mean(intro)) + "; " + fmt("%.0f", secs) + " s";
  return o;
}

Outcome parity_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto intro = trend_ratios(MemoryKind::introspection, TaskKind::parity_recall);
  const auto vrnn = trend_ratios(MemoryKind::vrnn, TaskKind::parity_recall);
  const double secs = seconds_since(t0);
  Outcome o;
  o.passed = mean(intro) < kParityRatio && mean(vrnn) < kParityRatio && secs < kTrendBudget;
  o.summary = "mean ratio introspection " + fmt("%.3f", mean(intro)) + " [" + list(intro) + "], vrnn " +
              fmt("%.3f", mean(vrnn)) + " [" + list(vrnn) + "], both must be < " + fmt("%.2f", kParityRatio) + "; " +
              fmt("%.0f", secs) + " s";
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  Outcome o;
  o.passed = true;
  int same = 0;
  for (const char* model : {"vrnn", "introspection", "ntm", "lru", "dnc"}) {
    std::string first;
    for (const char* run : {"a", "b"}) {
      const fs::path dir = fs::path("acceptance_runs") / "determinism" / model / run;
      fs::remove_all(dir);
      std::ostringstream sink;
      const int code = run_cli({"train", "--model", model, "--task", "perfect-recall", "--l", "6", "--k", "3",
                                "--hidden", "16", "--features", "16", "--head-hidden", "16", "--heads", "2",
                                "--latent", "4", "--batch", "4", "--steps", "40", "--eval-every", "10",
                                "--per-class", "5", "--seed", "7", "--wall-clock", "off", "--quiet", "--out",
                                dir.string()},
                               sink, std::cerr);
      const std::string csv = slurp(dir / "metrics.csv");
      if (code != 0 || csv.empty()) {
        o.passed = false;
        std::cout << "    " << model << ": train exited " << code << "\n";
      } else if (first.empty()) {
        first = csv;
      } else if (csv == first) {
        ++same;
      } else {
        o.passed = false;
        std::cout << "    " << model << ": metrics.csv differs between runs\n";
      }
    }
  }
  o.summary = std::to_string(same) + "/5 models gave byte-identical metrics.csv from two `train` runs";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string only;
  app.add_option("--only", only, "gradients, kl, elbo, memory, tasks, recall, parity or determinism");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradients", [] { return from_suite(gradient_suite(kSeed), kGradientBudget); }},
      {"kl", [] { return from_suite(kl_oracle_suite(kSeed, kKlPairs, kKlSamples), kKlBudget); }},
      {"elbo", [] { return from_suite(elbo_oracle_suite(kSeed), 0); }},
      {"memory", [] { return from_suite(memory_invariant_suite(kSeed, kMemorySteps), kMemoryBudget); }},
      {"tasks", [] { return from_suite(task_validator_suite(kSeed, kTaskSamples), kTaskBudget); }},
      {"recall", recall_trend},
      {"parity", parity_trend},
      {"determinism", determinism},
  };

  bool all = true, matched = false;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && only != name) continue;
    matched = true;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.passed ? "PASS " : "FAIL ") << name << ": " << o.summary << "\n" << std::flush;
    all = all && o.passed;
  }
  if (!matched) {
    std::cerr << "unknown criterion '" << only << "'\n";
    return 2;
  }
  return all ? 0 : 1;
}
