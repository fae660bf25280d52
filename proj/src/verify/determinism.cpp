#include "gtmm/harness/train.hpp"
#include "gtmm/verify/verify.hpp"

#include <chrono>
#include <fstream>
#include <iterator>

namespace gtmm {

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Count of differing bytes, with any length difference counted in full.
double byte_diff(const std::string& a, const std::string& b) {
  std::size_t n = a.size() > b.size() ? a.size() - b.size() : b.size() - a.size();
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) n += a[i] != b[i];
  return static_cast<double>(n);
}

}  // namespace

TrainConfig smoke_config(MemoryKind kind, Index steps) {
  TrainConfig c;
  c.model = kind;
  c.task.kind = TaskKind::perfect_recall;
  c.task.l = 4;
  c.task.k = 2;
  c.task.image = {1, 8, 8};
  c.latent = 4;
  c.heads = 2;
  c.hidden = 16;
  c.features = 16;
  c.head_hidden = 16;
  c.batch = 2;
  c.steps = steps;
  c.eval_every = std::max<Index>(1, steps / 4);
  c.per_class = 5;
  c.wall_clock = false;
  return c;
}

SuiteReport determinism_suite(const TrainConfig& cfg, const std::filesystem::path& scratch) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "determinism (" + to_string(cfg.model) + ")";
  TrainConfig run = cfg;
  run.wall_clock = false;
  std::filesystem::remove_all(scratch);
  const auto a = scratch / "a", b = scratch / "b", c = scratch / "other_seed";
  train(run, a);
  train(run, b);
  const std::string ckpt = "ckpt_" + std::to_string(run.steps) + ".bin";

  const double metrics = byte_diff(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  const double weights = byte_diff(slurp(a / ckpt), slurp(b / ckpt));
  report.checks.push_back({"metrics.csv identical across runs (bytes differing)", metrics, 0.0, metrics == 0.0, ""});
  report.checks.push_back({"final checkpoint identical (bytes differing)", weights, 0.0, weights == 0.0, ""});

  // guards against a vacuous pass, e.g. a run that ignores its seed
  TrainConfig other = run;
  other.seed = run.seed + 1;
  train(other, c);
  const double moved = byte_diff(slurp(a / "metrics.csv"), slurp(c / "metrics.csv"));
  report.checks.push_back({"another seed changes metrics.csv (bytes differing)", moved, 0.0, moved > 0.0,
                           "must be above the limit"});
  std::filesystem::remove_all(scratch);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace gtmm
