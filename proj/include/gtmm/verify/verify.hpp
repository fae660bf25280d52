#pragma once

// Self-verification suites shared by the `gradcheck` and `selftest`
// commands and the acceptance binary. Each suite returns one Check per
// property with the measured number next to its limit.

#include "gtmm/harness/config.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace gtmm {

struct Check {
  std::string name;
  double value = 0.0;
  double limit = 0.0;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string name;
  std::vector<Check> checks;
  double seconds = 0.0;

  bool passed() const;
};

/// One line per check, prefixed PASS or FAIL.
void print_report(std::ostream& os, const SuiteReport& report, bool verbose = true);

/// 64-bit central-difference checks of every primitive (100 random cases
/// each, limit 1e-5) and of every net map, memory step and the full
/// per-step free energy (limit 1e-4).
SuiteReport gradient_suite(std::uint64_t seed, Index cases_per_primitive = 100);

/// Closed-form Gaussian KL against Monte-Carlo estimates.
SuiteReport kl_oracle_suite(std::uint64_t seed, Index pairs = 50, Index samples = 1000000);

/// Two-step ELBO of a small linear-head model against a scalar loop
/// implementation that reads the parameters directly.
SuiteReport elbo_oracle_suite(std::uint64_t seed);

/// Randomized rollouts of every memory system, `steps` steps each.
SuiteReport memory_invariant_suite(std::uint64_t seed, Index steps = 10000);

/// `samples` samples per generator through validate_sample plus chi-square
/// uniformity checks.
SuiteReport task_validator_suite(std::uint64_t seed, Index samples = 1000);

/// Trains the same short config twice under `scratch` and compares the
/// metrics files byte for byte.
SuiteReport determinism_suite(const TrainConfig& cfg, const std::filesystem::path& scratch);

/// Small, fast config used by determinism checks.
TrainConfig smoke_config(MemoryKind kind, Index steps);

}  // namespace gtmm
