#include "gtmm/verify/verify.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>

namespace gtmm {

bool SuiteReport::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

void print_report(std::ostream& os, const SuiteReport& report, bool verbose) {
  char buf[512];
  for (const auto& c : report.checks) {
    if (!verbose && c.passed) continue;
    std::snprintf(buf, sizeof buf, "  %s %-52s %.3e (limit %.1e)", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.value,
                  c.limit);
    os << buf;
    if (!c.detail.empty()) os << "  " << c.detail;
    os << '\n';
  }
  std::snprintf(buf, sizeof buf, "%s %s: %zu checks, %.1f s", report.passed() ? "PASS" : "FAIL", report.name.c_str(),
                report.checks.size(), report.seconds);
  os << buf << '\n';
}

}  // namespace gtmm
