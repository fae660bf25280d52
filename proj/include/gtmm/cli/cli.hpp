#pragma once

// Command-line front end. Verbs: gen-data, train, eval, generate,
// gradcheck, selftest. Exit codes: 0 success, 1 usage error, 2 runtime or
// numeric failure (including a failed gradcheck or selftest).

#include <ostream>
#include <string>
#include <vector>

namespace gtmm {

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gtmm
