#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dpbnet/gradcheck.hpp"

namespace dpbn {

/// One finite-difference check on a random instance.
struct SuiteCase {
  std::string module;  // dfb, ce, total, sram, net
  std::string instance;
  GradCheckResult result;
  Real tolerance = 0;

  bool passed() const { return result.max_rel_error <= tolerance; }
};

/// Modules accepted by run_gradcheck_suite, "all" runs each of them.
const std::vector<std::string>& gradcheck_modules();

/// Random 8^3 to 16^3 instances derived from `seed`. Loss and SRAM checks
/// use 1e-5 relative tolerance, the full network 1e-4.
std::vector<SuiteCase> run_gradcheck_suite(std::string_view module, std::uint64_t seed);

}  // namespace dpbn
