#pragma once

// Verification suites surfaced by `dr1mask check`.

#include <cstdint>
#include <string>
#include <vector>

namespace dr1mask {

struct CaseResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct SuiteResult {
  std::string name;
  std::vector<CaseResult> cases;
  bool pass() const;
};

struct CheckOptions {
  std::vector<std::string> only;  // suite names; empty runs all
  bool corrupt_backward = false;  // negates one backward pass to prove the gradient suite can fail
  int gradcheck_entries = 32;     // per parameter group in the end-to-end check; 0 checks all
  std::uint64_t seed = 0;
};

/// dr1conv, gradcheck, shapes, params.
const std::vector<std::string>& check_suite_names();
std::vector<SuiteResult> run_checks(const CheckOptions& opt);
std::string format_check_table(const std::vector<SuiteResult>& suites);

}  // namespace dr1mask
