#pragma once

#include <functional>
#include <string>
#include <vector>

namespace hifuse {

struct CheckResult {
  std::string suite;
  std::string name;
  bool pass = false;
  std::string detail;
};

struct SelfcheckReport {
  std::vector<CheckResult> results;
  double seconds = 0;
  bool all_pass() const;
  int failures() const;
};

/// "grad", "window", "flops", "metrics", "schedule", "persist".
const std::vector<std::string>& selfcheck_suites();

/// Runs the named suites (all when `only` is empty) on desk-scale configs.
/// `progress` sees each result as it lands. Unknown suite names throw.
SelfcheckReport run_selfcheck(const std::vector<std::string>& only = {},
                              const std::function<void(const CheckResult&)>& progress = {});

/// Individual suites, exposed for the tests.
std::vector<CheckResult> selfcheck_grad_ops();
std::vector<CheckResult> selfcheck_grad_blocks();
std::vector<CheckResult> selfcheck_grad_model();

/// Soft budget for a full run, in seconds.
inline constexpr double kSelfcheckBudgetSeconds = 300.0;

/// f32 and f64 error bounds of the gradient checks.
inline constexpr double kGradTolF32 = 1e-3;
inline constexpr double kGradTolF64 = 1e-6;

}  // namespace hifuse
