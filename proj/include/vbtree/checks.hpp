#pragma once

// Property and oracle checks shared by the acceptance suite and the CLI
// selftest. Each check covers one acceptance criterion.

#include <string>
#include <vector>

namespace vbtree {

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

std::string format_check(const CheckResult& r);

CheckResult check_wavelet();
CheckResult check_potentials();
CheckResult check_tree_bp();
CheckResult check_linear_algebra();
CheckResult check_optimization();
CheckResult check_hyperparameters();
CheckResult check_bound();

/// Runs checks 1..7, or only those listed in `ids`.
std::vector<CheckResult> run_core_checks(const std::vector<int>& ids = {});

}  // namespace vbtree
