#pragma once

// Invariant suite: round trips, Jacobian oracle, gradient checks and
// density normalization, each reported against a fixed tolerance.

#include <cstdint>
#include <string>
#include <vector>

namespace stflow {

struct CheckResult {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  /// Test hook: inverts with a perturbed copy of the model.
  bool corrupt_inverse = false;
};

/// max |inverse(forward(x)) - x| over (L,K) in {(1,2),(2,2),(2,4),(3,4)} at 16x16.
CheckResult check_round_trip(const VerifyOptions& options);
/// |analytic logdet - log|det J|| with J assembled by finite differences, 1x4x4, L=1, K=2.
CheckResult check_logdet(const VerifyOptions& options);
/// Max relative error of every parameter gradient of a tiny model against finite differences.
CheckResult check_gradients(const VerifyOptions& options);
/// |integral of exp(-nll) - 1| for a two-pixel model on a quadrature grid.
CheckResult check_density(const VerifyOptions& options);

std::vector<CheckResult> run_verification(const VerifyOptions& options);

/// CHECK name=... measured=... tolerance=... status=PASS|FAIL
std::string format_check(const CheckResult& r);

}  // namespace stflow
