#pragma once

#include "hair/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hair {

struct CheckResult {
  std::string name;
  bool passed = true;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> results;

  bool passed() const;
  /// nullptr when every check passed.
  const CheckResult* first_failure() const;
};

/// Direct loop convolution: [B, Cin, H, W] * [Cout, Cin/groups, kh, kw].
template <typename Scalar>
Tensor<Scalar> conv2d_reference(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, int stride = 1,
                                int padding = 0, int groups = 1);

/// Mixed-kernel convolution vs mixture of convolutions over random
/// (input, Weight Box, selecting vector) draws, plus agreement of the fast
/// convolution with the loop reference.
SuiteReport run_distributivity_suite(std::uint64_t seed = 0, int draws = 100);

/// Central finite differences on every differentiable primitive, the blocks,
/// the DAC/HSN mechanism and an end-to-end toy model.
SuiteReport run_gradient_suite(std::uint64_t seed = 0, std::size_t model_samples = 2500);

/// Simplex constraints, N = 1 and one-hot degeneracies, Weight Box sharing,
/// shape contracts, zero-parameter identities and layout round trips.
SuiteReport run_invariant_suite(std::uint64_t seed = 0);

/// "distributivity", "gradients", "invariants" or "all".
std::vector<SuiteReport> run_suites(const std::string& which, std::uint64_t seed = 0);
const std::vector<std::string>& suite_names();

}  // namespace hair
