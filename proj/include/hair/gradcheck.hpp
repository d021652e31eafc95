#pragma once

#include "hair/autograd.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace hair {

struct GradCheckOptions {
  double step = 1e-6;
  double rel_tol = 1e-4;
  // Below this magnitude the relative error is meaningless; compare absolute
  // error against `abs_tol` instead.
  double abs_floor = 1e-5;
  double abs_tol = 1e-8;
  // Coordinates sampled across all parameters; 0 checks every coordinate.
  std::size_t samples = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t relative_checked = 0;  // coordinates with magnitude >= abs_floor
  double max_rel_err = 0.0;          // over coordinates with magnitude >= abs_floor
  double max_abs_fallback_err = 0.0;  // over coordinates below abs_floor
  std::string worst;                  // "param[i]: analytic vs numeric"
  bool passed = true;
};

/// Central-difference verification of reverse-mode gradients.
///
/// `loss` rebuilds the scalar objective from the current values of `params`
/// on every call. It is evaluated twice at the base point first; a mismatch
/// raises std::runtime_error (non-deterministic objective).
GradCheckReport finite_diff_check(const std::function<Var<double>()>& loss, std::vector<Var<double>> params,
                                  const GradCheckOptions& options = {});

}  // namespace hair
