#include "hair/gradcheck.hpp"

#include "hair/ops.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace hair {

GradCheckReport finite_diff_check(const std::function<Var<double>()>& loss, std::vector<Var<double>> params,
                                  const GradCheckOptions& options) {
  if (params.empty()) throw std::invalid_argument("finite_diff_check: no parameters");

  zero_grad(params);
  const Var<double> base = loss();
  const double f0 = base.value()[0];
  if (loss().value()[0] != f0) throw std::runtime_error("finite_diff_check: objective is not deterministic");
  backward(base);

  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  // (param, coordinate) pairs to probe.
  std::vector<std::pair<std::size_t, Index>> coords;
  Index total = 0;
  for (const auto& p : params) total += p.size();
  if (options.samples == 0 || static_cast<Index>(options.samples) >= total) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (Index j = 0; j < params[i].size(); ++j) coords.emplace_back(i, j);
  } else {
    // Every parameter gets at least one probe; the rest are spread uniformly.
    std::mt19937_64 rng(options.seed);
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::uniform_int_distribution<Index> pick(0, params[i].size() - 1);
      coords.emplace_back(i, pick(rng));
    }
    std::uniform_int_distribution<Index> pick(0, total - 1);
    while (coords.size() < options.samples) {
      Index flat = pick(rng);
      std::size_t i = 0;
      while (flat >= params[i].size()) flat -= params[i++].size();
      coords.emplace_back(i, flat);
    }
  }

  GradCheckReport report;
  double worst_score = -1.0;
  for (const auto& [i, j] : coords) {
    double& x = params[i].mutable_value()[j];
    const double saved = x;
    x = saved + options.step;
    const double fp = loss().value()[0];
    x = saved - options.step;
    const double fm = loss().value()[0];
    x = saved;

    const double numeric = (fp - fm) / (2.0 * options.step);
    const double a = analytic[i][j];
    const double magnitude = std::max(std::abs(a), std::abs(numeric));
    const double abs_err = std::abs(a - numeric);
    double score;
    if (magnitude >= options.abs_floor) {
      const double rel = abs_err / magnitude;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.relative_checked;
      score = rel / options.rel_tol;
    } else {
      report.max_abs_fallback_err = std::max(report.max_abs_fallback_err, abs_err);
      score = abs_err / options.abs_tol;
    }
    if (score > worst_score) {
      worst_score = score;
      std::ostringstream os;
      os << "param " << i << "[" << j << "]: analytic " << a << " vs numeric " << numeric;
      report.worst = os.str();
    }
    ++report.checked;
  }
  report.passed = report.max_rel_err <= options.rel_tol && report.max_abs_fallback_err <= options.abs_tol;
  zero_grad(params);
  return report;
}

}  // namespace hair
