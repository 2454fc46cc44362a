#pragma once

// Central finite differences: the project-wide numerical oracle for every
// tape gradient. The error metric is relative above a small floor and
// absolute below it; non-finite evaluations are flagged in the report
// rather than thrown.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "protolab/tensor.hpp"

namespace protolab {

struct GradCheckIssue {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  double max_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
  bool encountered_nonfinite = false;
  std::vector<GradCheckIssue> flagged;  // above tolerance or non-finite

  bool ok() const { return flagged.empty() && !encountered_nonfinite; }
};

inline double gradcheck_error(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  const double denom =
      std::max({1e-6, std::abs(analytic), std::abs(numeric)});
  return diff / denom;
}

// Compares (f(x + h e_i) - f(x - h e_i)) / 2h against analytic_grad[i] for
// every i (or the given subset). f must be scalar-valued.
inline GradCheckReport finite_difference_check(
    const std::function<double(const Tensor&)>& f, const Tensor& point,
    const Tensor& analytic_grad, double step, double tolerance,
    std::span<const std::size_t> subset = {}) {
  PROTOLAB_REQUIRE(point.same_shape(analytic_grad),
                   "finite_difference_check: point ", shape_str(point),
                   " vs gradient ", shape_str(analytic_grad));
  PROTOLAB_REQUIRE(step > 0.0, "finite_difference_check: step must be > 0");
  GradCheckReport report;
  Tensor probe = point;
  auto check_index = [&](std::size_t i) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double fp = f(probe);
    probe[i] = saved - step;
    const double fm = f(probe);
    probe[i] = saved;
    GradCheckIssue issue;
    issue.index = i;
    issue.analytic = analytic_grad[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      issue.finite = false;
      report.encountered_nonfinite = true;
      report.flagged.push_back(issue);
      return;
    }
    issue.numeric = (fp - fm) / (2.0 * step);
    issue.error = gradcheck_error(issue.analytic, issue.numeric);
    if (issue.error > report.max_error) {
      report.max_error = issue.error;
      report.worst_index = i;
    }
    if (issue.error > tolerance) report.flagged.push_back(issue);
    ++report.entries_checked;
  };
  if (subset.empty()) {
    for (std::size_t i = 0; i < point.size(); ++i) check_index(i);
  } else {
    for (std::size_t i : subset) {
      PROTOLAB_REQUIRE(i < point.size(),
                       "finite_difference_check: subset index ", i,
                       " out of range");
      check_index(i);
    }
  }
  return report;
}

}  // namespace protolab
