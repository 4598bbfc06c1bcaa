#pragma once

// Tape gradients versus central differences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>

#include "mvcr/ops.hpp"

namespace mvcr {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool finite = true;
  std::size_t non_finite_index = 0;
  std::string message;

  bool ok(double tolerance) const { return finite && max_rel_error < tolerance; }
};

/// Relative error with a floor on the denominator, so that gradients which
/// are zero up to roundoff do not blow the ratio up.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

template <class T>
using ScalarFn = std::function<Var<T>(Tape<T>&, Var<T>)>;

/// `fn` must be scalar-valued and deterministic in its input. Any stochastic
/// branch has to be frozen by the caller.
template <class T>
GradCheckReport check_gradients(const ScalarFn<T>& fn, const Tensor<T>& point, double step) {
  GradCheckReport report;
  std::vector<T> analytic;
  {
    Tape<T> tape;
    auto x = tape.leaf(point.shape, point.data, true);
    auto loss = fn(tape, x);
    tape.backward(loss);
    auto g = tape.grad(x);
    analytic.assign(g.begin(), g.end());
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      report.finite = false;
      report.message = "non-finite loss at the check point";
      return report;
    }
  }
  auto eval = [&](const std::vector<T>& values) {
    Tape<T> tape;
    auto x = tape.leaf(point.shape, values, false);
    return static_cast<double>(fn(tape, x).item());
  };
  std::vector<T> probe = point.data;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + static_cast<T>(step);
    const double up = eval(probe);
    probe[i] = saved - static_cast<T>(step);
    const double down = eval(probe);
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double a = static_cast<double>(analytic[i]);
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      report.finite = false;
      report.non_finite_index = i;
      report.message = "non-finite value at index " + std::to_string(i);
      return report;
    }
    const double rel = relative_error(a, numeric);
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  return report;
}

}  // namespace mvcr
