// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cfer/ndiff/tape.hpp"

namespace cfer::nd {

/// A parameter exposed to the gradient checker. The tensor is perturbed in
/// place during the check and restored afterwards.
struct CheckedParam {
  std::string name;
  Tensor *value;
};

struct GradReport {
  std::map<std::string, double> max_rel_error; // per parameter
  double global_max = 0.0;
  std::size_t coordinates = 0;

  bool passes(double tol) const { return global_max < tol; }
};

/// Builds the scalar objective on a fresh tape from one leaf per parameter.
using Objective = std::function<Var(Tape &, std::span<const Var>)>;

/// Below this magnitude a gradient entry is compared absolutely: central
/// differences of an O(1) loss at eps 1e-5 carry about 1e-11 of roundoff.
inline constexpr double kRelativeErrorFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(kRelativeErrorFloor, std::abs(analytic) + std::abs(numeric));
}

/// Compares reverse-mode gradients against central finite differences
/// (f(θ + eps) - f(θ - eps)) / (2 eps), coordinate by coordinate. The
/// objective must be deterministic (no dropout).
inline GradReport grad_check(const Objective &f, std::span<const CheckedParam> params, double eps = 1e-5) {
  auto evaluate = [&](Tape &tape) {
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto &p : params) leaves.push_back(tape.borrow(*p.value));
    return std::pair{leaves, f(tape, leaves)};
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    auto [leaves, loss] = evaluate(tape);
    tape.backward(loss);
    for (const Var &l : leaves) analytic.push_back(tape.grad_or_zero(l));
  }

  auto value_at = [&]() {
    Tape tape;
    return evaluate(tape).second.value().item();
  };

  GradReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor &theta = *params[k].value;
    double worst = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double saved = theta[i];
      theta[i] = saved + eps;
      const double up = value_at();
      theta[i] = saved - eps;
      const double down = value_at();
      theta[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, relative_error(analytic[k][i], numeric));
      ++report.coordinates;
    }
    report.max_rel_error[params[k].name] = std::max(report.max_rel_error[params[k].name], worst);
    report.global_max = std::max(report.global_max, worst);
  }
  return report;
}

} // namespace cfer::nd
