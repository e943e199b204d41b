// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "defmod/tensor.hpp"

namespace defmod {

inline constexpr double kGradScaleFloor = 1e-6;

struct GradCheckReport {
  std::vector<double> max_rel_error;  // one per input
  double tolerance = 0.0;

  double worst() const {
    return max_rel_error.empty() ? 0.0
                                 : *std::max_element(max_rel_error.begin(), max_rel_error.end());
  }
  bool passed() const { return worst() < tolerance; }
};

/// Compares analytic gradients of a scalar closure against central finite
/// differences (f(x + eps) - f(x - eps)) / (2 eps), in double precision.
///
/// The error for an input is max|analytic - numeric| divided by
/// max(max|analytic|, max|numeric|, kGradScaleFloor), i.e. relative to the
/// gradient's own scale so near-zero components do not dominate. The floor
/// keeps gradients that vanish identically (a key bias under softmax, for
/// one) from turning finite-difference roundoff into a large ratio. Inputs
/// are perturbed in place and restored.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double eps = 1e-5, double tol = 1e-4) {
  GradCheckReport report;
  report.tolerance = tol;
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor<double> out = fn(inputs);
  backward(out);

  for (auto& in : inputs) {
    std::vector<double> analytic(in.size(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    std::vector<double> numeric(in.size(), 0.0);
    auto values = in.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      double plus;
      double minus;
      {
        NoGradGuard guard;
        plus = fn(inputs).item();
        values[i] = saved - eps;
        minus = fn(inputs).item();
      }
      values[i] = saved;
      numeric[i] = (plus - minus) / (2.0 * eps);
    }
    double diff = 0.0, scale = kGradScaleFloor;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    report.max_rel_error.push_back(diff / scale);
    in.zero_grad();
  }
  return report;
}

}  // namespace defmod
