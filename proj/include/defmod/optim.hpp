// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "defmod/config.hpp"
#include "defmod/error.hpp"
#include "defmod/transformer.hpp"

namespace defmod {

/// factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double noam_lr(std::size_t step, double factor, std::size_t d_model, std::size_t warmup) {
  if (step == 0) raise<ConfigError>("noam_lr: steps are counted from 1");
  const auto s = static_cast<double>(step);
  return factor / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(static_cast<double>(warmup), -1.5));
}

/// Adam with bias correction and the Noam schedule. Moments are kept in the
/// parameter scalar type, aligned with the store's insertion order.
template <typename T>
class Adam {
 public:
  struct Hyper {
    double lr_factor = 2.0;
    std::size_t d_model = 300;
    std::size_t warmup = 2000;
    double beta1 = 0.99;
    double beta2 = 0.998;
    double eps = 1e-9;
  };

  Adam() = default;
  Adam(const ParamStore<T>& params, Hyper hyper) : hyper_(hyper) {
    for (const auto& [name, t] : params.items()) {
      first_.emplace_back(t.size(), T(0));
      second_.emplace_back(t.size(), T(0));
    }
  }

  const Hyper& hyper() const { return hyper_; }
  std::size_t step_count() const { return step_; }
  void set_step_count(std::size_t s) { step_ = s; }
  std::vector<std::vector<T>>& first_moments() { return first_; }
  std::vector<std::vector<T>>& second_moments() { return second_; }
  const std::vector<std::vector<T>>& first_moments() const { return first_; }
  const std::vector<std::vector<T>>& second_moments() const { return second_; }

  double current_lr() const { return noam_lr(step_ + 1, hyper_.lr_factor, hyper_.d_model, hyper_.warmup); }

  /// One update using the gradients accumulated on `params`, which are then
  /// cleared. A non-finite gradient aborts the step before anything changes.
  /// Parameters without a gradient are treated as having a zero gradient.
  /// Returns the learning rate used.
  double step(ParamStore<T>& params) {
    auto& items = params.items();
    if (items.size() != first_.size()) raise<ConfigError>("optimizer state does not match parameter inventory");
    for (const auto& [name, t] : items) {
      if (!t.has_grad()) continue;
      for (T g : t.grad()) {
        if (!std::isfinite(g)) raise<NumericError>("non-finite gradient in parameter '", name, "'");
      }
    }
    const double lr = current_lr();
    ++step_;
    const double b1 = hyper_.beta1, b2 = hyper_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t p = 0; p < items.size(); ++p) {
      Tensor<T>& param = items[p].second;
      auto values = param.mutable_data();
      const bool has = param.has_grad();
      auto& m = first_[p];
      auto& v = second_[p];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T g = has ? param.grad()[i] : T(0);
        m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
        v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        values[i] = static_cast<T>(values[i] - lr * mhat / (std::sqrt(vhat) + hyper_.eps));
      }
      param.zero_grad();
    }
    return lr;
  }

 private:
  Hyper hyper_;
  std::size_t step_ = 0;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
};

}  // namespace defmod
