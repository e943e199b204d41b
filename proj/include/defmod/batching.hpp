// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "defmod/config.hpp"
#include "defmod/error.hpp"
#include "defmod/random.hpp"
#include "defmod/transformer.hpp"

namespace defmod {

/// Padded cost of one example: source length plus target length (the
/// definition with BOS/EOS).
inline std::size_t padded_cost(const EncodedExample& ex) { return ex.source.size() + ex.definition.size() + 1; }

/// Partitions example indices into batches.
///
/// Examples are bucketed by source length (stable sort, after an optional
/// seeded shuffle) and packed greedily so that a batch of n examples with
/// longest source S and longest target R costs n * (S + R) <= budget in token
/// mode, or n <= budget in example mode. With an rng the batch order is
/// shuffled as well.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<EncodedExample>& examples,
                                                          std::size_t budget, BatchUnit unit = BatchUnit::kTokens,
                                                          Rng* rng = nullptr) {
  if (budget == 0) raise<ConfigError>("make_batches: budget must be positive");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (rng) rng->shuffle(order.begin(), order.end());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return examples[a].source.size() < examples[b].source.size();
  });

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t max_src = 0, max_tgt = 0;
  for (std::size_t idx : order) {
    const auto& ex = examples[idx];
    const std::size_t src = ex.source.size(), tgt = ex.definition.size() + 1;
    if (unit == BatchUnit::kTokens && src + tgt > budget) {
      raise<DataError>("example ", idx, " needs ", src + tgt, " padded tokens, over the batch budget of ", budget);
    }
    const std::size_t s = std::max(max_src, src), t = std::max(max_tgt, tgt);
    const std::size_t n = current.size() + 1;
    const bool fits = unit == BatchUnit::kTokens ? n * (s + t) <= budget : n <= budget;
    if (!fits) {
      batches.push_back(std::move(current));
      current.clear();
      max_src = src;
      max_tgt = tgt;
    } else {
      max_src = s;
      max_tgt = t;
    }
    current.push_back(idx);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  if (rng) rng->shuffle(batches.begin(), batches.end());
  return batches;
}

inline Batch gather_batch(const std::vector<EncodedExample>& examples, const std::vector<std::size_t>& indices) {
  std::vector<EncodedExample> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(examples.at(i));
  return make_batch(picked);
}

}  // namespace defmod
