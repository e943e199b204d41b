// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Marking the definiendum inside its source sequence.
//
// A source is a token sequence w_1..w_n with indicator bits i_1..i_n, exactly
// one of which is set. Three treatments are supported:
//  - non-contextual: multiplicative marking before encoding, i.e. the source
//    collapses to the definiendum alone;
//  - ADD: marker vector D added to the definiendum embedding and C to every
//    other token embedding, before the encoder;
//  - SELECT: multiplicative marking after encoding, i.e. only the encoded
//    definiendum row is kept as decoder memory.

#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "defmod/config.hpp"
#include "defmod/datasets.hpp"
#include "defmod/error.hpp"
#include "defmod/ops.hpp"
#include "defmod/vocab.hpp"

namespace defmod {

struct MarkedSequence {
  std::vector<TokenId> tokens;          // encoder vocabulary ids
  std::vector<std::uint8_t> indicators;  // exactly one bit set
  std::size_t definiendum_index = 0;

  std::size_t size() const { return tokens.size(); }

  void validate(std::size_t max_len) const {
    if (tokens.empty()) raise<MarkingError>("marked sequence is empty");
    if (tokens.size() > max_len) {
      raise<LengthError>("source of ", tokens.size(), " tokens exceeds max_len ", max_len);
    }
    if (indicators.size() != tokens.size()) raise<MarkingError>("indicator count differs from token count");
    const auto set = std::count(indicators.begin(), indicators.end(), std::uint8_t{1});
    if (set != 1) raise<MarkingError>("expected exactly one definiendum indicator, found ", set);
    if (definiendum_index >= tokens.size() || indicators[definiendum_index] != 1) {
      raise<MarkingError>("definiendum index ", definiendum_index, " does not carry the indicator");
    }
  }

  friend bool operator==(const MarkedSequence&, const MarkedSequence&) = default;
};

/// Builds the encoder source for an example. Without context the source is
/// [definiendum]; the contextual modes share one construction (full context
/// with the stored mark) and differ only in how the model treats it.
inline MarkedSequence build_source(const DefinitionExample& ex, MarkingMode mode, const Vocabulary& vocab,
                                   bool lower = true, std::size_t max_len = 128) {
  auto norm = [&](const std::string& s) { return lower ? lowercase(s) : s; };
  MarkedSequence seq;
  if (!is_contextual(mode)) {
    seq.tokens = {vocab.id(norm(ex.word))};
    seq.indicators = {1};
    seq.definiendum_index = 0;
  } else {
    if (!ex.context || ex.context->empty()) {
      raise<DataError>("marking mode ", to_string(mode), " needs a context for '", ex.word, "'");
    }
    if (!ex.mark_index) raise<DataError>("context for '", ex.word, "' carries no mark_index");
    seq.tokens.reserve(ex.context->size());
    for (const auto& t : *ex.context) seq.tokens.push_back(vocab.id(norm(t)));
    seq.indicators.assign(seq.tokens.size(), 0);
    seq.definiendum_index = *ex.mark_index;
    seq.indicators.at(seq.definiendum_index) = 1;
  }
  seq.validate(max_len);
  return seq;
}

/// Adds D to rows whose bit is set and C to all others. No count check;
/// see mark_add for the single-sequence contract.
template <typename T>
Tensor<T> add_markers(const Tensor<T>& embedded, std::span<const std::uint8_t> bits, const Tensor<T>& D,
                      const Tensor<T>& C) {
  if (bits.size() != embedded.rows()) {
    raise<DimensionError>("add_markers: ", bits.size(), " indicators for ", embedded.rows(), " rows");
  }
  if (D.size() != embedded.cols() || C.size() != embedded.cols()) {
    raise<DimensionError>("add_markers: marker width does not match embeddings ", shape_string(embedded.shape()));
  }
  const Tensor<T> markers = concat_rows<T>({C, D});  // row 0 = C, row 1 = D
  std::vector<std::size_t> which(bits.begin(), bits.end());
  return add(embedded, gather_rows(markers, std::span<const std::size_t>(which)));
}

/// Additive marking of one sequence: row k gets +D if i_k = 1, else +C.
template <typename T>
Tensor<T> mark_add(const Tensor<T>& embedded, std::span<const std::uint8_t> indicators, const Tensor<T>& D,
                   const Tensor<T>& C) {
  const auto set = std::count(indicators.begin(), indicators.end(), std::uint8_t{1});
  if (set != 1) raise<MarkingError>("mark_add: expected exactly one definiendum indicator, found ", set);
  return add_markers(embedded, indicators, D, C);
}

template <typename T>
struct SelectedMemory {
  Tensor<T> memory;  // 1 x d
  std::size_t length = 1;
};

/// Keeps only the encoded definiendum row as decoder memory.
template <typename T>
SelectedMemory<T> mark_select(const Tensor<T>& encoded, std::size_t definiendum_index) {
  if (definiendum_index >= encoded.rows()) {
    raise<IndexError>("mark_select: index ", definiendum_index, " outside ", encoded.rows(), " encoded rows");
  }
  const std::size_t idx[] = {definiendum_index};
  return {gather_rows(encoded, std::span<const std::size_t>(idx)), 1};
}

}  // namespace defmod
