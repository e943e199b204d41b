// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "defmod/error.hpp"
#include "defmod/ops.hpp"
#include "defmod/random.hpp"
#include "defmod/tensor.hpp"
#include "defmod/vocab.hpp"

namespace defmod {

enum class Provenance : std::uint8_t { kPretrained, kRandomInit };

/// Frozen |V| x dim matrix of word vectors with the origin of every row.
template <typename T>
struct EmbeddingTable {
  Tensor<T> matrix;
  std::vector<Provenance> provenance;
  bool frozen = true;

  std::size_t rows() const { return matrix.dim(0); }
  std::size_t dim() const { return matrix.dim(1); }

  std::size_t pretrained_count() const {
    return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), Provenance::kPretrained));
  }
};

/// Every row drawn i.i.d. from N(0, 1).
template <typename T>
EmbeddingTable<T> random_table(std::size_t rows, std::size_t dim, Rng& rng) {
  std::vector<T> data(rows * dim);
  for (auto& x : data) x = static_cast<T>(rng.normal());
  return {Tensor<T>({rows, dim}, std::move(data), false),
          std::vector<Provenance>(rows, Provenance::kRandomInit), true};
}

/// Loads whitespace-separated text vectors (`token v1 ... v_dim` per line).
/// Tokens in `vocab` found in the file get their row copied verbatim; the
/// rest, reserved tokens included, are drawn from N(0, 1). Duplicate tokens
/// keep the first occurrence and are reported through `warn`.
template <typename T>
EmbeddingTable<T> load_pretrained(const std::string& path, const Vocabulary& vocab, std::size_t dim, Rng& rng,
                                  const std::function<void(const std::string&)>& warn = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise<IoError>("cannot open embedding file ", path);
  EmbeddingTable<T> table = random_table<T>(vocab.size(), dim, rng);
  auto values = table.matrix.mutable_data();
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  std::vector<T> row(dim);
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    std::size_t count = 0;
    for (std::string field; fields >> field;) {
      if (count == dim) raise<ParseError>(path, ":", line_no, ": more than ", dim, " values");
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        raise<ParseError>(path, ":", line_no, ": cannot parse '", field, "' as a real");
      }
      row[count++] = static_cast<T>(v);
    }
    if (count != dim) raise<ParseError>(path, ":", line_no, ": expected ", dim, " values, found ", count);
    if (!seen.insert(token).second) {
      if (warn) warn(detail::concat(path, ":", line_no, ": duplicate token '", token, "' ignored"));
      continue;
    }
    if (!vocab.contains(token)) continue;
    const TokenId id = vocab.id(token);
    if (id < kReservedCount) continue;
    std::copy(row.begin(), row.end(), values.begin() + static_cast<std::ptrdiff_t>(id * dim));
    table.provenance[id] = Provenance::kPretrained;
  }
  return table;
}

/// Row gather from a table; frozen tables never receive gradient.
template <typename T>
Tensor<T> lookup(const EmbeddingTable<T>& table, std::span<const TokenId> ids) {
  return gather_rows(table.matrix, ids);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// FNV-1a over the raw bytes of a tensor's values.
template <typename T>
std::uint64_t content_hash(const Tensor<T>& t) {
  return fnv1a({reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(T)});
}

}  // namespace defmod
