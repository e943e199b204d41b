// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "defmod/error.hpp"

namespace defmod {

using TokenId = std::size_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr std::size_t kReservedCount = 4;

inline const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> tokens{"<pad>", "<s>", "</s>", "<unk>"};
  return tokens;
}

/// ASCII lowercasing; multi-byte UTF-8 sequences pass through unchanged.
inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

/// Token <-> id bijection with PAD, BOS, EOS, UNK fixed at ids 0-3.
class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& t : reserved_tokens()) insert(t);
  }

  /// Adds a token if absent; returns its id.
  TokenId insert(const std::string& token) {
    auto [it, fresh] = index_.try_emplace(token, tokens_.size());
    if (fresh) tokens_.push_back(token);
    return it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  /// Id of a token, UNK if absent.
  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) raise<IndexError>("vocabulary id ", id, " out of range (size ", tokens_.size(), ")");
    return tokens_[id];
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<TokenId> encode(const std::vector<std::string>& tokens) const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  /// Token-per-line UTF-8; the first four lines are the reserved tokens.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) raise<IoError>("cannot write vocabulary ", path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise<IoError>("cannot read vocabulary ", path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return from_tokens(lines);
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    const auto& reserved = reserved_tokens();
    if (tokens.size() < kReservedCount || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
      raise<ParseError>("vocabulary does not start with the reserved header <pad> <s> </s> <unk>");
    }
    Vocabulary v;
    for (std::size_t i = kReservedCount; i < tokens.size(); ++i) {
      if (v.contains(tokens[i])) raise<ParseError>("vocabulary line ", i + 1, ": duplicate token '", tokens[i], "'");
      v.insert(tokens[i]);
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Vocabulary of tokens seen at least `min_freq` times, ordered by
/// descending frequency then lexicographically.
inline Vocabulary build_vocab(const std::vector<std::string>& stream, std::size_t min_freq = 1) {
  if (stream.empty()) raise<ConfigError>("build_vocab: empty token stream");
  if (min_freq == 0) raise<ConfigError>("build_vocab: min_freq must be positive");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : stream) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [tok, n] : kept) v.insert(tok);
  return v;
}

}  // namespace defmod
