// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Definition corpora: JSON-Lines records, the two context conversions
// (definiendum prepending and inflection-based curation) and corpus
// statistics.

#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "defmod/error.hpp"
#include "defmod/vocab.hpp"

namespace defmod {

using Tokens = std::vector<std::string>;

struct DefinitionExample {
  std::string word;
  std::optional<Tokens> context;
  Tokens definition;
  std::optional<std::size_t> mark_index;

  friend bool operator==(const DefinitionExample&, const DefinitionExample&) = default;
};

inline Tokens split_whitespace(std::string_view text) {
  Tokens out;
  std::istringstream in{std::string(text)};
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

// ---------------------------------------------------------------------------
// JSON-Lines

inline nlohmann::ordered_json to_json(const DefinitionExample& ex) {
  nlohmann::ordered_json j;
  j["word"] = ex.word;
  if (ex.context) j["context"] = *ex.context;
  j["definition"] = ex.definition;
  if (ex.mark_index) j["mark_index"] = *ex.mark_index;
  return j;
}

/// Parses one record. Throws SchemaError for missing or ill-typed fields and
/// for a mark_index that does not point into the context.
inline DefinitionExample example_from_json(const nlohmann::json& j) {
  if (!j.is_object()) raise<SchemaError>("record is not a JSON object");
  DefinitionExample ex;
  auto tokens_field = [&](const char* name) {
    const auto& f = j.at(name);
    if (!f.is_array()) raise<SchemaError>("field '", name, "' must be an array of strings");
    Tokens toks;
    for (const auto& t : f) {
      if (!t.is_string()) raise<SchemaError>("field '", name, "' must be an array of strings");
      toks.push_back(t.get<std::string>());
    }
    return toks;
  };
  if (!j.contains("word") || !j["word"].is_string() || j["word"].get<std::string>().empty()) {
    raise<SchemaError>("missing or empty required field 'word'");
  }
  ex.word = j["word"].get<std::string>();
  if (!j.contains("definition")) raise<SchemaError>("missing required field 'definition'");
  ex.definition = tokens_field("definition");
  if (ex.definition.empty()) raise<SchemaError>("field 'definition' is empty");
  if (j.contains("context") && !j["context"].is_null()) ex.context = tokens_field("context");
  if (j.contains("mark_index") && !j["mark_index"].is_null()) {
    const auto& m = j["mark_index"];
    if (!m.is_number_integer() || m.get<long long>() < 0) {
      raise<SchemaError>("field 'mark_index' must be a non-negative integer");
    }
    const auto idx = m.get<std::size_t>();
    if (!ex.context) raise<SchemaError>("field 'mark_index' given without 'context'");
    if (idx >= ex.context->size()) {
      raise<SchemaError>("mark_index ", idx, " out of range for a context of ", ex.context->size(), " tokens");
    }
    ex.mark_index = idx;
  }
  return ex;
}

struct CorpusIssue {
  std::size_t line = 0;
  std::string message;
};

struct Corpus {
  std::vector<DefinitionExample> examples;
  std::vector<CorpusIssue> issues;  // malformed lines skipped in lenient mode
};

/// Reads a JSON-Lines corpus. With fail_fast the first malformed line throws
/// (SchemaError/ParseError naming the line); otherwise it is recorded and
/// skipped.
inline Corpus load_corpus(std::istream& in, bool fail_fast = true, const std::string& origin = "<stream>") {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        raise<ParseError>("invalid JSON: ", e.what());
      }
      corpus.examples.push_back(example_from_json(j));
    } catch (const DataError& e) {
      if (fail_fast) {
        if (dynamic_cast<const SchemaError*>(&e)) raise<SchemaError>(origin, ":", line_no, ": ", e.what());
        raise<ParseError>(origin, ":", line_no, ": ", e.what());
      }
      corpus.issues.push_back({line_no, e.what()});
    }
  }
  return corpus;
}

inline Corpus load_corpus(const std::string& path, bool fail_fast = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise<IoError>("cannot open corpus ", path);
  return load_corpus(in, fail_fast, path);
}

inline void write_corpus(std::ostream& out, const std::vector<DefinitionExample>& examples) {
  for (const auto& ex : examples) out << to_json(ex).dump() << '\n';
}

inline void write_corpus(const std::string& path, const std::vector<DefinitionExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise<IoError>("cannot write corpus ", path);
  write_corpus(out, examples);
}

// ---------------------------------------------------------------------------
// Context conversions

/// Turns a cue into a word-in-context sequence by putting the definiendum in
/// front of it. Refuses examples that already carry a mark.
inline DefinitionExample prepend_definiendum(const DefinitionExample& ex) {
  if (ex.mark_index) {
    raise<DataError>("example for '", ex.word, "' is already marked; refusing to prepend twice");
  }
  DefinitionExample out = ex;
  Tokens ctx{ex.word};
  if (ex.context) ctx.insert(ctx.end(), ex.context->begin(), ex.context->end());
  out.context = std::move(ctx);
  out.mark_index = 0;
  return out;
}

enum class MatchKind { kNone, kInflected, kExact };

inline const char* to_string(MatchKind k) {
  switch (k) {
    case MatchKind::kExact: return "exact";
    case MatchKind::kInflected: return "inflected";
    default: return "none";
  }
}

namespace detail {

inline bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

// Whether `form` is a regular English inflection of `base`.
inline bool is_inflection_of(const std::string& base, const std::string& form) {
  if (base.size() < 2 || form.size() <= base.size() - 1) return false;
  static const std::vector<std::string> plain{"s", "es", "ed", "ing", "er", "est"};
  for (const auto& suf : plain) {
    if (form == base + suf) return true;
  }
  const char last = base.back();
  // Final -e: like/liked, make/making, large/larger.
  if (last == 'e') {
    const std::string stem = base.substr(0, base.size() - 1);
    for (const char* suf : {"d", "r", "st"}) {
      if (form == base + suf) return true;
    }
    if (form == stem + "ing") return true;
  }
  // Consonant + y: carry/carries/carried, happy/happier/happiest.
  if (last == 'y' && !is_vowel(base[base.size() - 2])) {
    const std::string stem = base.substr(0, base.size() - 1);
    for (const char* suf : {"ies", "ied", "ier", "iest"}) {
      if (form == stem + suf) return true;
    }
  }
  // Consonant-vowel-consonant ending doubles: run/running, big/bigger.
  if (base.size() >= 3 && !is_vowel(last) && last != 'w' && last != 'x' && last != 'y' &&
      is_vowel(base[base.size() - 2]) && !is_vowel(base[base.size() - 3])) {
    for (const char* suf : {"ed", "ing", "er", "est"}) {
      if (form == base + last + suf) return true;
    }
  }
  return false;
}

}  // namespace detail

/// Exact equality, else a rule-based English inflection in either direction
/// (plural -s/-es/-ies, verbal -ed/-d/-ing with consonant doubling and final
/// -e handling, comparative -er/-est), else none. Inputs are compared as
/// given; normalize casing beforehand.
inline MatchKind inflection_match(const std::string& definiendum, const std::string& token) {
  if (definiendum == token) return MatchKind::kExact;
  if (detail::is_inflection_of(definiendum, token) || detail::is_inflection_of(token, definiendum)) {
    return MatchKind::kInflected;
  }
  return MatchKind::kNone;
}

/// Strongest match kind of the definiendum anywhere in the context.
inline MatchKind best_match(const DefinitionExample& ex, bool lower = true) {
  if (!ex.context) return MatchKind::kNone;
  const std::string w = lower ? lowercase(ex.word) : ex.word;
  MatchKind best = MatchKind::kNone;
  for (const auto& tok : *ex.context) {
    const MatchKind k = inflection_match(w, lower ? lowercase(tok) : tok);
    if (k == MatchKind::kExact) return k;
    if (k == MatchKind::kInflected) best = k;
  }
  return best;
}

/// Keeps a cue only if it contains the definiendum or an inflected form;
/// the first such token becomes the mark.
inline std::optional<DefinitionExample> curate_context(const DefinitionExample& ex, bool lower = true) {
  if (!ex.context) raise<DataError>("curate_context: example for '", ex.word, "' has no context");
  const std::string w = lower ? lowercase(ex.word) : ex.word;
  for (std::size_t i = 0; i < ex.context->size(); ++i) {
    const std::string tok = lower ? lowercase((*ex.context)[i]) : (*ex.context)[i];
    if (inflection_match(w, tok) != MatchKind::kNone) {
      DefinitionExample out = ex;
      out.mark_index = i;
      return out;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Statistics

struct CorpusStats {
  std::size_t count = 0;
  double definition_length_mean = 0.0;
  double definition_length_std = 0.0;  // population
  double single_word_fraction = 0.0;
  std::size_t with_context = 0;
  std::size_t exact = 0;
  std::size_t inflected = 0;
  std::size_t no_match = 0;

  /// Fraction of contextual examples with an exact or inflected occurrence.
  double match_rate() const {
    return with_context ? static_cast<double>(exact + inflected) / static_cast<double>(with_context) : 0.0;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["count"] = count;
    j["definition_length_mean"] = definition_length_mean;
    j["definition_length_std"] = definition_length_std;
    j["single_word_fraction"] = single_word_fraction;
    j["with_context"] = with_context;
    if (with_context) {
      j["match"] = {{"exact", exact}, {"inflected", inflected}, {"none", no_match}, {"rate", match_rate()}};
    }
    return j;
  }
};

inline CorpusStats corpus_stats(const std::vector<DefinitionExample>& examples, bool lower = true) {
  if (examples.empty()) raise<DataError>("corpus_stats: empty corpus");
  CorpusStats s;
  s.count = examples.size();
  double total = 0.0;
  std::size_t singles = 0;
  for (const auto& ex : examples) {
    total += static_cast<double>(ex.definition.size());
    singles += ex.definition.size() == 1;
    if (ex.context) {
      ++s.with_context;
      switch (best_match(ex, lower)) {
        case MatchKind::kExact: ++s.exact; break;
        case MatchKind::kInflected: ++s.inflected; break;
        case MatchKind::kNone: ++s.no_match; break;
      }
    }
  }
  const auto n = static_cast<double>(s.count);
  s.definition_length_mean = total / n;
  double sq = 0.0;
  for (const auto& ex : examples) {
    const double dlen = static_cast<double>(ex.definition.size()) - s.definition_length_mean;
    sq += dlen * dlen;
  }
  s.definition_length_std = std::sqrt(sq / n);
  s.single_word_fraction = static_cast<double>(singles) / n;
  return s;
}

}  // namespace defmod
