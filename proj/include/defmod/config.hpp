// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"

#include "defmod/error.hpp"

namespace defmod {

/// How the source sequence is built and handed to the decoder.
///  - non_contextual: the source is the definiendum alone.
///  - add: learned marker vectors D / C are added to definiendum / context
///    embeddings before encoding.
///  - select: the full context is encoded, then only the definiendum's
///    encoded row is kept as decoder memory.
enum class MarkingMode { kNonContextual, kAdd, kSelect };

inline const char* to_string(MarkingMode m) {
  switch (m) {
    case MarkingMode::kAdd: return "add";
    case MarkingMode::kSelect: return "select";
    default: return "none";
  }
}

inline MarkingMode parse_marking(const std::string& s) {
  if (s == "none" || s == "non_contextual") return MarkingMode::kNonContextual;
  if (s == "add") return MarkingMode::kAdd;
  if (s == "select") return MarkingMode::kSelect;
  raise<ConfigError>("unknown marking mode '", s, "' (expected none, add or select)");
}

inline bool is_contextual(MarkingMode m) { return m != MarkingMode::kNonContextual; }

struct ModelConfig {
  std::size_t d_model = 300;
  std::size_t heads = 6;
  std::size_t enc_layers = 1;
  std::size_t dec_layers = 6;
  std::size_t ffn_dim = 1200;
  double dropout = 0.4;
  double label_smoothing = 0.1;
  std::size_t max_src_len = 128;
  std::size_t max_tgt_len = 64;
  MarkingMode marking = MarkingMode::kNonContextual;
  bool scale_embeddings = true;
  // Dropout on the embedded input after positions are added.
  bool input_dropout = true;
  bool lowercase = true;
  std::size_t min_freq = 1;

  /// Encoder depth implied by the marking mode: 1 without context, 6 with.
  static std::size_t default_enc_layers(MarkingMode m) { return is_contextual(m) ? 6 : 1; }

  void validate() const {
    if (d_model == 0 || heads == 0 || d_model % heads != 0) {
      raise<ConfigError>("d_model ", d_model, " must be a positive multiple of heads ", heads);
    }
    if (d_model % 2 != 0) raise<ConfigError>("d_model must be even for sinusoidal positions");
    if (dec_layers == 0 || ffn_dim == 0) raise<ConfigError>("dec_layers and ffn_dim must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) raise<ConfigError>("dropout must lie in [0, 1)");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      raise<ConfigError>("label_smoothing must lie in [0, 1)");
    }
    if (max_src_len == 0 || max_tgt_len < 2) raise<ConfigError>("max lengths too small");
    if (min_freq == 0) raise<ConfigError>("min_freq must be positive");
  }

  nlohmann::ordered_json to_json() const {
    return {{"d_model", d_model},       {"heads", heads},
            {"enc_layers", enc_layers}, {"dec_layers", dec_layers},
            {"ffn_dim", ffn_dim},       {"dropout", dropout},
            {"label_smoothing", label_smoothing}, {"max_src_len", max_src_len},
            {"max_tgt_len", max_tgt_len}, {"marking", to_string(marking)},
            {"scale_embeddings", scale_embeddings}, {"input_dropout", input_dropout},
            {"lowercase", lowercase},   {"min_freq", min_freq}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.enc_layers = j.at("enc_layers").get<std::size_t>();
    c.dec_layers = j.at("dec_layers").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.label_smoothing = j.at("label_smoothing").get<double>();
    c.max_src_len = j.at("max_src_len").get<std::size_t>();
    c.max_tgt_len = j.at("max_tgt_len").get<std::size_t>();
    c.marking = parse_marking(j.at("marking").get<std::string>());
    c.scale_embeddings = j.at("scale_embeddings").get<bool>();
    c.input_dropout = j.at("input_dropout").get<bool>();
    c.lowercase = j.at("lowercase").get<bool>();
    c.min_freq = j.at("min_freq").get<std::size_t>();
    return c;
  }
};

enum class BatchUnit { kTokens, kExamples };

struct TrainConfig {
  // Budget per optimizer step; split evenly over `accumulation` micro-batches.
  std::size_t batch_tokens = 8192;
  BatchUnit batch_unit = BatchUnit::kTokens;
  std::size_t accumulation = 1;
  std::size_t max_steps = 120000;
  std::size_t checkpoint_every = 1000;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  double lr_factor = 2.0;
  std::size_t warmup = 2000;
  double beta1 = 0.99;
  double beta2 = 0.998;
  double adam_eps = 1e-9;

  void validate() const {
    if (batch_tokens == 0 || accumulation == 0 || max_steps == 0 || checkpoint_every == 0 ||
        patience == 0 || warmup == 0) {
      raise<ConfigError>("training sizes and counts must all be positive");
    }
    if (batch_tokens < accumulation) raise<ConfigError>("batch budget smaller than accumulation factor");
    if (lr_factor < 0.0) raise<ConfigError>("lr_factor must be non-negative");
  }

  std::size_t micro_budget() const { return batch_tokens / accumulation; }

  nlohmann::ordered_json to_json() const {
    return {{"batch_tokens", batch_tokens},
            {"batch_unit", batch_unit == BatchUnit::kTokens ? "tokens" : "examples"},
            {"accumulation", accumulation}, {"max_steps", max_steps},
            {"checkpoint_every", checkpoint_every}, {"patience", patience},
            {"seed", seed}, {"lr_factor", lr_factor}, {"warmup", warmup},
            {"beta1", beta1}, {"beta2", beta2}, {"adam_eps", adam_eps}};
  }
};

/// Flat `key = value` text; '#' starts a comment. Later keys win.
using KeyValues = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::pair<std::string, std::string> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) raise<ConfigError>("expected key=value, got '", text, "'");
  auto key = trim(text.substr(0, eq));
  if (key.empty()) raise<ConfigError>("empty key in '", text, "'");
  return {key, trim(text.substr(eq + 1))};
}

inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      auto [k, v] = parse_assignment(line);
      kv[k] = v;
    } catch (const ConfigError& e) {
      raise<ConfigError>("config line ", line_no, ": ", e.what());
    }
  }
  return kv;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise<IoError>("cannot open config ", path);
  return parse_key_values(in);
}

namespace detail {

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) raise<ConfigError>(key, ": not a non-negative integer: '", v, "'");
  return out;
}

inline double to_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) raise<ConfigError>(key, ": not a number: '", v, "'");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  raise<ConfigError>(key, ": not a boolean: '", v, "'");
}

}  // namespace detail

/// Applies key/values onto the configs. Unknown keys are an error. When
/// `enc_layers` is not given it follows the marking mode.
inline void apply_key_values(const KeyValues& kv, ModelConfig& model, TrainConfig& train) {
  using namespace detail;
  for (const auto& [k, v] : kv) {
    if (k == "d_model") model.d_model = to_size(k, v);
    else if (k == "heads") model.heads = to_size(k, v);
    else if (k == "enc_layers") model.enc_layers = to_size(k, v);
    else if (k == "dec_layers") model.dec_layers = to_size(k, v);
    else if (k == "ffn_dim") model.ffn_dim = to_size(k, v);
    else if (k == "dropout") model.dropout = to_real(k, v);
    else if (k == "label_smoothing") model.label_smoothing = to_real(k, v);
    else if (k == "max_src_len") model.max_src_len = to_size(k, v);
    else if (k == "max_tgt_len") model.max_tgt_len = to_size(k, v);
    else if (k == "marking") model.marking = parse_marking(v);
    else if (k == "scale_embeddings") model.scale_embeddings = to_bool(k, v);
    else if (k == "input_dropout") model.input_dropout = to_bool(k, v);
    else if (k == "lowercase") model.lowercase = to_bool(k, v);
    else if (k == "min_freq") model.min_freq = to_size(k, v);
    else if (k == "batch_tokens") train.batch_tokens = to_size(k, v);
    else if (k == "batch_unit") {
      if (v == "tokens") train.batch_unit = BatchUnit::kTokens;
      else if (v == "examples") train.batch_unit = BatchUnit::kExamples;
      else raise<ConfigError>("batch_unit must be tokens or examples");
    }
    else if (k == "accumulation") train.accumulation = to_size(k, v);
    else if (k == "max_steps") train.max_steps = to_size(k, v);
    else if (k == "checkpoint_every") train.checkpoint_every = to_size(k, v);
    else if (k == "patience") train.patience = to_size(k, v);
    else if (k == "seed") train.seed = to_size(k, v);
    else if (k == "lr_factor") train.lr_factor = to_real(k, v);
    else if (k == "warmup") train.warmup = to_size(k, v);
    else if (k == "beta1") train.beta1 = to_real(k, v);
    else if (k == "beta2") train.beta2 = to_real(k, v);
    else if (k == "adam_eps") train.adam_eps = to_real(k, v);
    else raise<ConfigError>("unknown config key '", k, "'");
  }
  if (!kv.count("enc_layers")) model.enc_layers = ModelConfig::default_enc_layers(model.marking);
}

}  // namespace defmod
