// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Glue between corpora and models: vocabularies, id encoding, and model
// (de)serialization through checkpoints.

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "defmod/checkpoint.hpp"
#include "defmod/config.hpp"
#include "defmod/datasets.hpp"
#include "defmod/embeddings.hpp"
#include "defmod/marking.hpp"
#include "defmod/optim.hpp"
#include "defmod/transformer.hpp"

namespace defmod {

struct Vocabularies {
  Vocabulary encoder;
  Vocabulary decoder;
};

/// Encoder vocabulary from source sides only (the definiendum alone without
/// context, else the context tokens); decoder vocabulary from definitions
/// only, so words seen solely as definienda are never produced.
inline Vocabularies build_vocabularies(const std::vector<DefinitionExample>& examples, const ModelConfig& cfg) {
  auto norm = [&](const std::string& s) { return cfg.lowercase ? lowercase(s) : s; };
  std::vector<std::string> src, tgt;
  for (const auto& ex : examples) {
    if (is_contextual(cfg.marking)) {
      if (ex.context) {
        for (const auto& t : *ex.context) src.push_back(norm(t));
      }
    } else {
      src.push_back(norm(ex.word));
    }
    for (const auto& t : ex.definition) tgt.push_back(norm(t));
  }
  return {build_vocab(src, cfg.min_freq), build_vocab(tgt, cfg.min_freq)};
}

struct EncodedCorpus {
  std::vector<EncodedExample> examples;
  std::vector<std::string> definienda;  // surface form per kept example
  std::size_t dropped_too_long = 0;
};

/// Maps examples to ids for a model's marking mode. Examples longer than
/// the configured maxima are dropped and counted.
inline EncodedCorpus encode_corpus(const std::vector<DefinitionExample>& examples, const ModelConfig& cfg,
                                   const Vocabularies& vocabs) {
  EncodedCorpus out;
  for (const auto& ex : examples) {
    const std::size_t src_len = is_contextual(cfg.marking) && ex.context ? ex.context->size() : 1;
    if (src_len > cfg.max_src_len || ex.definition.size() + 1 > cfg.max_tgt_len) {
      ++out.dropped_too_long;
      continue;
    }
    EncodedExample enc;
    enc.source = build_source(ex, cfg.marking, vocabs.encoder, cfg.lowercase, cfg.max_src_len);
    for (const auto& t : ex.definition) enc.definition.push_back(vocabs.decoder.id(cfg.lowercase ? lowercase(t) : t));
    out.examples.push_back(std::move(enc));
    out.definienda.push_back(ex.word);
  }
  return out;
}

/// Training counters persisted with every checkpoint.
struct TrainingState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t cursor = 0;  // next micro-batch within the epoch
  double best_perplexity = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t bad_checkpoints = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"epoch", epoch},
            {"cursor", cursor},
            {"best_perplexity", std::isfinite(best_perplexity) ? nlohmann::json(best_perplexity) : nlohmann::json()},
            {"best_step", best_step},
            {"bad_checkpoints", bad_checkpoints},
            {"seed", seed}};
  }
  static TrainingState from_json(const nlohmann::json& j) {
    TrainingState s;
    s.step = j.at("step").get<std::size_t>();
    s.epoch = j.at("epoch").get<std::size_t>();
    s.cursor = j.at("cursor").get<std::size_t>();
    s.best_perplexity =
        j.at("best_perplexity").is_null() ? std::numeric_limits<double>::infinity() : j["best_perplexity"].get<double>();
    s.best_step = j.at("best_step").get<std::size_t>();
    s.bad_checkpoints = j.at("bad_checkpoints").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }
};

inline constexpr const char* kEncoderTableName = "embed.encoder";
inline constexpr const char* kDecoderTableName = "embed.decoder";

namespace detail {

inline std::string provenance_string(const std::vector<Provenance>& p) {
  std::string s(p.size(), 'r');
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == Provenance::kPretrained) s[i] = 'p';
  }
  return s;
}

inline std::vector<Provenance> parse_provenance(const std::string& s) {
  std::vector<Provenance> p(s.size(), Provenance::kRandomInit);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == 'p') p[i] = Provenance::kPretrained;
  }
  return p;
}

}  // namespace detail

/// Serializes model, optional optimizer state and training counters.
template <typename T>
Checkpoint snapshot(const Seq2Seq<T>& model, const Adam<T>* optimizer = nullptr, const TrainingState* state = nullptr,
                    const TrainConfig* train_config = nullptr) {
  Checkpoint ck;
  auto& meta = ck.metadata;
  meta["model_config"] = model.config().to_json();
  meta["encoder_vocab"] = model.encoder_vocab().tokens();
  meta["decoder_vocab"] = model.decoder_vocab().tokens();
  meta["encoder_provenance"] = detail::provenance_string(model.encoder_table().provenance);
  meta["decoder_provenance"] = detail::provenance_string(model.decoder_table().provenance);
  meta["frozen"] = {kEncoderTableName, kDecoderTableName};
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : model.params().items()) names.push_back(name);
  meta["parameters"] = names;
  if (train_config) meta["train_config"] = train_config->to_json();
  if (state) {
    meta["training_state"] = state->to_json();
    // Dropout streams and batch order are derived from (seed, step) and
    // (seed, epoch), so the seed and counters are the whole RNG state.
    meta["rng"] = {{"seed", state->seed}, {"step", state->step}, {"epoch", state->epoch}};
  }

  ck.tensors.emplace_back(kEncoderTableName, convert<float>(model.encoder_table().matrix));
  ck.tensors.emplace_back(kDecoderTableName, convert<float>(model.decoder_table().matrix));
  for (const auto& [name, t] : model.params().items()) ck.tensors.emplace_back(name, convert<float>(t));
  if (optimizer) {
    const auto& h = optimizer->hyper();
    meta["optimizer"] = {{"step", optimizer->step_count()}, {"lr_factor", h.lr_factor}, {"d_model", h.d_model},
                         {"warmup", h.warmup},          {"beta1", h.beta1},         {"beta2", h.beta2},
                         {"eps", h.eps}};
    const auto& items = model.params().items();
    for (std::size_t p = 0; p < items.size(); ++p) {
      const auto& shape = items[p].second.shape();
      const auto& m = optimizer->first_moments()[p];
      const auto& v = optimizer->second_moments()[p];
      ck.tensors.emplace_back("adam.m." + items[p].first, Tensor<float>(shape, std::vector<float>(m.begin(), m.end())));
      ck.tensors.emplace_back("adam.v." + items[p].first, Tensor<float>(shape, std::vector<float>(v.begin(), v.end())));
    }
  }
  return ck;
}

/// Rebuilds a model from a checkpoint.
template <typename T>
Seq2Seq<T> restore_model(const Checkpoint& ck) {
  const auto& meta = ck.metadata;
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(meta.at("model_config"));
  } catch (const nlohmann::json::exception& e) {
    raise<FormatVersionError>("checkpoint model config unreadable: ", e.what());
  }
  Vocabulary enc = Vocabulary::from_tokens(meta.at("encoder_vocab").get<std::vector<std::string>>());
  Vocabulary dec = Vocabulary::from_tokens(meta.at("decoder_vocab").get<std::vector<std::string>>());
  EmbeddingTable<T> enc_table{convert<T>(ck.tensor(kEncoderTableName)),
                              detail::parse_provenance(meta.at("encoder_provenance").get<std::string>()), true};
  EmbeddingTable<T> dec_table{convert<T>(ck.tensor(kDecoderTableName)),
                              detail::parse_provenance(meta.at("decoder_provenance").get<std::string>()), true};
  Rng unused(0);
  Seq2Seq<T> model(cfg, std::move(enc), std::move(dec), std::move(enc_table), std::move(dec_table), unused);
  for (auto& [name, t] : model.params().items()) {
    const Tensor<float>& stored = ck.tensor(name);
    if (stored.shape() != t.shape()) {
      raise<FormatVersionError>("parameter '", name, "' has shape ", shape_string(stored.shape()), " in checkpoint, ",
                                shape_string(t.shape()), " in model");
    }
    std::copy(stored.data().begin(), stored.data().end(), t.mutable_data().begin());
  }
  return model;
}

template <typename T>
Adam<T> restore_optimizer(const Checkpoint& ck, const Seq2Seq<T>& model) {
  const auto& o = ck.metadata.at("optimizer");
  typename Adam<T>::Hyper h;
  h.lr_factor = o.at("lr_factor").get<double>();
  h.d_model = o.at("d_model").get<std::size_t>();
  h.warmup = o.at("warmup").get<std::size_t>();
  h.beta1 = o.at("beta1").get<double>();
  h.beta2 = o.at("beta2").get<double>();
  h.eps = o.at("eps").get<double>();
  Adam<T> adam(model.params(), h);
  adam.set_step_count(o.at("step").get<std::size_t>());
  const auto& items = model.params().items();
  for (std::size_t p = 0; p < items.size(); ++p) {
    const auto& m = ck.tensor("adam.m." + items[p].first);
    const auto& v = ck.tensor("adam.v." + items[p].first);
    std::copy(m.data().begin(), m.data().end(), adam.first_moments()[p].begin());
    std::copy(v.data().begin(), v.data().end(), adam.second_moments()[p].begin());
  }
  return adam;
}

}  // namespace defmod
