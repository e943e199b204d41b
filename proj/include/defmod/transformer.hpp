// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Post-layer-norm Transformer encoder-decoder over frozen word embeddings.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "defmod/attention.hpp"
#include "defmod/config.hpp"
#include "defmod/embeddings.hpp"
#include "defmod/error.hpp"
#include "defmod/marking.hpp"
#include "defmod/ops.hpp"
#include "defmod/random.hpp"
#include "defmod/tensor.hpp"
#include "defmod/vocab.hpp"

namespace defmod {

/// Sinusoidal positions: PE[t, 2i] = sin(t / 10000^(2i/d)),
/// PE[t, 2i+1] = cos(t / 10000^(2i/d)).
template <typename T>
Tensor<T> positional_encoding(std::size_t max_len, std::size_t d) {
  if (d == 0 || d % 2 != 0) raise<ConfigError>("positional_encoding: dimension must be even, got ", d);
  std::vector<T> pe(max_len * d);
  for (std::size_t t = 0; t < max_len; ++t) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle = static_cast<double>(t) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe[t * d + 2 * i] = static_cast<T>(std::sin(angle));
      pe[t * d + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>({max_len, d}, std::move(pe));
}

/// Named learned tensors in a stable insertion order.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) raise<ConfigError>("duplicate parameter '", name, "'");
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) raise<ConfigError>("unknown parameter '", name, "'");
    return items_[it->second].second;
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).get(name));
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Xavier/Glorot uniform for a fan_in x fan_out matrix.
template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> data(fan_in * fan_out);
  for (auto& x : data) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>({fan_in, fan_out}, std::move(data));
}

/// One training/evaluation pair: marked source and definition ids (decoder
/// vocabulary, without BOS/EOS).
struct EncodedExample {
  MarkedSequence source;
  std::vector<TokenId> definition;
};

/// Padded batch. Sources are [batch x src_len]; decoder inputs are
/// BOS + definition and outputs are definition + EOS, both [batch x tgt_len].
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<TokenId> src;
  std::vector<std::uint8_t> indicators;
  std::vector<std::size_t> src_lengths;
  std::vector<std::size_t> definiendum_index;
  std::vector<TokenId> tgt_in;
  std::vector<TokenId> tgt_out;
  std::vector<std::size_t> tgt_lengths;

  /// Non-pad target tokens, EOS included.
  std::size_t target_tokens() const {
    std::size_t n = 0;
    for (auto l : tgt_lengths) n += l;
    return n;
  }
  std::size_t padded_tokens() const { return size * (src_len + tgt_len); }
};

inline Batch make_batch(std::span<const EncodedExample> examples) {
  if (examples.empty()) raise<DataError>("make_batch: no examples");
  Batch b;
  b.size = examples.size();
  for (const auto& ex : examples) {
    b.src_len = std::max(b.src_len, ex.source.size());
    b.tgt_len = std::max(b.tgt_len, ex.definition.size() + 1);
  }
  b.src.assign(b.size * b.src_len, kPadId);
  b.indicators.assign(b.size * b.src_len, 0);
  b.tgt_in.assign(b.size * b.tgt_len, kPadId);
  b.tgt_out.assign(b.size * b.tgt_len, kPadId);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& ex = examples[i];
    const auto n = ex.source.size();
    std::copy(ex.source.tokens.begin(), ex.source.tokens.end(), b.src.begin() + static_cast<std::ptrdiff_t>(i * b.src_len));
    std::copy(ex.source.indicators.begin(), ex.source.indicators.end(),
              b.indicators.begin() + static_cast<std::ptrdiff_t>(i * b.src_len));
    b.src_lengths.push_back(n);
    b.definiendum_index.push_back(ex.source.definiendum_index);
    const auto m = ex.definition.size();
    b.tgt_in[i * b.tgt_len] = kBosId;
    for (std::size_t t = 0; t < m; ++t) {
      b.tgt_in[i * b.tgt_len + t + 1] = ex.definition[t];
      b.tgt_out[i * b.tgt_len + t] = ex.definition[t];
    }
    b.tgt_out[i * b.tgt_len + m] = kEosId;
    b.tgt_lengths.push_back(m + 1);
  }
  return b;
}

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;
  AttentionProbe* self_probe = nullptr;   // encoder and decoder self-attention
  AttentionProbe* cross_probe = nullptr;  // decoder cross-attention
};

/// Decoder memory: `batch` blocks of `length` rows, valid rows per block in
/// `lengths`.
template <typename T>
struct Memory {
  Tensor<T> states;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> lengths;
};

template <typename T>
class Seq2Seq {
 public:
  Seq2Seq(ModelConfig config, Vocabulary encoder_vocab, Vocabulary decoder_vocab, EmbeddingTable<T> encoder_table,
          EmbeddingTable<T> decoder_table, Rng& init_rng)
      : config_(std::move(config)),
        enc_vocab_(std::move(encoder_vocab)),
        dec_vocab_(std::move(decoder_vocab)),
        enc_table_(std::move(encoder_table)),
        dec_table_(std::move(decoder_table)) {
    config_.validate();
    const std::size_t d = config_.d_model;
    if (enc_table_.dim() != d || dec_table_.dim() != d) {
      raise<ConfigError>("embedding width ", enc_table_.dim(), "/", dec_table_.dim(), " differs from d_model ", d);
    }
    if (enc_table_.rows() != enc_vocab_.size() || dec_table_.rows() != dec_vocab_.size()) {
      raise<ConfigError>("embedding tables do not cover their vocabularies");
    }
    enc_table_.matrix.set_requires_grad(false);
    dec_table_.matrix.set_requires_grad(false);
    positions_ = positional_encoding<T>(std::max(config_.max_src_len, config_.max_tgt_len), d);
    init_params(init_rng);
  }

  const ModelConfig& config() const { return config_; }
  const Vocabulary& encoder_vocab() const { return enc_vocab_; }
  const Vocabulary& decoder_vocab() const { return dec_vocab_; }
  const EmbeddingTable<T>& encoder_table() const { return enc_table_; }
  const EmbeddingTable<T>& decoder_table() const { return dec_table_; }
  EmbeddingTable<T>& encoder_table() { return enc_table_; }
  EmbeddingTable<T>& decoder_table() { return dec_table_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Learned parameter elements; frozen embedding tables are not counted.
  std::size_t trainable_parameter_count() const { return params_.element_count(); }

  /// Adds unseen source tokens (e.g. test-set definienda) with frozen
  /// N(0, 1) rows. Learned parameters are unaffected.
  std::size_t extend_encoder_vocabulary(const std::vector<std::string>& tokens, Rng& rng) {
    std::vector<std::string> fresh;
    for (const auto& t : tokens) {
      if (!enc_vocab_.contains(t) && std::find(fresh.begin(), fresh.end(), t) == fresh.end()) fresh.push_back(t);
    }
    if (fresh.empty()) return 0;
    const std::size_t d = config_.d_model;
    std::vector<T> data(enc_table_.matrix.data().begin(), enc_table_.matrix.data().end());
    for (const auto& t : fresh) {
      enc_vocab_.insert(t);
      for (std::size_t j = 0; j < d; ++j) data.push_back(static_cast<T>(rng.normal()));
      enc_table_.provenance.push_back(Provenance::kRandomInit);
    }
    enc_table_.matrix = Tensor<T>({enc_vocab_.size(), d}, std::move(data));
    return fresh.size();
  }

  /// Encoder output over the full source (markers applied in ADD mode).
  Memory<T> encode(const Batch& batch, const ForwardOptions& opt = {}) const {
    if (batch.src_len > config_.max_src_len) {
      raise<LengthError>("source length ", batch.src_len, " exceeds max_src_len ", config_.max_src_len);
    }
    const std::size_t B = batch.size, L = batch.src_len;
    Tensor<T> x = lookup(enc_table_, std::span<const TokenId>(batch.src));
    if (config_.marking == MarkingMode::kAdd) {
      x = add_markers(x, std::span<const std::uint8_t>(batch.indicators), params_.get("marker.D"),
                      params_.get("marker.C"));
    }
    x = embed_positions(x, B, L, opt);
    const AttentionMask mask = AttentionMask::padding(batch.src_lengths, L, L);
    for (std::size_t l = 0; l < config_.enc_layers; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      x = sublayer(x, attention_block(p + "self.", x, x, mask, opt, opt.self_probe), p + "ln1.", opt);
      x = sublayer(x, feed_forward(p + "ffn.", x), p + "ln2.", opt);
    }
    return {x, B, L, batch.src_lengths};
  }

  /// What the decoder attends to: the full encoding, or in SELECT mode the
  /// single definiendum row per example.
  Memory<T> memory(const Batch& batch, const ForwardOptions& opt = {}) const {
    Memory<T> enc = encode(batch, opt);
    if (config_.marking != MarkingMode::kSelect) return enc;
    std::vector<std::size_t> rows(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b) rows[b] = b * batch.src_len + batch.definiendum_index[b];
    return {gather_rows(enc.states, std::span<const std::size_t>(rows)), batch.size, 1,
            std::vector<std::size_t>(batch.size, 1)};
  }

  /// Teacher-forced decoder logits, (batch * tgt_len) x |V_dec|.
  /// `cross_mask` replaces the memory padding mask when given.
  Tensor<T> decode(std::span<const TokenId> tgt_in, std::size_t batch, std::size_t tgt_len,
                   const std::vector<std::size_t>& tgt_lengths, const Memory<T>& mem, const ForwardOptions& opt = {},
                   const AttentionMask* cross_mask = nullptr) const {
    if (tgt_len > config_.max_tgt_len) {
      raise<LengthError>("target length ", tgt_len, " exceeds max_tgt_len ", config_.max_tgt_len);
    }
    if (mem.batch != batch) raise<DimensionError>("decode: memory batch ", mem.batch, " vs ", batch);
    Tensor<T> y = lookup(dec_table_, tgt_in);
    std::vector<std::size_t> positions, rows;
    for (std::size_t i = 0; i < tgt_in.size(); ++i) {
      if (tgt_in[i] == kBosId || tgt_in[i] == kEosId) {
        positions.push_back(i);
        rows.push_back(tgt_in[i] == kBosId ? 0 : 1);
      }
    }
    if (!positions.empty()) {
      y = override_rows(y, std::span<const std::size_t>(positions), params_.get("dec.control"),
                        std::span<const std::size_t>(rows));
    }
    y = embed_positions(y, batch, tgt_len, opt);
    const AttentionMask self_mask = AttentionMask::causal(tgt_lengths, tgt_len);
    const AttentionMask mem_mask =
        cross_mask ? *cross_mask : AttentionMask::padding(mem.lengths, tgt_len, mem.length);
    for (std::size_t l = 0; l < config_.dec_layers; ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      y = sublayer(y, attention_block(p + "self.", y, y, self_mask, opt, opt.self_probe), p + "ln1.", opt);
      y = sublayer(y, attention_block(p + "cross.", y, mem.states, mem_mask, opt, opt.cross_probe), p + "ln2.",
                   opt);
      y = sublayer(y, feed_forward(p + "ffn.", y), p + "ln3.", opt);
    }
    return add_row(matmul(y, params_.get("out.w")), params_.get("out.b"));
  }

  /// Smoothed training loss plus unsmoothed NLL statistics for a batch. The
  /// loss tensor is the smoothed sum divided by `normalizer` (batch target
  /// tokens when 0).
  CrossEntropyResult<T> forward(const Batch& batch, const ForwardOptions& opt = {}, double normalizer = 0.0,
                                std::optional<double> smoothing = std::nullopt) const {
    const Memory<T> mem = memory(batch, opt);
    const Tensor<T> logits =
        decode(std::span<const TokenId>(batch.tgt_in), batch.size, batch.tgt_len, batch.tgt_lengths, mem, opt);
    return cross_entropy_smoothed(logits, std::span<const TokenId>(batch.tgt_out),
                                  smoothing.value_or(config_.label_smoothing), kPadId, normalizer);
  }

  /// Next-token logits after `prefix` (which starts with BOS) for a single
  /// example's memory.
  std::vector<T> decode_step(std::span<const TokenId> prefix, const Memory<T>& mem) const {
    if (prefix.empty() || prefix.front() != kBosId) raise<DataError>("decode_step: prefix must start with BOS");
    const std::vector<std::size_t> lengths{prefix.size()};
    const Tensor<T> logits = decode(prefix, 1, prefix.size(), lengths, mem);
    const std::size_t v = logits.cols();
    const auto last = logits.data().subspan((prefix.size() - 1) * v, v);
    return {last.begin(), last.end()};
  }

 private:
  void init_params(Rng& rng) {
    const std::size_t d = config_.d_model, f = config_.ffn_dim;
    auto zeros = [](std::size_t n) { return Tensor<T>({n}, T(0)); };
    auto ones = [](std::size_t n) { return Tensor<T>({n}, T(1)); };
    auto attention = [&](const std::string& p) {
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        params_.add(p + w, xavier_uniform<T>(d, d, rng));
        params_.add(p + "b" + std::string(w + 1), zeros(d));
      }
    };
    auto norm = [&](const std::string& p) {
      params_.add(p + "gain", ones(d));
      params_.add(p + "bias", zeros(d));
    };
    auto ffn = [&](const std::string& p) {
      params_.add(p + "w1", xavier_uniform<T>(d, f, rng));
      params_.add(p + "b1", zeros(f));
      params_.add(p + "w2", xavier_uniform<T>(f, d, rng));
      params_.add(p + "b2", zeros(d));
    };
    if (config_.marking == MarkingMode::kAdd) {
      params_.add("marker.D", xavier_uniform<T>(1, d, rng));
      params_.add("marker.C", xavier_uniform<T>(1, d, rng));
    }
    for (std::size_t l = 0; l < config_.enc_layers; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      attention(p + "self.");
      norm(p + "ln1.");
      ffn(p + "ffn.");
      norm(p + "ln2.");
    }
    params_.add("dec.control", xavier_uniform<T>(2, d, rng));
    for (std::size_t l = 0; l < config_.dec_layers; ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      attention(p + "self.");
      norm(p + "ln1.");
      attention(p + "cross.");
      norm(p + "ln2.");
      ffn(p + "ffn.");
      norm(p + "ln3.");
    }
    params_.add("out.w", xavier_uniform<T>(d, dec_vocab_.size(), rng));
    params_.add("out.b", zeros(dec_vocab_.size()));
  }

  // Optional sqrt(d) scaling, then positions 0..len-1 added per block.
  Tensor<T> embed_positions(const Tensor<T>& x, std::size_t batch, std::size_t len, const ForwardOptions& opt) const {
    const std::size_t d = config_.d_model;
    Tensor<T> scaled = config_.scale_embeddings ? scale(x, static_cast<T>(std::sqrt(static_cast<double>(d)))) : x;
    std::vector<T> pe(batch * len * d);
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(positions_.data().begin(), len * d, pe.begin() + static_cast<std::ptrdiff_t>(b * len * d));
    }
    Tensor<T> out = add(scaled, Tensor<T>({batch * len, d}, std::move(pe)));
    if (config_.input_dropout) out = apply_dropout(out, opt);
    return out;
  }

  Tensor<T> apply_dropout(const Tensor<T>& x, const ForwardOptions& opt) const {
    if (!opt.training || config_.dropout == 0.0) return x;
    if (!opt.rng) raise<ConfigError>("training forward pass needs an rng");
    return dropout(x, config_.dropout, true, *opt.rng);
  }

  // LayerNorm(x + Dropout(sub)).
  Tensor<T> sublayer(const Tensor<T>& x, const Tensor<T>& sub, const std::string& norm,
                     const ForwardOptions& opt) const {
    return layer_norm(add(x, apply_dropout(sub, opt)), params_.get(norm + "gain"), params_.get(norm + "bias"));
  }

  Tensor<T> linear(const Tensor<T>& x, const std::string& w, const std::string& b) const {
    return add_row(matmul(x, params_.get(w)), params_.get(b));
  }

  Tensor<T> attention_block(const std::string& p, const Tensor<T>& query, const Tensor<T>& memory,
                            const AttentionMask& mask, const ForwardOptions& opt, AttentionProbe* probe) const {
    const Tensor<T> q = linear(query, p + "wq", p + "bq");
    const Tensor<T> k = linear(memory, p + "wk", p + "bk");
    const Tensor<T> v = linear(memory, p + "wv", p + "bv");
    const Tensor<T> heads = scaled_dot_attention(q, k, v, mask, config_.heads, config_.dropout, opt.training,
                                                 opt.rng, probe);
    return linear(heads, p + "wo", p + "bo");
  }

  Tensor<T> feed_forward(const std::string& p, const Tensor<T>& x) const {
    return linear(relu(linear(x, p + "w1", p + "b1")), p + "w2", p + "b2");
  }

  ModelConfig config_;
  Vocabulary enc_vocab_;
  Vocabulary dec_vocab_;
  EmbeddingTable<T> enc_table_;
  EmbeddingTable<T> dec_table_;
  Tensor<T> positions_;
  ParamStore<T> params_;
};

}  // namespace defmod
