// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "defmod/defmod.hpp"

namespace defmod {
namespace {

// Model over a four-word source vocabulary and three-word definitions.
Seq2Seq<double> small_model(MarkingMode mode, std::size_t enc_layers = 2, std::uint64_t seed = 5,
                            bool scale_embeddings = true) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.enc_layers = enc_layers;
  cfg.dec_layers = 2;
  cfg.ffn_dim = 16;
  cfg.dropout = 0.0;
  cfg.marking = mode;
  cfg.max_src_len = 10;
  cfg.max_tgt_len = 10;
  cfg.scale_embeddings = scale_embeddings;
  Vocabulary enc = build_vocab({"a", "b", "c", "d"});
  Vocabulary dec = build_vocab({"x", "y", "z"});
  Rng rng(seed);
  auto et = random_table<double>(enc.size(), cfg.d_model, rng);
  auto dt = random_table<double>(dec.size(), cfg.d_model, rng);
  return Seq2Seq<double>(cfg, enc, dec, et, dt, rng);
}

EncodedExample example(std::vector<TokenId> src, std::size_t d, std::vector<TokenId> def) {
  EncodedExample ex;
  ex.source.tokens = std::move(src);
  ex.source.indicators.assign(ex.source.tokens.size(), 0);
  ex.source.indicators[d] = 1;
  ex.source.definiendum_index = d;
  ex.definition = std::move(def);
  return ex;
}

std::vector<EncodedExample> three_examples() {
  return {example({4, 5, 6}, 1, {4, 5}), example({7, 4}, 0, {6}), example({5, 6, 7, 4}, 3, {5, 4, 6})};
}

TEST(PositionalEncoding, FirstRowIsSinZeroCosOne) {
  auto pe = positional_encoding<double>(4, 6);
  for (std::size_t i = 0; i < 6; i += 2) {
    EXPECT_EQ(pe.at(0, i), 0.0);
    EXPECT_EQ(pe.at(0, i + 1), 1.0);
  }
}

TEST(PositionalEncoding, DirectEvaluation) {
  auto pe = positional_encoding<double>(4, 6);
  EXPECT_NEAR(pe.at(1, 0), 0.841471, 1e-5);
  EXPECT_NEAR(pe.at(3, 3), std::cos(3.0 / std::pow(10000.0, 2.0 / 6.0)), 1e-12);
}

TEST(PositionalEncoding, RowsArePairwiseDistinct) {
  auto pe = positional_encoding<double>(128, 300);
  std::set<std::vector<double>> rows;
  for (std::size_t t = 0; t < 128; ++t) {
    rows.insert(std::vector<double>(pe.data().begin() + static_cast<std::ptrdiff_t>(t * 300),
                                    pe.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * 300)));
  }
  EXPECT_EQ(rows.size(), 128u);
}

TEST(PositionalEncoding, OddDimensionIsAConfigError) {
  EXPECT_THROW(positional_encoding<double>(4, 5), ConfigError);
}

TEST(Attention, SingletonMemoryGetsWeightExactlyOne) {
  Rng rng(1);
  auto q = detail::random_tensor({6, 4}, rng);  // 2 batches x 3 queries
  auto kv = detail::random_tensor({2, 4}, rng);
  AttentionProbe probe;
  AttentionMask mask(2, 3, 1);
  scaled_dot_attention(q, kv, kv, mask, 2, 0.0, false, nullptr, &probe);
  ASSERT_FALSE(probe.weights.empty());
  for (const auto& w : probe.weights) {
    for (double x : w) EXPECT_EQ(x, 1.0);
  }
}

TEST(Attention, MaskingAllButOneEqualsSlicing) {
  Rng rng(2);
  auto q = detail::random_tensor({3, 6}, rng);
  auto k = detail::random_tensor({5, 6}, rng);
  auto v = detail::random_tensor({5, 6}, rng);
  const std::size_t j = 3;
  AttentionMask masked(1, 3, 5, 0);
  for (std::size_t i = 0; i < 3; ++i) masked.at(0, i, j) = 1;
  auto full = scaled_dot_attention(q, k, v, masked, 3, 0.0, false, nullptr);
  const std::vector<std::size_t> row{j};
  auto ks = gather_rows(k, std::span<const std::size_t>(row));
  auto vs = gather_rows(v, std::span<const std::size_t>(row));
  auto sliced = scaled_dot_attention(q, ks, vs, AttentionMask(1, 3, 1), 3, 0.0, false, nullptr);
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(full.values()[i], sliced.values()[i], 1e-5);
}

TEST(Attention, WeightRowsSumToOneAndMaskedAreZero) {
  Rng rng(3);
  auto q = detail::random_tensor({8, 6}, rng, 3.0);
  auto k = detail::random_tensor({10, 6}, rng, 3.0);
  AttentionMask mask = AttentionMask::padding({5, 2}, 4, 5);
  AttentionProbe probe;
  scaled_dot_attention(q, k, k, mask, 2, 0.0, false, nullptr, &probe);
  ASSERT_EQ(probe.weights.size(), 1u);
  const auto& w = probe.weights[0];
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 4; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 5; ++j) {
          const double x = w[((b * 2 + h) * 4 + i) * 5 + j];
          s += x;
          if (!mask.at(b, i, j)) {
            EXPECT_EQ(x, 0.0);
          }
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
}

TEST(Attention, FullyMaskedQueryIsAnError) {
  Rng rng(1);
  auto x = detail::random_tensor({2, 4}, rng);
  AttentionMask mask(1, 2, 2, 1);
  mask.at(0, 1, 0) = mask.at(0, 1, 1) = 0;
  EXPECT_THROW(scaled_dot_attention(x, x, x, mask, 2, 0.0, false, nullptr), DegenerateMaskError);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  auto r = grad_check(
      [](const std::vector<Tensor<double>>& x) {
        AttentionMask mask = AttentionMask::causal({3}, 3);
        return detail::probe_sum(scaled_dot_attention(x[0], x[1], x[2], mask, 2, 0.0, false, nullptr), 3);
      },
      {detail::random_tensor({3, 4}, rng), detail::random_tensor({3, 4}, rng), detail::random_tensor({3, 4}, rng)});
  EXPECT_LT(r.worst(), 1e-4);
}

TEST(Encode, EmptyStackIsScaledInputPlusPositions) {
  auto model = small_model(MarkingMode::kSelect, 0);
  const auto exs = three_examples();
  const Batch b = make_batch(std::span<const EncodedExample>(exs.data(), 1));
  auto mem = model.encode(b);
  auto pe = positional_encoding<double>(10, 8);
  const double s = std::sqrt(8.0);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(mem.states.at(t, j), s * model.encoder_table().matrix.at(exs[0].source.tokens[t], j) + pe.at(t, j),
                  1e-12);
}

TEST(Encode, EmptyStackWithoutScaling) {
  auto model = small_model(MarkingMode::kSelect, 0, 5, false);
  const std::vector<EncodedExample> one{example({6}, 0, {4})};
  auto mem = model.encode(make_batch(one));
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_NEAR(mem.states.at(0, j), model.encoder_table().matrix.at(6, j) + (j % 2 ? 1.0 : 0.0), 1e-12);
  }
}

TEST(Encode, PermutingTokensChangesOutput) {
  auto model = small_model(MarkingMode::kSelect);
  const std::vector<EncodedExample> a{example({4, 5, 6}, 0, {4})};
  const std::vector<EncodedExample> b{example({5, 4, 6}, 0, {4})};
  auto ea = model.encode(make_batch(a)).states;
  auto eb = model.encode(make_batch(b)).states;
  // Same multiset of tokens; only positions tell them apart. Row 2 holds
  // the same token at the same position yet still differs through
  // attention over the permuted rows.
  double diff = 0;
  for (std::size_t j = 0; j < 8; ++j) diff += std::abs(ea.at(2, j) - eb.at(2, j));
  EXPECT_GT(diff, 1e-6);
}

TEST(Encode, EvaluationIsBitIdentical) {
  auto model = small_model(MarkingMode::kAdd);
  const auto exs = three_examples();
  const Batch b = make_batch(exs);
  EXPECT_EQ(model.encode(b).states.values(), model.encode(b).states.values());
}

TEST(Encode, OverLongSourceIsALengthError) {
  auto model = small_model(MarkingMode::kSelect);
  const std::vector<EncodedExample> one{example(std::vector<TokenId>(11, 4), 0, {4})};
  EXPECT_THROW(model.encode(make_batch(one)), LengthError);
}

TEST(Decode, TeacherForcingIsCausal) {
  auto model = small_model(MarkingMode::kAdd);
  const std::vector<EncodedExample> one{example({4, 5, 6}, 1, {4, 5, 6, 4, 5})};
  const Batch b = make_batch(one);
  const auto mem = model.memory(b);
  const auto base = model.decode(std::span<const TokenId>(b.tgt_in), 1, b.tgt_len, b.tgt_lengths, mem);
  const std::size_t V = base.cols();
  for (std::size_t t = 0; t + 1 < b.tgt_len; ++t) {
    auto perturbed = b.tgt_in;
    perturbed[t + 1] = perturbed[t + 1] == 4 ? 6 : 4;
    const auto out = model.decode(std::span<const TokenId>(perturbed), 1, b.tgt_len, b.tgt_lengths, mem);
    for (std::size_t r = 0; r <= t; ++r)
      for (std::size_t j = 0; j < V; ++j) EXPECT_EQ(out.at(r, j), base.at(r, j)) << "t=" << t << " row " << r;
    double later = 0;
    for (std::size_t j = 0; j < V; ++j) later += std::abs(out.at(t + 1, j) - base.at(t + 1, j));
    EXPECT_GT(later, 0.0);
  }
}

TEST(Decode, StepMatchesTeacherForcedRow) {
  auto model = small_model(MarkingMode::kAdd);
  const std::vector<EncodedExample> one{example({4, 5}, 0, {5, 6})};
  const Batch b = make_batch(one);
  const auto mem = model.memory(b);
  const auto full = model.decode(std::span<const TokenId>(b.tgt_in), 1, b.tgt_len, b.tgt_lengths, mem);
  const std::vector<TokenId> prefix{kBosId, 5};
  const auto step = model.decode_step(prefix, mem);
  for (std::size_t j = 0; j < step.size(); ++j) EXPECT_NEAR(step[j], full.at(1, j), 1e-9);
  const std::vector<TokenId> bad{5};
  EXPECT_THROW(model.decode_step(bad, mem), DataError);
}

TEST(Decode, SingletonMemoryCrossWeightsAreOne) {
  auto model = small_model(MarkingMode::kSelect);
  const auto exs = three_examples();
  AttentionProbe cross;
  ForwardOptions opt;
  opt.cross_probe = &cross;
  model.forward(make_batch(exs), opt);
  ASSERT_EQ(cross.weights.size(), model.config().dec_layers);
  for (const auto& w : cross.weights)
    for (double x : w) {
      // Padding query rows also see the single memory item.
      EXPECT_EQ(x, 1.0);
    }
}

TEST(Decode, BatchOfOneMatchesBatchedRows) {
  for (auto mode : {MarkingMode::kNonContextual, MarkingMode::kAdd, MarkingMode::kSelect}) {
    auto model = small_model(mode);
    auto exs = three_examples();
    if (mode == MarkingMode::kNonContextual) {
      for (auto& e : exs) e = example({e.source.tokens[e.source.definiendum_index]}, 0, e.definition);
    }
    const Batch all = make_batch(exs);
    const auto mem = model.memory(all);
    const auto logits = model.decode(std::span<const TokenId>(all.tgt_in), all.size, all.tgt_len, all.tgt_lengths, mem);
    for (std::size_t i = 0; i < exs.size(); ++i) {
      const std::vector<EncodedExample> one{exs[i]};
      const Batch b = make_batch(one);
      const auto single =
          model.decode(std::span<const TokenId>(b.tgt_in), 1, b.tgt_len, b.tgt_lengths, model.memory(b));
      for (std::size_t t = 0; t < b.tgt_len; ++t)
        for (std::size_t j = 0; j < single.cols(); ++j)
          EXPECT_NEAR(single.at(t, j), logits.at(i * all.tgt_len + t, j), 1e-5) << to_string(mode);
    }
  }
}

TEST(Decode, LossIgnoresPadContents) {
  auto model = small_model(MarkingMode::kAdd);
  const auto exs = three_examples();
  Batch b = make_batch(exs);
  const double base = model.forward(b).loss.item();
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t t = b.src_lengths[i]; t < b.src_len; ++t) b.src[i * b.src_len + t] = 6;
    for (std::size_t t = b.tgt_lengths[i]; t < b.tgt_len; ++t) b.tgt_in[i * b.tgt_len + t] = 5;
  }
  EXPECT_NEAR(model.forward(b).loss.item(), base, 1e-12);
}

TEST(Decode, OverLongTargetIsALengthError) {
  auto model = small_model(MarkingMode::kAdd);
  const std::vector<EncodedExample> one{example({4}, 0, std::vector<TokenId>(10, 4))};
  EXPECT_THROW(model.forward(make_batch(one)), LengthError);
}

TEST(Seq2Seq, LossIsDeterministicWithoutDropout) {
  auto model = small_model(MarkingMode::kAdd);
  const Batch b = make_batch(three_examples());
  EXPECT_EQ(model.forward(b).loss.item(), model.forward(b).loss.item());
}

TEST(Seq2Seq, DropoutIsSeededByTheCallersRng) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.ffn_dim = 16;
  cfg.dropout = 0.3;
  cfg.marking = MarkingMode::kAdd;
  Vocabulary enc = build_vocab({"a", "b", "c", "d"}), dec = build_vocab({"x", "y", "z"});
  Rng init(1);
  auto et = random_table<double>(enc.size(), 8, init);
  auto dt = random_table<double>(dec.size(), 8, init);
  Seq2Seq<double> model(cfg, enc, dec, et, dt, init);
  const Batch b = make_batch(three_examples());
  auto loss_with = [&](std::uint64_t seed) {
    Rng r(seed);
    ForwardOptions opt;
    opt.training = true;
    opt.rng = &r;
    return model.forward(b, opt).loss.item();
  };
  EXPECT_EQ(loss_with(1), loss_with(1));
  EXPECT_NE(loss_with(1), loss_with(2));
  EXPECT_NE(loss_with(1), model.forward(b).loss.item());
}

TEST(Seq2Seq, ParameterInventoryIsStableAndComplete) {
  auto add = small_model(MarkingMode::kAdd);
  auto sel = small_model(MarkingMode::kSelect);
  EXPECT_TRUE(add.params().contains("marker.D"));
  EXPECT_TRUE(add.params().contains("marker.C"));
  EXPECT_FALSE(sel.params().contains("marker.D"));
  EXPECT_TRUE(add.params().contains("out.w"));
  EXPECT_TRUE(add.params().contains("dec.control"));
  EXPECT_TRUE(add.params().contains("enc.1.ffn.w2"));
  EXPECT_TRUE(add.params().contains("dec.1.cross.wq"));
  std::vector<std::string> n1, n2;
  for (const auto& [n, t] : add.params().items()) n1.push_back(n);
  const auto reseeded = small_model(MarkingMode::kAdd, 2, 99);
  for (const auto& [n, t] : reseeded.params().items()) n2.push_back(n);
  EXPECT_EQ(n1, n2);
  // Frozen tables are excluded from the learned parameter count.
  std::size_t learned = 0;
  for (const auto& [n, t] : add.params().items()) learned += t.size();
  EXPECT_EQ(add.trainable_parameter_count(), learned);
}

TEST(Seq2Seq, XavierInitStaysWithinBound) {
  auto model = small_model(MarkingMode::kAdd);
  const auto& w = model.params().get("dec.0.ffn.w1");  // 8 x 16
  const double bound = std::sqrt(6.0 / (8.0 + 16.0));
  for (double x : w.values()) EXPECT_LE(std::abs(x), bound);
  for (double x : model.params().get("dec.0.ffn.b1").values()) EXPECT_EQ(x, 0.0);
  for (double x : model.params().get("dec.0.ln1.gain").values()) EXPECT_EQ(x, 1.0);
}

TEST(Seq2Seq, DecoderControlRowsAreLearnedButTablesAreNot) {
  auto model = small_model(MarkingMode::kAdd);
  backward(model.forward(make_batch(three_examples())).loss);
  EXPECT_TRUE(model.params().get("dec.control").has_grad());
  EXPECT_TRUE(model.params().get("marker.D").has_grad());
  EXPECT_FALSE(model.encoder_table().matrix.has_grad());
  EXPECT_FALSE(model.decoder_table().matrix.has_grad());
}

TEST(Seq2Seq, ModelWidthMustMatchTables) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  Vocabulary v = build_vocab({"a"});
  Rng rng(1);
  EXPECT_THROW(Seq2Seq<double>(cfg, v, v, random_table<double>(v.size(), 6, rng),
                               random_table<double>(v.size(), 8, rng), rng),
               ConfigError);
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Seq2Seq, UnseenDefiniendaGetFrozenRandomRows) {
  auto model = small_model(MarkingMode::kNonContextual);
  const auto before = model.trainable_parameter_count();
  Rng rng(3);
  EXPECT_EQ(model.extend_encoder_vocabulary({"a", "monotreme", "monotreme"}, rng), 1u);
  EXPECT_TRUE(model.encoder_vocab().contains("monotreme"));
  EXPECT_EQ(model.encoder_table().rows(), model.encoder_vocab().size());
  EXPECT_EQ(model.encoder_table().provenance.back(), Provenance::kRandomInit);
  EXPECT_EQ(model.trainable_parameter_count(), before);
}

}  // namespace
}  // namespace defmod
