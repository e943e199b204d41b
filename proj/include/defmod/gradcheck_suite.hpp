// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Finite-difference checks over every differentiable primitive and a small
// end-to-end model, shared by the test suite, the CLI and the acceptance run.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "defmod/attention.hpp"
#include "defmod/gradcheck.hpp"
#include "defmod/ops.hpp"
#include "defmod/random.hpp"
#include "defmod/transformer.hpp"

namespace defmod {

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

inline constexpr double kPrimitiveTolerance = 1e-4;
inline constexpr double kModelTolerance = 1e-3;

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> data(shape_size(shape));
  for (auto& x : data) x = scale * rng.normal();
  return Tensor<double>(std::move(shape), std::move(data), true);
}

// Weighted sum so every output element reaches the loss with a distinct
// coefficient (a plain sum hides errors that cancel across elements).
inline Tensor<double> probe_sum(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.size());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(y, Tensor<double>(y.shape(), std::move(w))));
}

}  // namespace detail

/// A d_model = 8 model (1 encoder + 1 decoder layer per side, ADD marking)
/// and a two-example batch; used by the end-to-end check.
struct MiniatureModel {
  Seq2Seq<double> model;
  Batch batch;
};

inline MiniatureModel make_miniature_model(std::uint64_t seed, std::size_t enc_layers = 2,
                                           std::size_t dec_layers = 2) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.enc_layers = enc_layers;
  cfg.dec_layers = dec_layers;
  cfg.ffn_dim = 16;
  cfg.dropout = 0.0;
  cfg.marking = MarkingMode::kAdd;
  cfg.max_src_len = 8;
  cfg.max_tgt_len = 8;
  Vocabulary enc = build_vocab({"a", "b", "c", "d"});
  Vocabulary dec = build_vocab({"x", "y", "z"});
  Rng rng(seed);
  auto enc_table = random_table<double>(enc.size(), cfg.d_model, rng);
  auto dec_table = random_table<double>(dec.size(), cfg.d_model, rng);
  Seq2Seq<double> model(cfg, enc, dec, enc_table, dec_table, rng);
  // Biases and gains are perturbed away from 0/1 so their gradients are
  // exercised in a generic regime.
  for (auto& [name, t] : model.params().items()) {
    if (t.rank() == 1) {
      for (auto& x : t.mutable_data()) x += 0.1 * rng.normal();
    }
  }
  std::vector<EncodedExample> examples(2);
  examples[0].source = {{enc.id("a"), enc.id("b"), enc.id("c")}, {0, 1, 0}, 1};
  examples[0].definition = {dec.id("x"), dec.id("y")};
  examples[1].source = {{enc.id("d"), enc.id("a")}, {1, 0}, 0};
  examples[1].definition = {dec.id("z")};
  return {std::move(model), make_batch(examples)};
}

/// Runs the primitive checks and the end-to-end check in double precision.
inline std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
  using detail::probe_sum;
  using detail::random_tensor;
  using Inputs = std::vector<Tensor<double>>;
  Rng rng(seed);
  std::vector<GradCheckCase> out;
  auto check = [&](const std::string& name, const std::function<Tensor<double>(const Inputs&)>& fn, Inputs in,
                   double tol = kPrimitiveTolerance) {
    out.push_back({name, grad_check(fn, std::move(in), 1e-5, tol)});
  };

  check("linear_map", [](const Inputs& x) { return sum(scale(x[0], 3.0)); }, {random_tensor({3, 4}, rng)});
  check("matmul", [](const Inputs& x) { return probe_sum(matmul(x[0], x[1]), 1); },
        {random_tensor({4, 5}, rng), random_tensor({5, 3}, rng)});
  check("add", [](const Inputs& x) { return probe_sum(add(x[0], x[1]), 2); },
        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  check("mul", [](const Inputs& x) { return probe_sum(mul(x[0], x[1]), 3); },
        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  check("scale", [](const Inputs& x) { return probe_sum(scale(x[0], -0.7), 4); }, {random_tensor({2, 5}, rng)});
  check("add_row", [](const Inputs& x) { return probe_sum(add_row(x[0], x[1]), 5); },
        {random_tensor({4, 3}, rng), random_tensor({3}, rng)});
  check("relu", [](const Inputs& x) { return probe_sum(relu(x[0]), 6); }, {random_tensor({4, 4}, rng)});
  check("sum", [](const Inputs& x) { return sum(x[0]); }, {random_tensor({3, 3}, rng)});
  check("gather_rows",
        [](const Inputs& x) {
          const std::vector<std::size_t> ids{2, 0, 2, 3};
          return probe_sum(gather_rows(x[0], std::span<const std::size_t>(ids)), 7);
        },
        {random_tensor({4, 3}, rng)});
  check("override_rows",
        [](const Inputs& x) {
          const std::vector<std::size_t> pos{0, 3}, src{1, 0};
          return probe_sum(override_rows(x[0], std::span<const std::size_t>(pos), x[1],
                                         std::span<const std::size_t>(src)),
                           8);
        },
        {random_tensor({4, 3}, rng), random_tensor({2, 3}, rng)});
  check("concat_rows", [](const Inputs& x) { return probe_sum(concat_rows<double>({x[0], x[1]}), 9); },
        {random_tensor({2, 3}, rng), random_tensor({1, 3}, rng)});
  check("softmax",
        [](const Inputs& x) {
          const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 0};
          return probe_sum(softmax(x[0], std::optional<std::span<const std::uint8_t>>(mask)), 10);
        },
        {random_tensor({3, 4}, rng)});
  check("layer_norm", [](const Inputs& x) { return probe_sum(layer_norm(x[0], x[1], x[2]), 11); },
        {random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)});
  check("dropout",
        [](const Inputs& x) {
          Rng fixed(99);
          return probe_sum(dropout(x[0], 0.4, true, fixed), 12);
        },
        {random_tensor({4, 5}, rng)});
  check("attention",
        [](const Inputs& x) {
          AttentionMask mask = AttentionMask::padding({3, 2}, 2, 3);
          return probe_sum(scaled_dot_attention(x[0], x[1], x[2], mask, 2, 0.0, false, nullptr), 13);
        },
        {random_tensor({4, 4}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)});
  check("embedding_lookup_learned",
        [](const Inputs& x) {
          const std::vector<std::size_t> ids{1, 1, 0};
          return probe_sum(matmul(gather_rows(x[0], std::span<const std::size_t>(ids)), x[1]), 14);
        },
        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  check("cross_entropy_smoothed",
        [](const Inputs& x) {
          const std::vector<std::size_t> gold{1, 0, 4, 2};
          return cross_entropy_smoothed(x[0], std::span<const std::size_t>(gold), 0.1, 0).loss;
        },
        {random_tensor({4, 5}, rng)});
  check("softmax_nll",
        [](const Inputs& x) {
          const std::vector<std::size_t> gold{2, 3, 1};
          return cross_entropy_smoothed(x[0], std::span<const std::size_t>(gold), 0.0, 0).loss;
        },
        {random_tensor({3, 6}, rng)});

  MiniatureModel mini = make_miniature_model(seed);
  Inputs params;
  for (auto& [name, t] : mini.model.params().items()) params.push_back(t);
  check("end_to_end_d8", [&mini](const Inputs&) { return mini.model.forward(mini.batch).loss; }, params,
        kModelTolerance);
  return out;
}

}  // namespace defmod
