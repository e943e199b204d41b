// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Criterion 9 needs the original corpora and is reported as SKIP
// unless DEFMOD_CORPORA names a directory holding nor.jsonl and gad.jsonl.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "defmod/defmod.hpp"
#include "defmod_cli.hpp"
#include "toy_corpora.hpp"

namespace {

using namespace defmod;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int n, const std::function<Verdict()>& check) {
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  if (!v.pass) ++failures;
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << ": " << v.detail << std::endl;
}

std::string fmt(double x, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << x;
  return s.str();
}

// 1 -------------------------------------------------------------------------
Verdict gradient_suite() {
  const auto t0 = Clock::now();
  const auto cases = run_gradcheck_suite(1);
  const double secs = seconds_since(t0);
  double worst_prim = 0, worst_model = 0;
  bool ok = true;
  for (const auto& c : cases) {
    ok = ok && c.report.passed();
    (c.report.tolerance > kPrimitiveTolerance ? worst_model : worst_prim) =
        std::max(c.report.tolerance > kPrimitiveTolerance ? worst_model : worst_prim, c.report.worst());
  }
  ok = ok && secs < 60.0;
  return {ok, std::to_string(cases.size()) + " checks, worst primitive " + fmt(worst_prim) + ", end-to-end " +
                  fmt(worst_model) + ", " + fmt(secs, 3) + " s"};
}

// 2 -------------------------------------------------------------------------
Verdict attention_invariants() {
  auto mini = make_miniature_model(5);
  auto& model = mini.model;
  // Lengths chosen so that source and target widths differ.
  std::vector<EncodedExample> exs{{{{4, 5, 6, 7, 4}, {0, 0, 1, 0, 0}, 2}, {4, 5}},
                                  {{{5, 6}, {1, 0}, 0}, {6, 4, 5, 6, 4, 5}},
                                  {{{7}, {1}, 0}, {4}}};
  const Batch b = make_batch(exs);
  AttentionProbe self, cross;
  ForwardOptions opt;
  opt.self_probe = &self;
  opt.cross_probe = &cross;
  model.forward(b, opt);
  double worst_sum = 0;
  std::size_t masked_nonzero = 0, rows = 0;
  auto scan = [&](const AttentionProbe& p, bool decoder_self_allowed) {
    for (std::size_t r = 0; r < p.weights.size(); ++r) {
      const std::size_t H = p.heads[r], Q = p.query_len[r], K = p.key_len[r];
      const bool causal = decoder_self_allowed && K == b.tgt_len && Q == b.tgt_len;
      for (std::size_t i0 = 0; i0 < p.batch[r]; ++i0)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t q = 0; q < Q; ++q) {
            const std::size_t valid_keys = K == b.src_len ? b.src_lengths[i0] : b.tgt_lengths[i0];
            double s = 0;
            for (std::size_t k = 0; k < K; ++k) {
              const double w = p.weights[r][((i0 * H + h) * Q + q) * K + k];
              s += w;
              const bool masked = k >= valid_keys || (causal && k > q);
              if (masked && w != 0.0) ++masked_nonzero;
            }
            worst_sum = std::max(worst_sum, std::abs(s - 1.0));
            ++rows;
          }
    }
  };
  scan(self, true);
  scan(cross, false);

  // Singleton memory under SELECT.
  ModelConfig cfg = model.config();
  cfg.marking = MarkingMode::kSelect;
  Rng rng(2);
  Seq2Seq<double> sel(cfg, model.encoder_vocab(), model.decoder_vocab(), model.encoder_table(), model.decoder_table(),
                      rng);
  AttentionProbe single;
  ForwardOptions sopt;
  sopt.cross_probe = &single;
  sel.forward(b, sopt);
  bool all_one = !single.weights.empty();
  for (const auto& w : single.weights)
    for (double x : w) all_one = all_one && x == 1.0;

  const bool ok = worst_sum < 1e-6 && masked_nonzero == 0 && all_one && rows > 0;
  return {ok, std::to_string(rows) + " rows, max |sum-1| " + fmt(worst_sum) + ", nonzero masked " +
                  std::to_string(masked_nonzero) + ", singleton weights all 1: " + (all_one ? "yes" : "no")};
}

// 3 -------------------------------------------------------------------------
Verdict select_oracle() {
  Rng rng(2024);
  double worst = 0;
  const int trials = 120;
  for (int trial = 0; trial < trials; ++trial) {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.enc_layers = 1 + rng.below(2);
    cfg.dec_layers = 1 + rng.below(2);
    cfg.ffn_dim = 16;
    cfg.dropout = 0.0;
    cfg.marking = MarkingMode::kSelect;
    cfg.max_src_len = 12;
    cfg.max_tgt_len = 8;
    Tokens toks;
    for (int i = 0; i < 6; ++i) toks.push_back("t" + std::to_string(i));
    Vocabulary enc = build_vocab(toks), dec = build_vocab(toks);
    Rng init(static_cast<std::uint64_t>(trial) + 1000);
    auto et = random_table<double>(enc.size(), 8, init);
    auto dt = random_table<double>(dec.size(), 8, init);
    Seq2Seq<double> model(cfg, enc, dec, et, dt, init);
    const std::size_t B = 1 + rng.below(3);
    std::vector<EncodedExample> exs(B);
    for (auto& ex : exs) {
      const std::size_t n = 1 + rng.below(10);
      for (std::size_t i = 0; i < n; ++i) ex.source.tokens.push_back(kReservedCount + rng.below(6));
      ex.source.definiendum_index = rng.below(n);
      ex.source.indicators.assign(n, 0);
      ex.source.indicators[ex.source.definiendum_index] = 1;
      const std::size_t m = 1 + rng.below(6);
      for (std::size_t i = 0; i < m; ++i) ex.definition.push_back(kReservedCount + rng.below(6));
    }
    const Batch b = make_batch(exs);
    const auto sliced = model.memory(b);
    const auto full = model.encode(b);
    AttentionMask only(B, b.tgt_len, b.src_len, 0);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t t = 0; t < b.tgt_len; ++t) only.at(i, t, b.definiendum_index[i]) = 1;
    const auto a = model.decode(std::span<const TokenId>(b.tgt_in), B, b.tgt_len, b.tgt_lengths, sliced);
    const auto c = model.decode(std::span<const TokenId>(b.tgt_in), B, b.tgt_len, b.tgt_lengths, full, {}, &only);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.values()[i] - c.values()[i]));
  }
  return {worst < 1e-5, std::to_string(trials) + " configurations, max |dlogits| " + fmt(worst)};
}

// 4 -------------------------------------------------------------------------
Verdict accumulation() {
  auto mini = make_miniature_model(9);
  Rng gen(10);
  std::vector<EncodedExample> exs;
  for (int i = 0; i < 8; ++i) {
    EncodedExample ex;
    const std::size_t n = 1 + gen.below(5);
    for (std::size_t t = 0; t < n; ++t) ex.source.tokens.push_back(kReservedCount + gen.below(4));
    ex.source.definiendum_index = gen.below(n);
    ex.source.indicators.assign(n, 0);
    ex.source.indicators[ex.source.definiendum_index] = 1;
    const std::size_t m = 1 + gen.below(5);
    for (std::size_t t = 0; t < m; ++t) ex.definition.push_back(kReservedCount + gen.below(3));
    exs.push_back(ex);
  }
  auto grads = [&](const std::vector<Batch>& micro) {
    mini.model.params().zero_grad();
    accumulate_gradients(mini.model, micro, ForwardOptions{});
    std::vector<double> g;
    for (const auto& [n, t] : mini.model.params().items()) g.insert(g.end(), t.grad().begin(), t.grad().end());
    return g;
  };
  const auto fused = grads({make_batch(exs)});
  double worst = 0;
  for (std::size_t k : {2u, 4u}) {
    std::vector<Batch> parts;
    const std::size_t per = exs.size() / k;
    for (std::size_t i = 0; i < exs.size(); i += per) {
      parts.push_back(make_batch(std::vector<EncodedExample>(exs.begin() + static_cast<std::ptrdiff_t>(i),
                                                             exs.begin() + static_cast<std::ptrdiff_t>(i + per))));
    }
    const auto acc = grads(parts);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < fused.size(); ++i) {
      num = std::max(num, std::abs(fused[i] - acc[i]));
      den = std::max(den, std::abs(fused[i]));
    }
    worst = std::max(worst, num / den);
  }
  return {worst < 1e-5, "K = 2 and 4, max relative difference " + fmt(worst)};
}

// 5 -------------------------------------------------------------------------
Verdict schedule() {
  const double at_warmup = noam_lr(2000, 2.0, 300, 2000);
  const double first = noam_lr(1, 2.0, 300, 2000);
  std::size_t peak = 1;
  for (std::size_t s = 1; s <= 10000; ++s) {
    if (noam_lr(s, 2.0, 300, 2000) > noam_lr(peak, 2.0, 300, 2000)) peak = s;
  }
  const bool ok = std::abs(at_warmup - 0.0025820) <= 1e-7 && std::abs(first - 1.291e-6) <= 1e-9 && peak == 2000;
  return {ok, "lr(2000) " + fmt(at_warmup, 8) + ", lr(1) " + fmt(first, 6) + ", peak at step " + std::to_string(peak)};
}

// 6 -------------------------------------------------------------------------
Verdict memorization() {
  const auto t0 = Clock::now();
  auto toy = toy::make_toy(toy::memorization_corpus(), toy::tiny_config(), 1);
  Trainer<float> trainer(toy.model, toy::tiny_train_config(2000), toy.corpus.examples, {});
  for (int i = 0; i < 2000; ++i) trainer.step();
  const double ppl = perplexity(toy.model, toy.corpus.examples).perplexity();
  std::size_t exact = 0;
  for (std::size_t i = 0; i < toy.corpus.examples.size(); ++i) {
    const auto& ex = toy.corpus.examples[i];
    if (generate(toy.model, ex.source, toy.corpus.definienda[i]).ids == ex.definition) ++exact;
  }
  const double secs = seconds_since(t0);
  const bool ok = ppl < 1.2 && secs < 300 && exact == toy.corpus.examples.size();
  return {ok, "perplexity " + fmt(ppl) + ", greedy exact " + std::to_string(exact) + "/" +
                  std::to_string(toy.corpus.examples.size()) + ", " + fmt(secs, 3) + " s"};
}

// 7 -------------------------------------------------------------------------
// Perplexity over the first definition token, where the two senses differ.
double distinguishing_perplexity(const Seq2Seq<float>& model, const std::vector<EncodedExample>& corpus) {
  NoGradGuard no_grad;
  double nll = 0;
  for (const auto& ex : corpus) {
    const std::vector<EncodedExample> one{ex};
    const auto mem = model.memory(make_batch(one));
    const std::vector<TokenId> prefix{kBosId};
    const auto logits = model.decode_step(prefix, mem);
    double mx = -std::numeric_limits<double>::infinity();
    for (float x : logits) mx = std::max(mx, static_cast<double>(x));
    double z = 0;
    for (float x : logits) z += std::exp(static_cast<double>(x) - mx);
    nll -= static_cast<double>(logits[ex.definition.front()]) - mx - std::log(z);
  }
  return std::exp(nll / static_cast<double>(corpus.size()));
}

Verdict disambiguation() {
  const auto corpus = toy::homonym_corpus();
  auto plain = toy::make_toy(corpus, toy::tiny_config(MarkingMode::kNonContextual), 1);
  auto add = toy::make_toy(corpus, toy::tiny_config(MarkingMode::kAdd), 1);
  const std::size_t steps = 1500;
  Trainer<float> tp(plain.model, toy::tiny_train_config(steps), plain.corpus.examples, {});
  Trainer<float> ta(add.model, toy::tiny_train_config(steps), add.corpus.examples, {});
  for (std::size_t i = 0; i < steps; ++i) {
    tp.step();
    ta.step();
  }
  const double plain_first = distinguishing_perplexity(plain.model, plain.corpus.examples);
  const double plain_all = perplexity(plain.model, plain.corpus.examples).perplexity();
  const double add_first = distinguishing_perplexity(add.model, add.corpus.examples);
  const double add_all = perplexity(add.model, add.corpus.examples).perplexity();
  const bool ok = add_all < 1.3 && plain_first >= 1.9;
  return {ok, "non-contextual distinguishing-token ppl " + fmt(plain_first) + " (overall " + fmt(plain_all) +
                  "), ADD overall ppl " + fmt(add_all) + " (distinguishing " + fmt(add_first) + "), " +
                  std::to_string(steps) + " steps each"};
}

// 8 -------------------------------------------------------------------------
Verdict frozen_embeddings() {
  const auto corpus = toy::memorization_corpus();
  const ModelConfig cfg = toy::tiny_config();
  const Vocabularies v = build_vocabularies(corpus, cfg);
  Rng rng(4);
  const std::string vectors = std::string(DEFMOD_SAMPLES_DIR) + "/vectors.txt";
  auto et = load_pretrained<float>(vectors, v.encoder, cfg.d_model, rng, nullptr);
  auto dt = load_pretrained<float>(vectors, v.decoder, cfg.d_model, rng, nullptr);
  Seq2Seq<float> model(cfg, v.encoder, v.decoder, std::move(et), std::move(dt), rng);
  const auto he = content_hash(model.encoder_table().matrix);
  const auto hd = content_hash(model.decoder_table().matrix);
  const auto enc = encode_corpus(corpus, cfg, v);
  Trainer<float> trainer(model, toy::tiny_train_config(500), enc.examples, {});
  for (int i = 0; i < 500; ++i) trainer.step();
  const bool ok = he == content_hash(model.encoder_table().matrix) && hd == content_hash(model.decoder_table().matrix);
  return {ok, "500 steps, encoder table " + cli::detail::hex64(he) + " (" +
                  std::to_string(model.encoder_table().pretrained_count()) + " pretrained rows), decoder table " +
                  cli::detail::hex64(hd) + (ok ? ", unchanged" : ", CHANGED")};
}

// 9 -------------------------------------------------------------------------
void corpus_statistics() {
  const char* root = std::getenv("DEFMOD_CORPORA");
  const fs::path nor = root ? fs::path(root) / "nor.jsonl" : fs::path();
  const fs::path gad = root ? fs::path(root) / "gad.jsonl" : fs::path();
  if (!root || !fs::exists(nor) || !fs::exists(gad)) {
    std::cout << "SKIP criterion 9: original corpora not available (set DEFMOD_CORPORA to a directory with "
                 "nor.jsonl and gad.jsonl)"
              << std::endl;
    return;
  }
  report(9, [&]() -> Verdict {
    auto stats_of = [](const fs::path& p) {
      std::ostringstream out, err;
      if (cli::run_cli({"stats", "--data", p.string()}, out, err) != cli::kOk) raise<DataError>(err.str());
      return nlohmann::json::parse(out.str());
    };
    const auto a = stats_of(nor), b = stats_of(gad);
    const double m1 = a["definition_length_mean"], s1 = a["definition_length_std"];
    const double m2 = b["definition_length_mean"], s2 = b["definition_length_std"];
    const double rate = b["match"]["rate"];
    const bool ok = std::abs(m1 - 6.6) <= 0.05 && std::abs(s1 - 5.78) <= 0.05 && std::abs(m2 - 11.01) <= 0.05 &&
                    std::abs(s2 - 6.96) <= 0.05 && std::abs(rate - 0.80) <= 0.03;
    return {ok, "nor " + fmt(m1) + "/" + fmt(s1) + ", gad " + fmt(m2) + "/" + fmt(s2) + ", match rate " + fmt(rate)};
  });
}

// 10 ------------------------------------------------------------------------
Verdict resume_determinism() {
  const auto corpus = toy::homonym_corpus();
  ModelConfig mcfg = toy::tiny_config(MarkingMode::kAdd);
  mcfg.dropout = 0.1;
  TrainConfig tcfg = toy::tiny_train_config(250);
  tcfg.batch_tokens = 256;
  tcfg.accumulation = 2;
  const std::size_t split = 100, total = 250;

  auto straight = toy::make_toy(corpus, mcfg, 11);
  Trainer<float> a(straight.model, tcfg, straight.corpus.examples, {});
  for (std::size_t i = 0; i < total; ++i) a.step();

  const fs::path path = fs::temp_directory_path() / "defmod_acceptance_resume.dmck";
  {
    auto first = toy::make_toy(corpus, mcfg, 11);
    Trainer<float> b(first.model, tcfg, first.corpus.examples, {});
    for (std::size_t i = 0; i < split; ++i) b.step();
    save_checkpoint(path.string(), b.checkpoint());
  }
  auto second = toy::make_toy(corpus, mcfg, 12);
  Trainer<float> c(second.model, tcfg, second.corpus.examples, {});
  c.resume(load_checkpoint(path.string()));
  for (std::size_t i = split; i < total; ++i) c.step();
  fs::remove(path);

  std::size_t differing = 0, count = 0;
  const auto& pa = straight.model.params().items();
  const auto& pc = second.model.params().items();
  for (std::size_t p = 0; p < pa.size(); ++p)
    for (std::size_t i = 0; i < pa[p].second.size(); ++i, ++count) differing += pa[p].second.data()[i] != pc[p].second.data()[i];
  const bool ok = differing == 0 && c.state().step == total;
  return {ok, "resumed at step " + std::to_string(split) + ", continued " + std::to_string(total - split) +
                  " steps, " + std::to_string(differing) + " of " + std::to_string(count) + " parameters differ"};
}

}  // namespace

int main() {
  report(1, gradient_suite);
  report(2, attention_invariants);
  report(3, select_oracle);
  report(4, accumulation);
  report(5, schedule);
  report(6, memorization);
  report(7, disambiguation);
  report(8, frozen_embeddings);
  corpus_statistics();
  report(10, resume_determinism);
  return failures == 0 ? 0 : 1;
}
