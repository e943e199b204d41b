// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "defmod/batching.hpp"
#include "defmod/datasets.hpp"
#include "defmod/error.hpp"
#include "defmod/transformer.hpp"

namespace defmod {

struct EvalReport {
  std::size_t token_count = 0;  // PAD excluded, EOS included
  double nll_sum = 0.0;         // unsmoothed
  double smoothed_sum = 0.0;    // training objective, for reference
  std::vector<double> per_example_nll;

  double perplexity() const { return std::exp(nll_sum / static_cast<double>(token_count)); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["token_count"] = token_count;
    j["nll_sum"] = nll_sum;
    j["perplexity"] = perplexity();
    j["smoothed_loss_per_token"] = smoothed_sum / static_cast<double>(token_count);
    j["eos_counted"] = true;
    if (!per_example_nll.empty()) j["per_example_nll"] = per_example_nll;
    return j;
  }
};

/// Teacher-forced, unsmoothed perplexity over gold definitions in evaluation
/// mode. Batches are summed in a fixed order; `per_example` additionally
/// records every example's NLL (one forward pass per example).
template <typename T>
EvalReport perplexity(const Seq2Seq<T>& model, const std::vector<EncodedExample>& corpus,
                      std::size_t batch_tokens = 8192, bool per_example = false) {
  if (corpus.empty()) raise<DataError>("perplexity: empty corpus");
  NoGradGuard no_grad;
  EvalReport report;
  auto run = [&](const Batch& batch) {
    const auto res = model.forward(batch, ForwardOptions{});
    report.nll_sum += res.nll_sum;
    report.smoothed_sum += res.smoothed_sum;
    report.token_count += res.token_count;
    return res.nll_sum;
  };
  if (per_example) {
    for (const auto& ex : corpus) {
      const std::vector<EncodedExample> one{ex};
      report.per_example_nll.push_back(run(make_batch(one)));
    }
  } else {
    for (const auto& indices : make_batches(corpus, batch_tokens, BatchUnit::kTokens, nullptr)) {
      run(gather_batch(corpus, indices));
    }
  }
  return report;
}

enum class SearchStrategy { kGreedy, kBeam };

struct GenerateOptions {
  SearchStrategy strategy = SearchStrategy::kGreedy;
  std::size_t beam_size = 1;
  bool mask_definiendum = false;
  bool allow_unk = false;
  bool lowercase = true;
  std::size_t max_len = 0;  // 0: the model's max_tgt_len - 1
};

struct GenerationResult {
  std::string definiendum;
  std::vector<std::string> source;
  std::vector<TokenId> ids;
  std::vector<std::string> tokens;
  double score = 0.0;  // sum of log-probabilities, EOS included when reached
  bool self_reference = false;
  bool truncated = false;  // hit the length limit before EOS
};

/// True when some produced token is the definiendum or an inflection of it.
inline bool is_self_reference(const std::string& definiendum, const std::vector<std::string>& produced,
                              bool lower = true) {
  const std::string w = lower ? lowercase(definiendum) : definiendum;
  return std::any_of(produced.begin(), produced.end(), [&](const std::string& t) {
    return inflection_match(w, lower ? lowercase(t) : t) != MatchKind::kNone;
  });
}

namespace detail {

struct Hypothesis {
  std::vector<TokenId> ids;  // without BOS
  double score = 0.0;
  bool finished = false;
};

// Log-softmax restricted to allowed ids; banned ids get -inf.
template <typename T>
std::vector<double> masked_log_probs(const std::vector<T>& logits, const std::vector<std::uint8_t>& banned) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (!banned[j]) mx = std::max(mx, static_cast<double>(logits[j]));
  }
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (!banned[j]) total += std::exp(static_cast<double>(logits[j]) - mx);
  }
  const double log_total = std::log(total) + mx;
  std::vector<double> out(logits.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (!banned[j]) out[j] = static_cast<double>(logits[j]) - log_total;
  }
  return out;
}

}  // namespace detail

/// Decoder-vocabulary ids never produced under the given options.
template <typename T>
std::vector<std::uint8_t> banned_tokens(const Seq2Seq<T>& model, const std::string& definiendum,
                                        const GenerateOptions& opt) {
  const Vocabulary& vocab = model.decoder_vocab();
  std::vector<std::uint8_t> banned(vocab.size(), 0);
  banned[kPadId] = banned[kBosId] = 1;
  if (!opt.allow_unk) banned[kUnkId] = 1;
  if (opt.mask_definiendum) {
    const std::string w = opt.lowercase ? lowercase(definiendum) : definiendum;
    for (TokenId id = kReservedCount; id < vocab.size(); ++id) {
      const std::string t = opt.lowercase ? lowercase(vocab.token(id)) : vocab.token(id);
      if (inflection_match(w, t) != MatchKind::kNone) banned[id] = 1;
    }
  }
  return banned;
}

/// Autoregressive decoding from BOS until EOS or the length limit. Greedy
/// ties go to the lowest token id; beam search keeps the `beam_size` best
/// prefixes by summed log-probability (ties again by lower ids) and stops
/// once no live prefix can beat the best finished one.
template <typename T>
GenerationResult generate(const Seq2Seq<T>& model, const MarkedSequence& source, const std::string& definiendum,
                          const GenerateOptions& opt = {}) {
  NoGradGuard no_grad;
  source.validate(model.config().max_src_len);
  const EncodedExample probe{source, {}};
  const std::vector<EncodedExample> one{probe};
  const Batch batch = make_batch(one);
  const Memory<T> mem = model.memory(batch);
  const std::vector<std::uint8_t> banned = banned_tokens(model, definiendum, opt);
  const std::size_t limit = opt.max_len ? std::min(opt.max_len, model.config().max_tgt_len - 1)
                                        : model.config().max_tgt_len - 1;
  const std::size_t k = opt.strategy == SearchStrategy::kGreedy ? 1 : std::max<std::size_t>(opt.beam_size, 1);

  auto next_log_probs = [&](const std::vector<TokenId>& ids) {
    std::vector<TokenId> prefix{kBosId};
    prefix.insert(prefix.end(), ids.begin(), ids.end());
    return detail::masked_log_probs(model.decode_step(prefix, mem), banned);
  };

  std::vector<detail::Hypothesis> alive{detail::Hypothesis{}};
  std::vector<detail::Hypothesis> finished;
  bool truncated = false;
  for (std::size_t len = 0;; ++len) {
    if (len == limit) {
      truncated = true;
      break;
    }
    struct Candidate {
      double score;
      std::size_t parent;
      TokenId token;
    };
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      const auto lp = next_log_probs(alive[h].ids);
      for (TokenId j = 0; j < lp.size(); ++j) {
        if (!std::isinf(lp[j])) cands.push_back({alive[h].score + lp[j], h, j});
      }
    }
    const std::size_t keep = std::min(k, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<detail::Hypothesis> next;
    for (std::size_t c = 0; c < keep; ++c) {
      detail::Hypothesis hyp = alive[cands[c].parent];
      hyp.score = cands[c].score;
      if (cands[c].token == kEosId) {
        hyp.finished = true;
        finished.push_back(std::move(hyp));
      } else {
        hyp.ids.push_back(cands[c].token);
        next.push_back(std::move(hyp));
      }
    }
    alive = std::move(next);
    if (alive.empty()) break;
    if (finished.size() >= k) {
      double best_finished = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_finished = std::max(best_finished, f.score);
      double best_alive = -std::numeric_limits<double>::infinity();
      for (const auto& a : alive) best_alive = std::max(best_alive, a.score);
      // Scores only decrease with length, so live prefixes cannot win.
      if (best_alive <= best_finished) break;
    }
  }

  const detail::Hypothesis* best = nullptr;
  for (const auto& f : finished) {
    if (!best || f.score > best->score) best = &f;
  }
  GenerationResult out;
  if (!best) {
    for (const auto& a : alive) {
      if (!best || a.score > best->score) best = &a;
    }
    out.truncated = truncated;
  }
  out.definiendum = definiendum;
  for (auto id : source.tokens) out.source.push_back(model.encoder_vocab().token(id));
  if (best) {
    out.ids = best->ids;
    out.score = best->score;
  }
  for (auto id : out.ids) out.tokens.push_back(model.decoder_vocab().token(id));
  out.self_reference = is_self_reference(definiendum, out.tokens, opt.lowercase);
  return out;
}

/// Fraction of productions containing their definiendum or an inflection.
inline double self_reference_rate(const std::vector<GenerationResult>& results) {
  if (results.empty()) raise<DataError>("self_reference_rate: no results");
  const auto flagged = std::count_if(results.begin(), results.end(), [](const GenerationResult& r) {
    return is_self_reference(r.definiendum, r.tokens);
  });
  return static_cast<double>(flagged) / static_cast<double>(results.size());
}

inline std::string generations_tsv_header() { return "source\tdefiniendum\tproduction\tscore\tflags"; }

inline std::string to_tsv(const GenerationResult& r) {
  auto join = [](const std::vector<std::string>& toks) {
    std::string s;
    for (std::size_t i = 0; i < toks.size(); ++i) s += (i ? " " : "") + toks[i];
    return s;
  };
  std::vector<std::string> flags;
  if (r.self_reference) flags.push_back("self_reference");
  if (r.truncated) flags.push_back("truncated");
  std::ostringstream oss;
  oss << join(r.source) << '\t' << r.definiendum << '\t' << join(r.tokens) << '\t' << r.score << '\t'
      << (flags.empty() ? "-" : flags.size() == 1 ? flags[0] : flags[0] + "," + flags[1]);
  return oss.str();
}

}  // namespace defmod
