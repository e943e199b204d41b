// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "defmod/batching.hpp"
#include "defmod/checkpoint.hpp"
#include "defmod/config.hpp"
#include "defmod/evaluation.hpp"
#include "defmod/optim.hpp"
#include "defmod/pipeline.hpp"
#include "defmod/random.hpp"
#include "defmod/transformer.hpp"

namespace defmod {

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // smoothed, per target token
  std::optional<double> valid_perplexity;
};

struct TrainResult {
  Checkpoint best;
  double best_perplexity = 0.0;
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  bool early_stopped = false;
};

/// Gradient of the smoothed loss summed over several micro-batches, each
/// normalized by the total target-token count so that accumulation equals
/// one fused batch. Returns the per-token smoothed loss.
template <typename T>
double accumulate_gradients(const Seq2Seq<T>& model, const std::vector<Batch>& micro_batches,
                            const ForwardOptions& opt) {
  double total_tokens = 0.0;
  for (const auto& b : micro_batches) total_tokens += static_cast<double>(b.target_tokens());
  double loss = 0.0;
  for (const auto& b : micro_batches) {
    auto res = model.forward(b, opt, total_tokens);
    if (!std::isfinite(res.smoothed_sum)) raise<NumericError>("training loss is not finite");
    backward(res.loss);
    loss += res.smoothed_sum;
  }
  return loss / total_tokens;
}

/// Adam + Noam optimization with token batching, gradient accumulation,
/// periodic validation, checkpointing and early stopping on validation
/// perplexity. Dropout randomness for step s comes from Rng::derive(seed, s)
/// and the batch order of epoch e from Rng::derive(~seed, e), which makes a
/// resumed run identical to an uninterrupted one.
template <typename T>
class Trainer {
 public:
  Trainer(Seq2Seq<T>& model, TrainConfig cfg, std::vector<EncodedExample> train, std::vector<EncodedExample> valid)
      : model_(model), cfg_(cfg), train_(std::move(train)), valid_(std::move(valid)) {
    cfg_.validate();
    if (train_.empty()) raise<DataError>("training corpus is empty");
    typename Adam<T>::Hyper h;
    h.lr_factor = cfg_.lr_factor;
    h.d_model = model_.config().d_model;
    h.warmup = cfg_.warmup;
    h.beta1 = cfg_.beta1;
    h.beta2 = cfg_.beta2;
    h.eps = cfg_.adam_eps;
    adam_ = Adam<T>(model_.params(), h);
    state_.seed = cfg_.seed;
  }

  /// Continue from a checkpoint written by this trainer's configuration.
  void resume(const Checkpoint& ck) {
    Seq2Seq<T> restored = restore_model<T>(ck);
    // The encoded corpora index these vocabularies, so they must agree.
    if (!(restored.encoder_vocab() == model_.encoder_vocab()) || !(restored.decoder_vocab() == model_.decoder_vocab())) {
      raise<ConfigError>("checkpoint vocabularies differ from the training run being resumed");
    }
    // Frozen tables travel with the checkpoint too, so replace the whole model.
    model_ = std::move(restored);
    adam_ = restore_optimizer<T>(ck, model_);
    state_ = TrainingState::from_json(ck.metadata.at("training_state"));
    epoch_batches_.clear();
  }

  const TrainingState& state() const { return state_; }
  const Adam<T>& optimizer() const { return adam_; }
  Seq2Seq<T>& model() { return model_; }

  Checkpoint checkpoint() const { return snapshot(model_, &adam_, &state_, &cfg_); }

  /// One optimizer step over `accumulation` micro-batches.
  StepLog step() {
    std::vector<Batch> micro;
    for (std::size_t i = 0; i < cfg_.accumulation; ++i) micro.push_back(next_batch());
    Rng dropout_rng = Rng::derive(state_.seed, state_.step);
    ForwardOptions opt;
    opt.training = true;
    opt.rng = &dropout_rng;
    model_.params().zero_grad();
    StepLog log;
    log.train_loss = accumulate_gradients(model_, micro, opt);
    log.lr = adam_.step(model_.params());
    log.step = ++state_.step;
    return log;
  }

  double validation_perplexity() const {
    const auto& corpus = valid_.empty() ? train_ : valid_;
    return perplexity(model_, corpus, cfg_.batch_tokens).perplexity();
  }

  /// Runs to max_steps or until validation perplexity fails to improve for
  /// `patience` consecutive checkpoints. Checkpoints go to `out_dir` when
  /// given (ckpt_<step>.dmck, last.dmck and best.dmck).
  TrainResult run(const std::function<void(const StepLog&)>& on_step = nullptr,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
    TrainResult result;
    if (out_dir) std::filesystem::create_directories(*out_dir);
    std::optional<Checkpoint> best;
    while (state_.step < cfg_.max_steps) {
      StepLog log = step();
      ++result.steps_run;
      if (state_.step % cfg_.checkpoint_every == 0) {
        const double ppl = validation_perplexity();
        if (!std::isfinite(ppl)) raise<NumericError>("validation perplexity is not finite at step ", state_.step);
        log.valid_perplexity = ppl;
        if (ppl < state_.best_perplexity) {
          state_.best_perplexity = ppl;
          state_.best_step = state_.step;
          state_.bad_checkpoints = 0;
        } else {
          ++state_.bad_checkpoints;
        }
        Checkpoint ck = checkpoint();
        if (state_.best_step == state_.step) best = ck;
        if (out_dir) {
          save_checkpoint((*out_dir / ("ckpt_" + std::to_string(state_.step) + ".dmck")).string(), ck);
          save_checkpoint((*out_dir / "last.dmck").string(), ck);
          if (state_.best_step == state_.step) save_checkpoint((*out_dir / "best.dmck").string(), ck);
        }
        if (on_step) on_step(log);
        if (state_.bad_checkpoints >= cfg_.patience) {
          result.early_stopped = true;
          break;
        }
      } else if (on_step) {
        on_step(log);
      }
    }
    const bool resumed_best_on_disk =
        out_dir && state_.best_step > 0 && std::filesystem::exists(*out_dir / "best.dmck");
    if (!best && resumed_best_on_disk) best = load_checkpoint((*out_dir / "best.dmck").string());
    if (!best) {
      // No validation happened (max_steps below checkpoint_every).
      state_.best_perplexity = validation_perplexity();
      state_.best_step = state_.step;
      best = checkpoint();
      if (out_dir) save_checkpoint((*out_dir / "best.dmck").string(), *best);
    }
    result.best = std::move(*best);
    result.best_perplexity = state_.best_perplexity;
    result.best_step = state_.best_step;
    return result;
  }

 private:
  Batch next_batch() {
    if (epoch_batches_.empty()) regenerate_epoch();
    if (state_.cursor >= epoch_batches_.size()) {
      ++state_.epoch;
      state_.cursor = 0;
      regenerate_epoch();
    }
    return gather_batch(train_, epoch_batches_[state_.cursor++]);
  }

  void regenerate_epoch() {
    Rng shuffle_rng = Rng::derive(~state_.seed, state_.epoch);
    epoch_batches_ = make_batches(train_, cfg_.micro_budget(), cfg_.batch_unit, &shuffle_rng);
  }

  Seq2Seq<T>& model_;
  TrainConfig cfg_;
  std::vector<EncodedExample> train_;
  std::vector<EncodedExample> valid_;
  Adam<T> adam_;
  TrainingState state_;
  std::vector<std::vector<std::size_t>> epoch_batches_;
};

}  // namespace defmod
