#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sapo/augment.hpp"
#include "sapo/buffer.hpp"
#include "sapo/corpus.hpp"
#include "sapo/ema.hpp"
#include "sapo/errors.hpp"
#include "sapo/evaluate.hpp"
#include "sapo/losses.hpp"
#include "sapo/metrics.hpp"
#include "sapo/model.hpp"
#include "sapo/optimizer.hpp"
#include "sapo/rng.hpp"

namespace sapo {

enum class Paradigm { sapo, on_policy, spin, offline_paired };

struct TrainerConfig {
  LossKind loss = LossKind::orpo;
  Paradigm paradigm = Paradigm::sapo;
  int iterations = 500;      // T; epoch count for offline_paired
  int sampling_batch = 16;   // N
  int training_batch = 16;
  double learning_rate = 0.01;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta = 0.1;
  double lambda = 0.05;
  OrpoProb orpo_prob = OrpoProb::mean;
  AugmentConfig augment;
  std::size_t buffer_capacity = 2000;
  double ema_alpha = 0.5;
  int ema_update_every = 2;
  RefStrategy ref_strategy;
  int spin_iters = 3;
  int spin_epochs_per_iter = 1;
  int steps_per_sample = 1;
  int sft_epochs = 3;
  int eval_every = 50;
  double grad_clip_norm = 10.0;  // <= 0 disables clipping
  int checkpoint_every = 100;    // 0 disables periodic checkpoints
  std::uint64_t seed = 0;
};

inline void validate(const TrainerConfig& c) {
  if (c.iterations < 1) throw ConfigError("trainer: iterations must be >= 1");
  if (c.sampling_batch < 1) throw ConfigError("trainer: sampling_batch must be >= 1");
  if (c.training_batch < 1) throw ConfigError("trainer: training_batch must be >= 1");
  if (c.learning_rate < 0.0) throw ConfigError("trainer: learning_rate must be >= 0");
  if (c.beta < 0.0) throw ConfigError("trainer: beta must be >= 0");
  if (c.lambda < 0.0) throw ConfigError("trainer: lambda must be >= 0");
  if (c.buffer_capacity < 1) throw ConfigError("trainer: buffer_capacity must be >= 1");
  if (c.ema_alpha < 0.0 || c.ema_alpha > 1.0)
    throw ConfigError("trainer: ema alpha must be in [0,1]");
  if (c.ema_update_every < 1) throw ConfigError("trainer: ema update_every must be >= 1");
  if (c.ref_strategy.refresh_every < 1)
    throw ConfigError("trainer: refresh_every must be >= 1");
  if (c.spin_iters < 1) throw ConfigError("trainer: spin_iters must be >= 1");
  if (c.spin_epochs_per_iter < 0)
    throw ConfigError("trainer: spin_epochs_per_iter must be >= 0");
  if (c.steps_per_sample < 1) throw ConfigError("trainer: steps_per_sample must be >= 1");
  if (c.sft_epochs < 0) throw ConfigError("trainer: sft_epochs must be >= 0");
  if (c.eval_every < 1) throw ConfigError("trainer: eval_every must be >= 1");
  validate(c.augment);
}

struct RunResult {
  std::vector<StepMetrics> metrics;
};

// Per-iteration hook for tests and the cli (periodic checkpoints).
struct StepObservation {
  std::int64_t step = 0;
  const PolicyModel* policy = nullptr;
  const PolicyModel* reference = nullptr;
  const EmaState* ema = nullptr;
  const ReplayBuffer* buffer = nullptr;
  const StepMetrics* row = nullptr;
};
using StepObserver = std::function<void(const StepObservation&)>;

namespace seeds {
// Stream tags: each stage of a run draws from its own derived stream.
constexpr std::uint64_t kDataSample = 1;
constexpr std::uint64_t kAugment = 2;
constexpr std::uint64_t kBufferDraw = 3;
constexpr std::uint64_t kShuffle = 4;
constexpr std::uint64_t kEval = 5;
constexpr std::uint64_t kModelInit = 6;
}  // namespace seeds

namespace detail {

struct StepOutcome {
  LossBreakdown mean;
  double pref_margin_mean = 0.0;
  double grad_norm = 0.0;
};

inline double l2_norm(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

// One optimizer step on a fixed batch: loss, backward, clip, update.
inline StepOutcome train_step(PolicyModel& policy, const PolicyModel* reference,
                              const std::vector<PreferenceTuple>& batch,
                              const LossConfig& loss_cfg, Optimizer& opt, double clip) {
  ad::Tape tape;
  BatchLoss bl = batch_loss(tape, policy, batch, reference, loss_cfg);
  if (!std::isfinite(bl.mean.total))
    throw NumericError("train_step: non-finite loss " + std::to_string(bl.mean.total));
  tape.backward(bl.total);
  std::vector<double> grad = bl.policy_graph->param_grad();
  const double norm = l2_norm(grad);
  if (!std::isfinite(norm)) throw NumericError("train_step: non-finite gradient");
  if (clip > 0.0 && norm > clip)
    for (double& g : grad) g *= clip / norm;
  std::vector<double> params = policy.get_params();
  opt.step(params, grad);
  policy.set_params(params);
  StepOutcome out;
  out.mean = bl.mean;
  out.pref_margin_mean = bl.pref_margin_mean;
  out.grad_norm = norm;
  return out;
}

inline void fill_loss_fields(StepMetrics& row, const StepOutcome& so) {
  row.loss_total = so.mean.total;
  row.loss_sft = so.mean.sft_term;
  row.loss_contrastive = so.mean.contrastive_term;
  row.margin = so.mean.margin;
  row.grad_norm = so.grad_norm;
  row.pref_margin_mean = so.pref_margin_mean;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng::Stream st(seed);
  for (std::size_t i = 0; i + 1 < n; ++i)
    std::swap(idx[i], idx[i + st.next_below(n - i)]);
  return idx;
}

inline LossConfig loss_config_of(const TrainerConfig& c) {
  return LossConfig{c.loss, c.beta, c.lambda, c.orpo_prob};
}

inline void require_dataset(const std::vector<SftExample>& dataset) {
  if (dataset.empty()) throw ConfigError("trainer: dataset is empty");
}

}  // namespace detail

// Alternating sampling/training loop: the EMA shadow generates segment-level
// rejected responses into the replay buffer, then the policy trains on an
// inverse-frequency-weighted batch drawn from it.
inline RunResult run_sapo(const TrainerConfig& cfg, const std::vector<SftExample>& dataset,
                          PolicyModel& policy, const StepObserver& observer = {}) {
  validate(cfg);
  detail::require_dataset(dataset);
  std::unique_ptr<PolicyModel> reference =
      cfg.loss == LossKind::dpo ? policy.clone_frozen() : nullptr;
  EmaState ema = make_ema(policy, cfg.ema_alpha, cfg.ema_update_every);
  ReplayBuffer buffer(cfg.buffer_capacity);
  std::unique_ptr<PolicyModel> generator = policy.clone_frozen();
  Optimizer opt(cfg.optimizer, cfg.learning_rate, policy.param_count());
  const LossConfig loss_cfg = detail::loss_config_of(cfg);

  RunResult result;
  std::int64_t opt_step = 0;
  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    // sampling stage
    generator->set_params(ema.shadow);
    rng::Stream pick(rng::derive(cfg.seed, seeds::kDataSample, iter));
    for (int j = 0; j < cfg.sampling_batch; ++j) {
      const SftExample& ex = dataset[pick.next_below(dataset.size())];
      auto tuple = synthesize_rejected(
          ex.prompt, ex.chosen, *generator, cfg.augment,
          rng::derive(cfg.seed, seeds::kAugment, iter, j));
      if (tuple) buffer.push(std::move(*tuple));
    }

    // training stage
    StepMetrics row;
    row.step = iter;
    bool trained = false;
    for (int s = 0; s < cfg.steps_per_sample; ++s) {
      auto batch = buffer.sample_batch(
          static_cast<std::size_t>(cfg.training_batch),
          rng::derive(cfg.seed, seeds::kBufferDraw, iter, s));
      if (batch.empty()) break;  // nothing to train on yet
      detail::StepOutcome so =
          detail::train_step(policy, reference.get(), batch, loss_cfg, opt, cfg.grad_clip_norm);
      opt_step += 1;
      ema_update(ema, policy.get_params());
      if (reference)
        refresh_reference(cfg.ref_strategy, *reference, policy, ema, opt_step);
      detail::fill_loss_fields(row, so);
      trained = true;
    }
    row.stage = trained ? "train" : "sample_only";
    const BufferStats bs = buffer.stats();
    row.buffer_size = bs.size;
    row.buffer_mean_count = bs.mean_count;
    if (iter % cfg.eval_every == 0)
      row.eval_acc = evaluate_preference_accuracy(policy, dataset,
                                                  rng::derive(cfg.seed, seeds::kEval));
    result.metrics.push_back(row);
    if (observer)
      observer(StepObservation{iter, &policy, reference.get(), &ema, &buffer,
                               &result.metrics.back()});
  }
  return result;
}

// Ablation: the current policy generates, and each iteration trains directly
// on its freshly generated tuples. No replay buffer.
inline RunResult run_on_policy(const TrainerConfig& cfg,
                               const std::vector<SftExample>& dataset, PolicyModel& policy,
                               const StepObserver& observer = {}) {
  validate(cfg);
  detail::require_dataset(dataset);
  std::unique_ptr<PolicyModel> reference =
      cfg.loss == LossKind::dpo ? policy.clone_frozen() : nullptr;
  EmaState ema = make_ema(policy, cfg.ema_alpha, cfg.ema_update_every);
  Optimizer opt(cfg.optimizer, cfg.learning_rate, policy.param_count());
  const LossConfig loss_cfg = detail::loss_config_of(cfg);

  RunResult result;
  std::int64_t opt_step = 0;
  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    rng::Stream pick(rng::derive(cfg.seed, seeds::kDataSample, iter));
    std::vector<PreferenceTuple> fresh;
    for (int j = 0; j < cfg.sampling_batch; ++j) {
      const SftExample& ex = dataset[pick.next_below(dataset.size())];
      auto tuple = synthesize_rejected(
          ex.prompt, ex.chosen, policy, cfg.augment,
          rng::derive(cfg.seed, seeds::kAugment, iter, j));
      if (tuple) fresh.push_back(std::move(*tuple));
    }

    StepMetrics row;
    row.step = iter;
    if (!fresh.empty()) {
      detail::StepOutcome so =
          detail::train_step(policy, reference.get(), fresh, loss_cfg, opt, cfg.grad_clip_norm);
      opt_step += 1;
      ema_update(ema, policy.get_params());
      if (reference)
        refresh_reference(cfg.ref_strategy, *reference, policy, ema, opt_step);
      detail::fill_loss_fields(row, so);
      row.stage = "train";
    } else {
      row.stage = "sample_only";
    }
    if (iter % cfg.eval_every == 0)
      row.eval_acc = evaluate_preference_accuracy(policy, dataset,
                                                  rng::derive(cfg.seed, seeds::kEval));
    result.metrics.push_back(row);
    if (observer)
      observer(
          StepObservation{iter, &policy, reference.get(), &ema, nullptr, &result.metrics.back()});
  }
  return result;
}

// Offline iterative self-play: snapshot the policy, generate rejected
// responses for the whole dataset from the snapshot, then train epochs on
// that fixed paired set (the snapshot doubles as the DPO reference).
inline RunResult run_spin(const TrainerConfig& cfg, const std::vector<SftExample>& dataset,
                          PolicyModel& policy, const StepObserver& observer = {}) {
  validate(cfg);
  detail::require_dataset(dataset);
  Optimizer opt(cfg.optimizer, cfg.learning_rate, policy.param_count());
  const LossConfig loss_cfg = detail::loss_config_of(cfg);

  RunResult result;
  std::int64_t global_step = 0;
  for (int outer = 1; outer <= cfg.spin_iters; ++outer) {
    std::unique_ptr<PolicyModel> snapshot = policy.clone_frozen();
    std::vector<PreferenceTuple> paired;
    paired.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      auto tuple = synthesize_rejected(
          dataset[i].prompt, dataset[i].chosen, *snapshot, cfg.augment,
          rng::derive(cfg.seed, seeds::kAugment, outer, i));
      if (tuple) paired.push_back(std::move(*tuple));
    }
    if (paired.empty()) continue;
    const PolicyModel* reference = cfg.loss == LossKind::dpo ? snapshot.get() : nullptr;

    for (int epoch = 1; epoch <= cfg.spin_epochs_per_iter; ++epoch) {
      std::vector<std::size_t> order = detail::shuffled_indices(
          paired.size(), rng::derive(cfg.seed, seeds::kShuffle, outer, epoch));
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(cfg.training_batch)) {
        std::vector<PreferenceTuple> batch;
        for (std::size_t k = start;
             k < std::min(order.size(), start + static_cast<std::size_t>(cfg.training_batch));
             ++k)
          batch.push_back(paired[order[k]]);
        detail::StepOutcome so =
            detail::train_step(policy, reference, batch, loss_cfg, opt, cfg.grad_clip_norm);
        global_step += 1;
        StepMetrics row;
        row.step = global_step;
        row.stage = "train";
        detail::fill_loss_fields(row, so);
        if (global_step % cfg.eval_every == 0)
          row.eval_acc = evaluate_preference_accuracy(
              policy, dataset, rng::derive(cfg.seed, seeds::kEval));
        result.metrics.push_back(row);
        if (observer)
          observer(StepObservation{global_step, &policy, reference, nullptr, nullptr,
                                   &result.metrics.back()});
      }
    }
  }
  return result;
}

// Epoch training over a pre-collected paired dataset; DPO keeps the initial
// snapshot as a fixed reference. iterations counts epochs here.
inline RunResult run_offline_paired(const TrainerConfig& cfg,
                                    const std::vector<SftExample>& dataset,
                                    PolicyModel& policy, const StepObserver& observer = {}) {
  validate(cfg);
  detail::require_dataset(dataset);
  std::vector<PreferenceTuple> paired;
  paired.reserve(dataset.size());
  for (const SftExample& ex : dataset) {
    if (!ex.rejected)
      throw ConfigError("offline_paired: example '" + ex.id + "' has no rejected response");
    paired.push_back(PreferenceTuple{ex.prompt, ex.chosen, *ex.rejected});
  }
  std::unique_ptr<PolicyModel> reference =
      cfg.loss == LossKind::dpo ? policy.clone_frozen() : nullptr;
  Optimizer opt(cfg.optimizer, cfg.learning_rate, policy.param_count());
  const LossConfig loss_cfg = detail::loss_config_of(cfg);

  RunResult result;
  std::int64_t global_step = 0;
  for (int epoch = 1; epoch <= cfg.iterations; ++epoch) {
    std::vector<std::size_t> order = detail::shuffled_indices(
        paired.size(), rng::derive(cfg.seed, seeds::kShuffle, epoch));
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.training_batch)) {
      std::vector<PreferenceTuple> batch;
      for (std::size_t k = start;
           k < std::min(order.size(), start + static_cast<std::size_t>(cfg.training_batch));
           ++k)
        batch.push_back(paired[order[k]]);
      detail::StepOutcome so =
          detail::train_step(policy, reference.get(), batch, loss_cfg, opt, cfg.grad_clip_norm);
      global_step += 1;
      StepMetrics row;
      row.step = global_step;
      row.stage = "train";
      detail::fill_loss_fields(row, so);
      if (global_step % cfg.eval_every == 0)
        row.eval_acc = evaluate_preference_accuracy(policy, dataset,
                                                    rng::derive(cfg.seed, seeds::kEval));
      result.metrics.push_back(row);
      if (observer)
        observer(StepObservation{global_step, &policy, reference.get(), nullptr, nullptr,
                                 &result.metrics.back()});
    }
  }
  return result;
}

// Supervised warm start: mean per-token NLL of the chosen responses.
inline RunResult run_sft(const TrainerConfig& cfg, const std::vector<SftExample>& dataset,
                         PolicyModel& policy, const StepObserver& observer = {}) {
  validate(cfg);
  detail::require_dataset(dataset);
  Optimizer opt(cfg.optimizer, cfg.learning_rate, policy.param_count());

  RunResult result;
  std::int64_t global_step = 0;
  for (int epoch = 1; epoch <= cfg.sft_epochs; ++epoch) {
    std::vector<std::size_t> order = detail::shuffled_indices(
        dataset.size(), rng::derive(cfg.seed, seeds::kShuffle, epoch));
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.training_batch)) {
      ad::Tape tape;
      auto graph = policy.bind(tape);
      ad::Var acc;
      double mean_nll = 0.0;
      std::size_t n = 0;
      for (std::size_t k = start;
           k < std::min(order.size(), start + static_cast<std::size_t>(cfg.training_batch));
           ++k) {
        const SftExample& ex = dataset[order[k]];
        ScoreVars pos = graph->score(ex.prompt, ex.chosen);
        ad::Var nll = tape.neg(pos.avg);
        acc = acc.valid() ? tape.add(acc, nll) : nll;
        mean_nll += -pos.values.avg_logprob;
        n += 1;
      }
      mean_nll /= static_cast<double>(n);
      if (!std::isfinite(mean_nll)) throw NumericError("sft: non-finite loss");
      ad::Var total = tape.scale(acc, 1.0 / static_cast<double>(n));
      tape.backward(total);
      std::vector<double> grad = graph->param_grad();
      const double norm = detail::l2_norm(grad);
      if (!std::isfinite(norm)) throw NumericError("sft: non-finite gradient");
      if (cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm)
        for (double& g : grad) g *= cfg.grad_clip_norm / norm;
      std::vector<double> params = policy.get_params();
      opt.step(params, grad);
      policy.set_params(params);

      global_step += 1;
      StepMetrics row;
      row.step = global_step;
      row.stage = "sft";
      row.loss_total = mean_nll;
      row.loss_sft = mean_nll;
      row.grad_norm = norm;
      if (global_step % cfg.eval_every == 0)
        row.eval_acc = evaluate_preference_accuracy(policy, dataset,
                                                    rng::derive(cfg.seed, seeds::kEval));
      result.metrics.push_back(row);
      if (observer)
        observer(StepObservation{global_step, &policy, nullptr, nullptr, nullptr,
                                 &result.metrics.back()});
    }
  }
  return result;
}

inline RunResult run_training(const TrainerConfig& cfg, const std::vector<SftExample>& dataset,
                              PolicyModel& policy, const StepObserver& observer = {}) {
  switch (cfg.paradigm) {
    case Paradigm::sapo: return run_sapo(cfg, dataset, policy, observer);
    case Paradigm::on_policy: return run_on_policy(cfg, dataset, policy, observer);
    case Paradigm::spin: return run_spin(cfg, dataset, policy, observer);
    case Paradigm::offline_paired: return run_offline_paired(cfg, dataset, policy, observer);
  }
  throw ContractError("run_training: unknown paradigm");
}

}  // namespace sapo
