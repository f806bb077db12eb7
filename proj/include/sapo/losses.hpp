#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "sapo/autodiff.hpp"
#include "sapo/errors.hpp"
#include "sapo/model.hpp"

namespace sapo {

enum class LossKind { dpo, orpo };

// Probability notion used inside the odds: length-normalized (mean) by
// default, sequence-product (sum) selectable.
enum class OrpoProb { mean, product };

struct LossBreakdown {
  double total = 0.0;
  double sft_term = 0.0;
  double contrastive_term = 0.0;
  double margin = 0.0;
  double beta = 0.0;
  double lambda = 0.0;
};

namespace detail {

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
}

}  // namespace detail

// log(p / (1-p)) for p given as a log-probability g < 0.
inline double log_odds(double avg_logprob) {
  if (!(avg_logprob < 0.0))
    throw DomainError("log_odds: log-probability must be < 0, got " +
                      std::to_string(avg_logprob));
  detail::check_finite(avg_logprob, "log_odds input");
  return avg_logprob - ad::log1mexp(avg_logprob);
}

// -log sigma(margin), margin = beta * [(s_theta+ - s_ref+) - (s_theta- - s_ref-)]
// over sum log-probabilities. Reference scores are plain values, so the
// gradient path exists only through the theta scores.
inline LossBreakdown dpo_loss(const SeqScore& theta_pos, const SeqScore& ref_pos,
                              const SeqScore& theta_neg, const SeqScore& ref_neg,
                              double beta) {
  if (beta < 0.0) throw ConfigError("dpo_loss: beta must be >= 0");
  for (const SeqScore* s : {&theta_pos, &ref_pos, &theta_neg, &ref_neg})
    detail::check_finite(s->sum_logprob, "dpo_loss score");
  LossBreakdown b;
  b.beta = beta;
  b.margin = beta * ((theta_pos.sum_logprob - ref_pos.sum_logprob) -
                     (theta_neg.sum_logprob - ref_neg.sum_logprob));
  b.contrastive_term = ad::softplus(-b.margin);
  b.total = b.contrastive_term;
  return b;
}

// L_SFT + lambda * (-log sigma(log-odds ratio)); L_SFT is the mean per-token
// NLL of the chosen response.
inline LossBreakdown orpo_loss(const SeqScore& theta_pos, const SeqScore& theta_neg,
                               double lambda, OrpoProb prob = OrpoProb::mean) {
  if (lambda < 0.0) throw ConfigError("orpo_loss: lambda must be >= 0");
  detail::check_finite(theta_pos.sum_logprob, "orpo_loss chosen score");
  detail::check_finite(theta_neg.sum_logprob, "orpo_loss rejected score");
  const double gp = prob == OrpoProb::mean ? theta_pos.avg_logprob : theta_pos.sum_logprob;
  const double gn = prob == OrpoProb::mean ? theta_neg.avg_logprob : theta_neg.sum_logprob;
  LossBreakdown b;
  b.lambda = lambda;
  b.sft_term = -theta_pos.avg_logprob;
  b.margin = log_odds(gp) - log_odds(gn);
  b.contrastive_term = lambda * ad::softplus(-b.margin);
  b.total = b.sft_term + b.contrastive_term;
  return b;
}

namespace detail {

struct TapeLoss {
  ad::Var total;
  LossBreakdown values;
};

inline TapeLoss dpo_loss_on_tape(ad::Tape& tape, const ScoreVars& theta_pos,
                                 const ScoreVars& theta_neg, const SeqScore& ref_pos,
                                 const SeqScore& ref_neg, double beta) {
  TapeLoss out;
  out.values = dpo_loss(theta_pos.values, ref_pos, theta_neg.values, ref_neg, beta);
  ad::Var margin = tape.add_const(tape.scale(tape.sub(theta_pos.sum, theta_neg.sum), beta),
                                  -beta * (ref_pos.sum_logprob - ref_neg.sum_logprob));
  out.total = tape.neg(tape.log_sigmoid(margin));
  return out;
}

inline TapeLoss orpo_loss_on_tape(ad::Tape& tape, const ScoreVars& theta_pos,
                                  const ScoreVars& theta_neg, double lambda, OrpoProb prob) {
  TapeLoss out;
  out.values = orpo_loss(theta_pos.values, theta_neg.values, lambda, prob);
  ad::Var gp = prob == OrpoProb::mean ? theta_pos.avg : theta_pos.sum;
  ad::Var gn = prob == OrpoProb::mean ? theta_neg.avg : theta_neg.sum;
  ad::Var margin = tape.sub(tape.log_odds(gp), tape.log_odds(gn));
  ad::Var sft = tape.neg(theta_pos.avg);
  out.total = tape.add(sft, tape.scale(tape.neg(tape.log_sigmoid(margin)), lambda));
  return out;
}

}  // namespace detail

struct LossConfig {
  LossKind kind = LossKind::orpo;
  double beta = 0.1;
  double lambda = 0.05;
  OrpoProb orpo_prob = OrpoProb::mean;
};

// Mean loss over a batch, built on the tape through a fresh binding of the
// policy. DPO requires a reference model (scored via the plain path, hence
// detached); ORPO forbids one.
struct BatchLoss {
  ad::Var total;                          // scalar tape node, mean over batch
  LossBreakdown mean;                     // means of the per-tuple fields
  double pref_margin_mean = 0.0;          // mean of sum_lp(y+) - sum_lp(y-)
  std::unique_ptr<ModelGraph> policy_graph;
};

inline BatchLoss batch_loss(ad::Tape& tape, const PolicyModel& policy,
                            const std::vector<PreferenceTuple>& tuples,
                            const PolicyModel* reference, const LossConfig& cfg) {
  if (tuples.empty()) throw ContractError("batch_loss: empty batch");
  if (cfg.kind == LossKind::dpo && reference == nullptr)
    throw ConfigError("batch_loss: DPO requires a reference model");
  if (cfg.kind == LossKind::orpo && reference != nullptr)
    throw ConfigError("batch_loss: ORPO does not take a reference model");

  BatchLoss out;
  out.policy_graph = policy.bind(tape);
  ad::Var acc;
  for (const PreferenceTuple& t : tuples) {
    ScoreVars pos = out.policy_graph->score(t.prompt, t.chosen);
    ScoreVars neg = out.policy_graph->score(t.prompt, t.rejected);
    detail::TapeLoss tl;
    if (cfg.kind == LossKind::dpo) {
      SeqScore rp = score_sequence(*reference, t.prompt, t.chosen);
      SeqScore rn = score_sequence(*reference, t.prompt, t.rejected);
      tl = detail::dpo_loss_on_tape(tape, pos, neg, rp, rn, cfg.beta);
    } else {
      tl = detail::orpo_loss_on_tape(tape, pos, neg, cfg.lambda, cfg.orpo_prob);
    }
    acc = acc.valid() ? tape.add(acc, tl.total) : tl.total;
    out.mean.total += tl.values.total;
    out.mean.sft_term += tl.values.sft_term;
    out.mean.contrastive_term += tl.values.contrastive_term;
    out.mean.margin += tl.values.margin;
    out.pref_margin_mean += pos.values.sum_logprob - neg.values.sum_logprob;
  }
  const double inv = 1.0 / static_cast<double>(tuples.size());
  out.total = tape.scale(acc, inv);
  out.mean.total *= inv;
  out.mean.sft_term *= inv;
  out.mean.contrastive_term *= inv;
  out.mean.margin *= inv;
  out.mean.beta = cfg.beta;
  out.mean.lambda = cfg.lambda;
  out.pref_margin_mean *= inv;
  return out;
}

}  // namespace sapo
