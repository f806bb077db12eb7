#pragma once

#include <cstdint>
#include <vector>

#include "sapo/corpus.hpp"
#include "sapo/errors.hpp"
#include "sapo/model.hpp"
#include "sapo/rng.hpp"

namespace sapo {

// Fraction of examples whose chosen response gets a strictly higher
// length-normalized log-probability than a corrupted variant (25% of
// positions substituted); ties count as failure. The per-example corruption
// seed is derived from the example content, so the result is invariant to
// example order.
inline double evaluate_preference_accuracy(const PolicyModel& model,
                                           const std::vector<SftExample>& examples,
                                           std::uint64_t corruptor_seed) {
  if (examples.empty())
    throw ValidationError("evaluate_preference_accuracy: empty example list");
  std::size_t wins = 0;
  for (const SftExample& ex : examples) {
    const TokenSeq corrupted = corrupt_response(
        ex.chosen, model.vocab_size(), rng::derive(corruptor_seed, content_key(ex)));
    const double good = score_sequence(model, ex.prompt, ex.chosen).avg_logprob;
    const double bad = score_sequence(model, ex.prompt, corrupted).avg_logprob;
    if (good > bad) ++wins;
  }
  return static_cast<double>(wins) / static_cast<double>(examples.size());
}

// Mean per-token negative log-likelihood of the chosen responses.
inline double mean_chosen_nll(const PolicyModel& model,
                              const std::vector<SftExample>& examples) {
  if (examples.empty()) throw ValidationError("mean_chosen_nll: empty example list");
  double acc = 0.0;
  for (const SftExample& ex : examples)
    acc += -score_sequence(model, ex.prompt, ex.chosen).avg_logprob;
  return acc / static_cast<double>(examples.size());
}

}  // namespace sapo
