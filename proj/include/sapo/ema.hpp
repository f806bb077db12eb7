#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sapo/errors.hpp"
#include "sapo/model.hpp"

namespace sapo {

// Shadow copy of the policy parameters, updated as
// shadow <- alpha * shadow + (1 - alpha) * policy every update_every-th
// call (calls count optimizer steps).
struct EmaState {
  std::vector<double> shadow;
  double alpha = 0.5;
  int update_every = 2;
  std::int64_t step_counter = 0;
};

inline EmaState make_ema(const PolicyModel& policy, double alpha, int update_every) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("ema: alpha must be in [0,1]");
  if (update_every < 1) throw ConfigError("ema: update_every must be >= 1");
  return EmaState{policy.get_params(), alpha, update_every, 0};
}

inline void ema_update(EmaState& state, std::span<const double> policy_params) {
  if (policy_params.size() != state.shadow.size())
    throw ContractError("ema_update: parameter length mismatch (" +
                        std::to_string(state.shadow.size()) + " vs " +
                        std::to_string(policy_params.size()) + ")");
  state.step_counter += 1;
  if (state.step_counter % state.update_every != 0) return;
  const double a = state.alpha;
  for (std::size_t i = 0; i < state.shadow.size(); ++i)
    state.shadow[i] = a * state.shadow[i] + (1.0 - a) * policy_params[i];
}

enum class RefStrategyKind { fix_ref, policy_ref, ema_ref };

struct RefStrategy {
  RefStrategyKind kind = RefStrategyKind::ema_ref;
  int refresh_every = 2;
};

inline void validate(const RefStrategy& s) {
  if (s.refresh_every < 1) throw ConfigError("ref_strategy: refresh_every must be >= 1");
}

// fix_ref never touches the reference; the other strategies overwrite its
// parameters at steps divisible by refresh_every.
inline void refresh_reference(const RefStrategy& strategy, PolicyModel& reference,
                              const PolicyModel& policy, const EmaState& ema,
                              std::int64_t step) {
  validate(strategy);
  if (strategy.kind == RefStrategyKind::fix_ref) return;
  if (step % strategy.refresh_every != 0) return;
  if (strategy.kind == RefStrategyKind::policy_ref)
    reference.set_params(policy.get_params());
  else
    reference.set_params(ema.shadow);
}

}  // namespace sapo
