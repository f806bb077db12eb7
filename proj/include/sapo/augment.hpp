#pragma once

#include <cstdint>
#include <optional>

#include "sapo/corpus.hpp"
#include "sapo/errors.hpp"
#include "sapo/model.hpp"
#include "sapo/rng.hpp"

namespace sapo {

enum class AugmentMode { segment, full_regen };

struct AugmentConfig {
  int n_seg = 256;
  double temperature = 1.0;
  bool resample_on_identical = true;
  AugmentMode mode = AugmentMode::segment;
};

inline void validate(const AugmentConfig& cfg) {
  if (cfg.n_seg < 1) throw ConfigError("augment: n_seg must be >= 1");
  if (cfg.temperature < 0.0) throw ConfigError("augment: temperature must be >= 0");
}

// chosen = a ++ b ++ c, with b starting at the truncation point t and
// holding min(n_seg, len - t) tokens (at least one).
struct SegmentSplit {
  TokenSeq a, b, c;
  int truncation_point = 0;
  int segment_len_effective = 0;
};

inline SegmentSplit split_at(const TokenSeq& chosen, int t, int n_seg) {
  if (chosen.empty()) throw ContractError("split: empty chosen response");
  const int len = static_cast<int>(chosen.size());
  if (t < 0 || t >= len) throw ContractError("split: truncation point out of range");
  if (n_seg < 1) throw ConfigError("split: n_seg must be >= 1");
  SegmentSplit s;
  s.truncation_point = t;
  s.segment_len_effective = std::min(n_seg, len - t);
  s.a.assign(chosen.begin(), chosen.begin() + t);
  s.b.assign(chosen.begin() + t, chosen.begin() + t + s.segment_len_effective);
  s.c.assign(chosen.begin() + t + s.segment_len_effective, chosen.end());
  return s;
}

// t drawn uniformly from {0, ..., len-1}.
inline SegmentSplit split_response(const TokenSeq& chosen, int n_seg, std::uint64_t seed) {
  if (chosen.empty()) throw ContractError("split_response: empty chosen response");
  rng::Stream st(seed);
  const int t = static_cast<int>(st.next_below(chosen.size()));
  return split_at(chosen, t, n_seg);
}

namespace detail {

inline std::optional<PreferenceTuple> synthesize_once(const TokenSeq& prompt,
                                                      const TokenSeq& chosen,
                                                      const PolicyModel& generator,
                                                      const AugmentConfig& cfg,
                                                      std::uint64_t seed) {
  TokenSeq rejected;
  if (cfg.mode == AugmentMode::segment) {
    SegmentSplit s = split_response(chosen, cfg.n_seg, rng::derive(seed, 0x57u));
    TokenSeq ctx = prompt;
    ctx.insert(ctx.end(), s.a.begin(), s.a.end());
    TokenSeq regen = sample_continuation(generator, ctx, s.segment_len_effective,
                                         cfg.temperature, rng::derive(seed, 0x5bu));
    rejected = std::move(s.a);
    rejected.insert(rejected.end(), regen.begin(), regen.end());
    rejected.insert(rejected.end(), s.c.begin(), s.c.end());
  } else {
    rejected = sample_continuation(generator, prompt, static_cast<int>(chosen.size()),
                                   cfg.temperature, rng::derive(seed, 0x5bu));
  }
  if (rejected == chosen) return std::nullopt;
  return PreferenceTuple{prompt, chosen, std::move(rejected)};
}

}  // namespace detail

// Builds the rejected response. In segment mode only b is regenerated, so
// y- has the same length as y+ and matches it outside [t, t+len(b)).
// A tuple with y- == y+ is retried once with seed+1, then skipped.
inline std::optional<PreferenceTuple> synthesize_rejected(const TokenSeq& prompt,
                                                          const TokenSeq& chosen,
                                                          const PolicyModel& generator,
                                                          const AugmentConfig& cfg,
                                                          std::uint64_t seed) {
  if (chosen.empty()) throw ContractError("synthesize_rejected: empty chosen response");
  validate(cfg);
  auto tuple = detail::synthesize_once(prompt, chosen, generator, cfg, seed);
  if (!tuple && cfg.resample_on_identical)
    tuple = detail::synthesize_once(prompt, chosen, generator, cfg, seed + 1);
  return tuple;
}

}  // namespace sapo
