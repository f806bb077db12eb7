#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <ostream>
#include <vector>

#include "json.hpp"
#include "sapo/corpus.hpp"
#include "sapo/errors.hpp"
#include "sapo/rng.hpp"

namespace sapo {

struct BufferEntry {
  PreferenceTuple tuple;
  std::uint64_t count = 0;        // times this entry was sampled
  std::uint64_t insert_index = 0;
};

struct BufferStats {
  std::size_t size = 0;
  std::optional<double> mean_count;
  std::optional<std::uint64_t> max_count;
  std::optional<std::uint64_t> oldest_insert_index;
};

// Bounded FIFO queue of preference tuples. Sampling is without replacement
// within a batch, with per-draw selection probability proportional to
// 1/(1+count) among the remaining entries; counts are taken at batch start
// and each selected entry's count increments by one.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity < 1) throw ConfigError("replay buffer: capacity must be >= 1");
  }

  void push(PreferenceTuple tuple) {
    entries_.push_back(BufferEntry{std::move(tuple), 0, next_insert_index_++});
    if (entries_.size() > capacity_) entries_.pop_front();
  }

  // Returns min(n, size) distinct tuples; empty buffer yields an empty
  // batch, which the trainer treats as "skip this training stage".
  std::vector<PreferenceTuple> sample_batch(std::size_t n, std::uint64_t seed) {
    const std::size_t k = std::min(n, entries_.size());
    std::vector<PreferenceTuple> out;
    if (k == 0) return out;
    out.reserve(k);

    rng::Stream st(seed);
    std::vector<std::size_t> remaining(entries_.size());
    std::vector<double> weight(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      remaining[i] = i;
      weight[i] = 1.0 / (1.0 + static_cast<double>(entries_[i].count));
    }
    std::vector<std::size_t> picked;
    picked.reserve(k);
    for (std::size_t draw = 0; draw < k; ++draw) {
      double total = 0.0;
      for (std::size_t r : remaining) total += weight[r];
      const double u = st.next_unit() * total;
      double acc = 0.0;
      std::size_t chosen_slot = remaining.size() - 1;
      for (std::size_t slot = 0; slot < remaining.size(); ++slot) {
        acc += weight[remaining[slot]];
        if (u < acc) {
          chosen_slot = slot;
          break;
        }
      }
      picked.push_back(remaining[chosen_slot]);
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(chosen_slot));
    }
    for (std::size_t i : picked) {
      entries_[i].count += 1;
      out.push_back(entries_[i].tuple);
    }
    return out;
  }

  BufferStats stats() const {
    BufferStats s;
    s.size = entries_.size();
    if (entries_.empty()) return s;
    std::uint64_t total = 0, mx = 0;
    for (const BufferEntry& e : entries_) {
      total += e.count;
      mx = std::max(mx, e.count);
    }
    s.mean_count = static_cast<double>(total) / static_cast<double>(entries_.size());
    s.max_count = mx;
    s.oldest_insert_index = entries_.front().insert_index;
    return s;
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<BufferEntry>& entries() const { return entries_; }

  // Debug snapshot; mirrors the dataset JSONL with added rejected and count
  // fields (id carries the insert index).
  void write_snapshot_jsonl(std::ostream& os) const {
    for (const BufferEntry& e : entries_) {
      nlohmann::ordered_json j;
      j["id"] = std::to_string(e.insert_index);
      j["prompt"] = e.tuple.prompt;
      j["chosen"] = e.tuple.chosen;
      j["rejected"] = e.tuple.rejected;
      j["count"] = e.count;
      os << j.dump() << '\n';
    }
  }

 private:
  std::deque<BufferEntry> entries_;
  std::size_t capacity_;
  std::uint64_t next_insert_index_ = 0;
};

}  // namespace sapo
