#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sapo/errors.hpp"
#include "sapo/rng.hpp"

namespace sapo {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// One supervised example: prompt plus a chosen response, with an optional
// pre-collected rejected response for offline-paired training.
struct SftExample {
  std::string id;
  TokenSeq prompt;
  TokenSeq chosen;
  std::optional<TokenSeq> rejected;

  bool operator==(const SftExample&) const = default;
};

struct PreferenceTuple {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;

  bool operator==(const PreferenceTuple&) const = default;
};

enum class TaskKind { copy, pattern };

// Synthetic task generator parameters. Token id 0 is reserved as the
// begin-of-context pad and never appears in generated payloads.
struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  int vocab_size = 16;
  int prompt_len = 4;
  int response_len = 4;
  int count = 100;
  std::uint64_t seed = 0;
  bool paired = false;
};

inline void validate(const TaskSpec& spec) {
  if (spec.vocab_size < 4) throw ConfigError("task: vocab_size must be >= 4");
  if (spec.count < 1) throw ConfigError("task: count must be >= 1");
  if (spec.prompt_len < 1) throw ConfigError("task: prompt_len must be >= 1");
  if (spec.response_len < 1) throw ConfigError("task: response_len must be >= 1");
}

// Rule for the pattern task: token ids strictly alternate between even and
// odd, starting even.
inline bool pattern_ok(const TokenSeq& seq) {
  if (seq.empty()) return false;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if ((seq[i] % 2 + 2) % 2 != static_cast<Token>(i % 2)) return false;
  return true;
}

// Substitutes ceil(25%) of positions (at least one) with uniform-random
// wrong tokens drawn from [1, vocab_size) minus the original token.
inline TokenSeq corrupt_response(const TokenSeq& chosen, int vocab_size, std::uint64_t seed) {
  if (chosen.empty()) throw ContractError("corrupt_response: empty response");
  if (vocab_size < 3) throw ConfigError("corrupt_response: vocab_size must be >= 3");
  const std::size_t len = chosen.size();
  const std::size_t k = (len + 3) / 4;

  rng::Stream st(seed);
  std::vector<std::size_t> idx(len);
  for (std::size_t i = 0; i < len; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i)
    std::swap(idx[i], idx[i + st.next_below(len - i)]);
  std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));

  TokenSeq out = chosen;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t pos = idx[i];
    const Token orig = chosen[pos];
    Token sub;
    if (orig < 1 || orig >= vocab_size) {
      sub = 1 + static_cast<Token>(st.next_below(static_cast<std::uint64_t>(vocab_size - 1)));
    } else {
      sub = 1 + static_cast<Token>(st.next_below(static_cast<std::uint64_t>(vocab_size - 2)));
      if (sub >= orig) ++sub;
    }
    out[pos] = sub;
  }
  return out;
}

inline std::vector<SftExample> generate_dataset(const TaskSpec& spec) {
  validate(spec);
  const int v = spec.vocab_size;
  const int n_even = (v - 1) / 2;  // even ids in [2, v)
  const int n_odd = v / 2;         // odd ids in [1, v)

  std::vector<SftExample> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) {
    rng::Stream st(rng::derive(spec.seed, 0x9e01u, static_cast<std::uint64_t>(i)));
    SftExample ex;
    ex.id = std::to_string(i);
    ex.prompt.resize(static_cast<std::size_t>(spec.prompt_len));
    for (Token& t : ex.prompt)
      t = 1 + static_cast<Token>(st.next_below(static_cast<std::uint64_t>(v - 1)));
    if (spec.kind == TaskKind::copy) {
      ex.chosen = ex.prompt;
    } else {
      ex.chosen.resize(static_cast<std::size_t>(spec.response_len));
      for (std::size_t p = 0; p < ex.chosen.size(); ++p) {
        if (p % 2 == 0)
          ex.chosen[p] = 2 + 2 * static_cast<Token>(st.next_below(static_cast<std::uint64_t>(n_even)));
        else
          ex.chosen[p] = 1 + 2 * static_cast<Token>(st.next_below(static_cast<std::uint64_t>(n_odd)));
      }
    }
    if (spec.paired)
      ex.rejected = corrupt_response(
          ex.chosen, v, rng::derive(spec.seed, 0x9e02u, static_cast<std::uint64_t>(i)));
    out.push_back(std::move(ex));
  }
  return out;
}

// JSONL, one object per line, keys in the order id, prompt, chosen, rejected.
inline void save_jsonl(std::ostream& os, const std::vector<SftExample>& examples) {
  for (const SftExample& ex : examples) {
    nlohmann::ordered_json j;
    j["id"] = ex.id;
    j["prompt"] = ex.prompt;
    j["chosen"] = ex.chosen;
    if (ex.rejected) j["rejected"] = *ex.rejected;
    os << j.dump() << '\n';
  }
}

inline void save_jsonl(const std::filesystem::path& path, const std::vector<SftExample>& examples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataFormatError("cannot open for writing: " + path.string());
  save_jsonl(os, examples);
}

namespace detail {

inline TokenSeq tokens_from_json(const nlohmann::json& arr, int vocab_size,
                                 const std::string& where) {
  if (!arr.is_array()) throw DataFormatError(where + ": expected an array of token ids");
  TokenSeq out;
  out.reserve(arr.size());
  for (const auto& e : arr) {
    if (!e.is_number_integer())
      throw DataFormatError(where + ": token ids must be integers");
    const std::int64_t t = e.get<std::int64_t>();
    if (t < 0 || t >= vocab_size)
      throw ValidationError(where + ": token id " + std::to_string(t) +
                            " outside [0," + std::to_string(vocab_size) + ")");
    out.push_back(static_cast<Token>(t));
  }
  return out;
}

}  // namespace detail

inline std::vector<SftExample> load_jsonl(std::istream& is, int vocab_size) {
  std::vector<SftExample> out;
  std::string line;
  for (int ln = 0; std::getline(is, line); ++ln) {
    const std::string where = "line " + std::to_string(ln + 1);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataFormatError(where + ": " + e.what());
    }
    if (!j.is_object()) throw DataFormatError(where + ": expected a JSON object");
    for (const auto& [key, val] : j.items()) {
      (void)val;
      if (key != "id" && key != "prompt" && key != "chosen" && key != "rejected")
        throw DataFormatError(where + ": unknown key '" + key + "'");
    }
    if (!j.contains("prompt") || !j.contains("chosen"))
      throw DataFormatError(where + ": 'prompt' and 'chosen' are required");

    SftExample ex;
    if (j.contains("id") && !j.at("id").is_string())
      throw DataFormatError(where + ": 'id' must be a string");
    ex.id = j.contains("id") ? j.at("id").get<std::string>() : std::to_string(ln);
    ex.prompt = detail::tokens_from_json(j.at("prompt"), vocab_size, where + " prompt");
    ex.chosen = detail::tokens_from_json(j.at("chosen"), vocab_size, where + " chosen");
    if (ex.prompt.empty()) throw ValidationError(where + ": prompt must be non-empty");
    if (ex.chosen.empty()) throw ValidationError(where + ": chosen must be non-empty");
    if (j.contains("rejected")) {
      TokenSeq rej = detail::tokens_from_json(j.at("rejected"), vocab_size, where + " rejected");
      if (rej.empty()) throw ValidationError(where + ": rejected must be non-empty when present");
      ex.rejected = std::move(rej);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<SftExample> load_jsonl(const std::filesystem::path& path, int vocab_size) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataFormatError("cannot open dataset: " + path.string());
  return load_jsonl(is, vocab_size);
}

// Content hash used to seed per-example corruption in the evaluator; it
// depends only on the example, not on its position in the list.
inline std::uint64_t content_key(const SftExample& ex) {
  std::uint64_t h = 0x5eed5eedULL;
  h = rng::hash_combine(h, ex.prompt.size());
  for (Token t : ex.prompt) h = rng::hash_combine(h, static_cast<std::uint64_t>(t));
  h = rng::hash_combine(h, ex.chosen.size());
  for (Token t : ex.chosen) h = rng::hash_combine(h, static_cast<std::uint64_t>(t));
  return h;
}

}  // namespace sapo
