#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sapo/autodiff.hpp"
#include "sapo/corpus.hpp"
#include "sapo/errors.hpp"
#include "sapo/rng.hpp"

namespace sapo {

// Log-probability of one response under one model.
struct SeqScore {
  double sum_logprob = 0.0;             // nats
  std::vector<double> per_token;
  double avg_logprob = 0.0;             // sum / response length
};

// Tape-bound score: differentiable sum/avg handles plus the plain values.
struct ScoreVars {
  ad::Var sum;
  ad::Var avg;
  SeqScore values;
};

// Per-(model, tape) binding. Parameters are copied onto the tape as leaves
// once; every score() call reuses them, so gradients accumulate across a
// batch. param_grad() is valid after Tape::backward and is ordered exactly
// like PolicyModel::get_params.
class ModelGraph {
 public:
  virtual ~ModelGraph() = default;
  virtual ScoreVars score(const TokenSeq& prompt, const TokenSeq& response) = 0;
  virtual std::vector<double> param_grad() const = 0;
};

class PolicyModel {
 public:
  virtual ~PolicyModel() = default;

  virtual int vocab_size() const = 0;
  virtual int context_window() const = 0;
  virtual std::size_t param_count() const = 0;
  virtual std::string kind() const = 0;

  // Flat parameter vector; ordering is stable for the lifetime of the model.
  virtual std::vector<double> get_params() const = 0;
  virtual void set_params(std::span<const double> flat) = 0;

  // Deep copy; training the source never alters the clone and gradients
  // never flow into it (reference/generator scoring uses the plain path).
  virtual std::unique_ptr<PolicyModel> clone_frozen() const = 0;

  // Logits over the vocabulary given a raw context; the model truncates the
  // context to its window, left-padding with the reserved token 0.
  virtual std::vector<double> next_token_logits(std::span<const Token> context) const = 0;

  virtual std::unique_ptr<ModelGraph> bind(ad::Tape& tape) const = 0;
};

namespace detail {

inline void log_softmax_inplace(std::span<double> row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  for (double& v : row) v -= lz;
}

// Window of the last `window` tokens of prompt + response[0..i), left-padded
// with 0, flattened for all response positions: L x window row-major.
inline std::vector<int> context_rows(const TokenSeq& prompt, const TokenSeq& response,
                                     int window) {
  const std::size_t len = response.size();
  std::vector<int> rows(len * static_cast<std::size_t>(window), 0);
  for (std::size_t i = 0; i < len; ++i) {
    // sequence so far: prompt ++ response[0..i)
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(prompt.size()) +
                                 static_cast<std::ptrdiff_t>(i);
    for (int j = 0; j < window; ++j) {
      const std::ptrdiff_t src = total - window + j;
      Token t = 0;
      if (src >= 0)
        t = src < static_cast<std::ptrdiff_t>(prompt.size())
                ? prompt[static_cast<std::size_t>(src)]
                : response[static_cast<std::size_t>(src - static_cast<std::ptrdiff_t>(prompt.size()))];
      rows[i * static_cast<std::size_t>(window) + static_cast<std::size_t>(j)] = t;
    }
  }
  return rows;
}

// One-hot [L, vocab] mask selecting response[i] in row i.
inline std::vector<double> target_mask(const TokenSeq& response, int vocab) {
  std::vector<double> mask(response.size() * static_cast<std::size_t>(vocab), 0.0);
  for (std::size_t i = 0; i < response.size(); ++i)
    mask[i * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(response[i])] = 1.0;
  return mask;
}

inline void check_response_tokens(const TokenSeq& response, int vocab) {
  if (response.empty()) throw ContractError("score: response must be non-empty");
  for (Token t : response)
    if (t < 0 || t >= vocab)
      throw ValidationError("score: token id " + std::to_string(t) + " outside [0," +
                            std::to_string(vocab) + ")");
}

}  // namespace detail

// Next-token conditioning is the single previous token (row 0 when the
// context is empty). Logits live in a V x V table; closed forms make this
// the oracle model for gradient checks.
class TabularBigramLM final : public PolicyModel {
 public:
  explicit TabularBigramLM(int vocab)
      : vocab_(vocab), params_(static_cast<std::size_t>(vocab) * vocab, 0.0) {
    if (vocab < 2) throw ConfigError("bigram: vocab_size must be >= 2");
  }
  TabularBigramLM(int vocab, std::uint64_t seed) : TabularBigramLM(vocab) {
    rng::Stream st(seed);
    for (double& p : params_) p = st.next_in(-0.05, 0.05);
  }

  int vocab_size() const override { return vocab_; }
  int context_window() const override { return 1; }
  std::size_t param_count() const override { return params_.size(); }
  std::string kind() const override { return "bigram"; }

  std::vector<double> get_params() const override { return params_; }
  void set_params(std::span<const double> flat) override {
    if (flat.size() != params_.size())
      throw ContractError("set_params: expected " + std::to_string(params_.size()) +
                          " values, got " + std::to_string(flat.size()));
    params_.assign(flat.begin(), flat.end());
  }

  std::unique_ptr<PolicyModel> clone_frozen() const override {
    return std::make_unique<TabularBigramLM>(*this);
  }

  std::vector<double> next_token_logits(std::span<const Token> context) const override {
    const Token prev = context.empty() ? 0 : context.back();
    if (prev < 0 || prev >= vocab_)
      throw ValidationError("bigram: context token " + std::to_string(prev) + " outside vocab");
    const double* row = params_.data() + static_cast<std::size_t>(prev) * vocab_;
    return std::vector<double>(row, row + vocab_);
  }

  std::unique_ptr<ModelGraph> bind(ad::Tape& tape) const override;

 private:
  int vocab_;
  std::vector<double> params_;  // row-major V x V, row = previous token
};

class BigramGraph final : public ModelGraph {
 public:
  BigramGraph(const TabularBigramLM& model, ad::Tape& tape)
      : tape_(tape), vocab_(model.vocab_size()) {
    table_ = tape_.leaf({vocab_, vocab_}, model.get_params());
  }

  ScoreVars score(const TokenSeq& prompt, const TokenSeq& response) override {
    detail::check_response_tokens(response, vocab_);
    std::vector<int> prev = detail::context_rows(prompt, response, 1);
    ad::Var lsm = tape_.log_softmax(tape_.gather_rows(table_, prev));
    ad::Var picked = tape_.mul(lsm, tape_.leaf({static_cast<int>(response.size()), vocab_},
                                               detail::target_mask(response, vocab_)));
    ScoreVars out;
    out.sum = tape_.sum(picked);
    out.avg = tape_.scale(out.sum, 1.0 / static_cast<double>(response.size()));
    out.values.sum_logprob = tape_.scalar_value(out.sum);
    out.values.avg_logprob = tape_.scalar_value(out.avg);
    const auto& lv = tape_.value(lsm);
    out.values.per_token.resize(response.size());
    for (std::size_t i = 0; i < response.size(); ++i)
      out.values.per_token[i] = lv[i * static_cast<std::size_t>(vocab_) +
                                   static_cast<std::size_t>(response[i])];
    return out;
  }

  std::vector<double> param_grad() const override { return tape_.grad(table_); }

 private:
  ad::Tape& tape_;
  int vocab_;
  ad::Var table_;
};

inline std::unique_ptr<ModelGraph> TabularBigramLM::bind(ad::Tape& tape) const {
  return std::make_unique<BigramGraph>(*this, tape);
}

// One hidden layer over the concatenated embeddings of a fixed context
// window. Parameter layout: embedding [V,d], w1 [(W*d),h], b1 [h],
// w2 [h,V], b2 [V].
class FeedForwardLM final : public PolicyModel {
 public:
  FeedForwardLM(int vocab, int embed_dim, int window, int hidden)
      : vocab_(vocab), embed_dim_(embed_dim), window_(window), hidden_(hidden) {
    if (vocab < 2 || embed_dim < 1 || window < 1 || hidden < 1)
      throw ConfigError("fflm: invalid dimensions");
    params_.assign(param_count(), 0.0);
  }
  FeedForwardLM(int vocab, int embed_dim, int window, int hidden, std::uint64_t seed)
      : FeedForwardLM(vocab, embed_dim, window, hidden) {
    rng::Stream st(seed);
    for (double& p : params_) p = st.next_in(-0.05, 0.05);
  }

  int vocab_size() const override { return vocab_; }
  int context_window() const override { return window_; }
  int embed_dim() const { return embed_dim_; }
  int hidden_dim() const { return hidden_; }

  std::size_t param_count() const override {
    const std::size_t v = static_cast<std::size_t>(vocab_);
    const std::size_t d = static_cast<std::size_t>(embed_dim_);
    const std::size_t w = static_cast<std::size_t>(window_);
    const std::size_t h = static_cast<std::size_t>(hidden_);
    return v * d + w * d * h + h + h * v + v;
  }
  std::string kind() const override { return "fflm"; }

  std::vector<double> get_params() const override { return params_; }
  void set_params(std::span<const double> flat) override {
    if (flat.size() != params_.size())
      throw ContractError("set_params: expected " + std::to_string(params_.size()) +
                          " values, got " + std::to_string(flat.size()));
    params_.assign(flat.begin(), flat.end());
  }

  std::unique_ptr<PolicyModel> clone_frozen() const override {
    return std::make_unique<FeedForwardLM>(*this);
  }

  // offsets into the flat parameter vector
  std::size_t emb_off() const { return 0; }
  std::size_t w1_off() const { return static_cast<std::size_t>(vocab_) * embed_dim_; }
  std::size_t b1_off() const {
    return w1_off() + static_cast<std::size_t>(window_) * embed_dim_ * hidden_;
  }
  std::size_t w2_off() const { return b1_off() + static_cast<std::size_t>(hidden_); }
  std::size_t b2_off() const { return w2_off() + static_cast<std::size_t>(hidden_) * vocab_; }

  std::vector<double> next_token_logits(std::span<const Token> context) const override {
    const int w = window_, d = embed_dim_, h = hidden_, v = vocab_;
    std::vector<int> padded(static_cast<std::size_t>(w), 0);
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(context.size());
    for (int j = 0; j < w; ++j) {
      const std::ptrdiff_t src = total - w + j;
      if (src >= 0) padded[static_cast<std::size_t>(j)] = context[static_cast<std::size_t>(src)];
    }
    std::vector<double> x(static_cast<std::size_t>(w) * d);
    for (int j = 0; j < w; ++j) {
      const Token t = padded[static_cast<std::size_t>(j)];
      if (t < 0 || t >= v)
        throw ValidationError("fflm: context token " + std::to_string(t) + " outside vocab");
      const double* row = params_.data() + emb_off() + static_cast<std::size_t>(t) * d;
      std::copy(row, row + d, x.begin() + static_cast<std::size_t>(j) * d);
    }
    const double* w1 = params_.data() + w1_off();
    const double* b1 = params_.data() + b1_off();
    const double* w2 = params_.data() + w2_off();
    const double* b2 = params_.data() + b2_off();
    std::vector<double> hidden(static_cast<std::size_t>(h));
    for (int u = 0; u < h; ++u) {
      double acc = b1[u];
      for (int tIdx = 0; tIdx < w * d; ++tIdx)
        acc += x[static_cast<std::size_t>(tIdx)] * w1[static_cast<std::size_t>(tIdx) * h + u];
      hidden[static_cast<std::size_t>(u)] = std::tanh(acc);
    }
    std::vector<double> logits(static_cast<std::size_t>(v));
    for (int o = 0; o < v; ++o) {
      double acc = b2[o];
      for (int u = 0; u < h; ++u)
        acc += hidden[static_cast<std::size_t>(u)] * w2[static_cast<std::size_t>(u) * v + o];
      logits[static_cast<std::size_t>(o)] = acc;
    }
    return logits;
  }

  std::unique_ptr<ModelGraph> bind(ad::Tape& tape) const override;

 private:
  int vocab_, embed_dim_, window_, hidden_;
  std::vector<double> params_;
};

class FeedForwardGraph final : public ModelGraph {
 public:
  FeedForwardGraph(const FeedForwardLM& model, ad::Tape& tape)
      : tape_(tape),
        vocab_(model.vocab_size()),
        embed_dim_(model.embed_dim()),
        window_(model.context_window()),
        hidden_(model.hidden_dim()) {
    const std::vector<double> p = model.get_params();
    auto slice = [&](std::size_t off, std::size_t n) {
      return std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(off),
                                 p.begin() + static_cast<std::ptrdiff_t>(off + n));
    };
    const std::size_t d = static_cast<std::size_t>(embed_dim_);
    const std::size_t h = static_cast<std::size_t>(hidden_);
    const std::size_t v = static_cast<std::size_t>(vocab_);
    const std::size_t w = static_cast<std::size_t>(window_);
    emb_ = tape_.leaf({vocab_, embed_dim_}, slice(model.emb_off(), v * d));
    w1_ = tape_.leaf({window_ * embed_dim_, hidden_}, slice(model.w1_off(), w * d * h));
    b1_ = tape_.leaf({hidden_}, slice(model.b1_off(), h));
    w2_ = tape_.leaf({hidden_, vocab_}, slice(model.w2_off(), h * v));
    b2_ = tape_.leaf({vocab_}, slice(model.b2_off(), v));
  }

  ScoreVars score(const TokenSeq& prompt, const TokenSeq& response) override {
    detail::check_response_tokens(response, vocab_);
    const int len = static_cast<int>(response.size());
    std::vector<int> rows = detail::context_rows(prompt, response, window_);
    // [L*W, d] gathered embeddings; row-major reshape to [L, W*d] is exactly
    // per-position concatenation.
    ad::Var gathered = tape_.gather_rows(emb_, rows);
    ad::Var x = tape_.reshape(gathered, {len, window_ * embed_dim_});
    ad::Var hidden = tape_.tanh(tape_.add_rowvec(tape_.matmul(x, w1_), b1_));
    ad::Var logits = tape_.add_rowvec(tape_.matmul(hidden, w2_), b2_);
    ad::Var lsm = tape_.log_softmax(logits);
    ad::Var picked =
        tape_.mul(lsm, tape_.leaf({len, vocab_}, detail::target_mask(response, vocab_)));
    ScoreVars out;
    out.sum = tape_.sum(picked);
    out.avg = tape_.scale(out.sum, 1.0 / static_cast<double>(len));
    out.values.sum_logprob = tape_.scalar_value(out.sum);
    out.values.avg_logprob = tape_.scalar_value(out.avg);
    const auto& lv = tape_.value(lsm);
    out.values.per_token.resize(response.size());
    for (std::size_t i = 0; i < response.size(); ++i)
      out.values.per_token[i] = lv[i * static_cast<std::size_t>(vocab_) +
                                   static_cast<std::size_t>(response[i])];
    return out;
  }

  std::vector<double> param_grad() const override {
    std::vector<double> g;
    for (ad::Var v : {emb_, w1_, b1_, w2_, b2_}) {
      const auto& part = tape_.grad(v);
      g.insert(g.end(), part.begin(), part.end());
    }
    return g;
  }

 private:
  ad::Tape& tape_;
  int vocab_, embed_dim_, window_, hidden_;
  ad::Var emb_, w1_, b1_, w2_, b2_;
};

inline std::unique_ptr<ModelGraph> FeedForwardLM::bind(ad::Tape& tape) const {
  return std::make_unique<FeedForwardGraph>(*this, tape);
}

// Plain (non-differentiable) scoring used for evaluation, sampling-side
// bookkeeping and reference models.
inline SeqScore score_sequence(const PolicyModel& model, const TokenSeq& prompt,
                               const TokenSeq& response) {
  detail::check_response_tokens(response, model.vocab_size());
  TokenSeq ctx = prompt;
  ctx.reserve(prompt.size() + response.size());
  SeqScore s;
  s.per_token.reserve(response.size());
  for (Token tok : response) {
    std::vector<double> logits = model.next_token_logits(ctx);
    detail::log_softmax_inplace(logits);
    s.per_token.push_back(logits[static_cast<std::size_t>(tok)]);
    s.sum_logprob += s.per_token.back();
    ctx.push_back(tok);
  }
  s.avg_logprob = s.sum_logprob / static_cast<double>(response.size());
  return s;
}

// Draws exactly max_new tokens. temperature 0 is argmax with lowest-id
// tie-break; otherwise softmax(logits/temperature) sampled with the
// counter-based RNG keyed by (seed, position).
inline TokenSeq sample_continuation(const PolicyModel& model, const TokenSeq& context,
                                    int max_new, double temperature, std::uint64_t seed) {
  if (max_new < 1) throw ContractError("sample_continuation: max_new must be >= 1");
  if (temperature < 0.0) throw ConfigError("sample_continuation: temperature must be >= 0");
  TokenSeq ctx = context;
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(max_new));
  const int v = model.vocab_size();
  for (int pos = 0; pos < max_new; ++pos) {
    std::vector<double> logits = model.next_token_logits(ctx);
    Token tok = 0;
    if (temperature == 0.0) {
      for (int j = 1; j < v; ++j)
        if (logits[static_cast<std::size_t>(j)] > logits[static_cast<std::size_t>(tok)]) tok = j;
    } else {
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      std::vector<double> p(logits.size());
      double z = 0.0;
      for (std::size_t j = 0; j < logits.size(); ++j) {
        p[j] = std::exp((logits[j] - mx) / temperature);
        z += p[j];
      }
      const double u = rng::unit_at(seed, static_cast<std::uint64_t>(pos)) * z;
      double acc = 0.0;
      tok = static_cast<Token>(v - 1);
      for (std::size_t j = 0; j < p.size(); ++j) {
        acc += p[j];
        if (u < acc) {
          tok = static_cast<Token>(j);
          break;
        }
      }
    }
    out.push_back(tok);
    ctx.push_back(tok);
  }
  return out;
}

}  // namespace sapo
