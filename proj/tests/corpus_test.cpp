#include "sapo/corpus.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "oracle.hpp"
#include "sapo/evaluate.hpp"
#include "sapo/model.hpp"
#include "test_util.hpp"

using sapo::SftExample;
using sapo::TaskKind;
using sapo::TaskSpec;
using sapo::Token;
using sapo::TokenSeq;

TEST(Corpus, CopyTaskChosenEqualsPrompt) {
  TaskSpec spec;
  spec.kind = TaskKind::copy;
  spec.vocab_size = 8;
  spec.prompt_len = 3;
  spec.count = 50;
  spec.seed = 11;
  auto data = sapo::generate_dataset(spec);
  ASSERT_EQ(data.size(), 50u);
  for (const auto& ex : data) {
    EXPECT_EQ(ex.chosen, ex.prompt);
    EXPECT_FALSE(ex.rejected.has_value());
    for (Token t : ex.prompt) {
      EXPECT_GE(t, 1);
      EXPECT_LT(t, 8);
    }
  }
}

TEST(Corpus, PatternRuleChecker) {
  EXPECT_TRUE(sapo::pattern_ok({0, 1, 4, 3}));
  EXPECT_FALSE(sapo::pattern_ok({0, 2, 4, 6}));
  EXPECT_FALSE(sapo::pattern_ok({1, 2}));
  EXPECT_FALSE(sapo::pattern_ok({}));
  EXPECT_TRUE(sapo::pattern_ok({2}));
}

TEST(Corpus, PatternGenerationsSatisfyRule) {
  int generated = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TaskSpec spec;
    spec.kind = TaskKind::pattern;
    spec.vocab_size = 4 + static_cast<int>(seed % 9);
    spec.response_len = 1 + static_cast<int>(seed % 7);
    spec.count = 100;
    spec.seed = seed;
    for (const auto& ex : sapo::generate_dataset(spec)) {
      EXPECT_TRUE(sapo::pattern_ok(ex.chosen)) << "seed " << seed;
      for (Token t : ex.chosen) EXPECT_GE(t, 1);
      ++generated;
    }
  }
  EXPECT_EQ(generated, 1000);
}

TEST(Corpus, GenerationIsDeterministic) {
  TaskSpec spec;
  spec.kind = TaskKind::pattern;
  spec.paired = true;
  spec.seed = 99;
  auto a = sapo::generate_dataset(spec);
  auto b = sapo::generate_dataset(spec);
  EXPECT_EQ(a, b);
  std::ostringstream sa, sb;
  sapo::save_jsonl(sa, a);
  sapo::save_jsonl(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Corpus, RoundTripOverRandomSpecs) {
  sapo::rng::Stream st(0x707);
  for (int rep = 0; rep < 100; ++rep) {
    TaskSpec spec;
    spec.kind = st.next_below(2) == 0 ? TaskKind::copy : TaskKind::pattern;
    spec.vocab_size = 4 + static_cast<int>(st.next_below(28));
    spec.prompt_len = 1 + static_cast<int>(st.next_below(8));
    spec.response_len = 1 + static_cast<int>(st.next_below(12));
    spec.count = 1 + static_cast<int>(st.next_below(20));
    spec.seed = st.next_u64();
    spec.paired = st.next_below(2) == 1;
    auto data = sapo::generate_dataset(spec);
    std::ostringstream os;
    sapo::save_jsonl(os, data);
    std::istringstream is(os.str());
    auto loaded = sapo::load_jsonl(is, spec.vocab_size);
    EXPECT_EQ(data, loaded) << "rep " << rep;
  }
}

TEST(Corpus, LoadDirectMapping) {
  std::istringstream is(R"({"prompt":[1,2],"chosen":[3]})");
  auto data = sapo::load_jsonl(is, 8);
  ASSERT_EQ(data.size(), 1u);
  EXPECT_EQ(data[0].id, "0");
  EXPECT_EQ(data[0].prompt, (TokenSeq{1, 2}));
  EXPECT_EQ(data[0].chosen, (TokenSeq{3}));
  EXPECT_FALSE(data[0].rejected.has_value());
}

TEST(Corpus, LoadEmptyFile) {
  std::istringstream is("");
  EXPECT_TRUE(sapo::load_jsonl(is, 8).empty());
}

TEST(Corpus, LoadEmptyChosenIsValidationError) {
  std::istringstream is(R"({"prompt":[1],"chosen":[]})");
  EXPECT_THROW(sapo::load_jsonl(is, 8), sapo::ValidationError);
}

TEST(Corpus, MalformedLineCarriesLineNumber) {
  std::istringstream is("{\"prompt\":[1],\"chosen\":[2]}\nnot json\n");
  try {
    sapo::load_jsonl(is, 8);
    FAIL() << "expected DataFormatError";
  } catch (const sapo::DataFormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Corpus, TokenOutOfRangeIsValidationError) {
  std::istringstream is(R"({"prompt":[1],"chosen":[9]})");
  EXPECT_THROW(sapo::load_jsonl(is, 8), sapo::ValidationError);
}

TEST(Corpus, UnknownKeyRejected) {
  std::istringstream is(R"({"prompt":[1],"chosen":[2],"extra":1})");
  EXPECT_THROW(sapo::load_jsonl(is, 8), sapo::DataFormatError);
}

TEST(Corpus, InvalidSpecRejected) {
  TaskSpec spec;
  spec.count = 0;
  EXPECT_THROW(sapo::generate_dataset(spec), sapo::ConfigError);
  spec.count = 1;
  spec.vocab_size = 3;
  EXPECT_THROW(sapo::generate_dataset(spec), sapo::ConfigError);
}

TEST(Corpus, CorruptionRateAndContent) {
  sapo::rng::Stream st(0xbad);
  for (int rep = 0; rep < 200; ++rep) {
    const int vocab = 4 + static_cast<int>(st.next_below(12));
    const std::size_t len = 1 + st.next_below(16);
    TokenSeq chosen(len);
    for (Token& t : chosen) t = 1 + static_cast<Token>(st.next_below(vocab - 1));
    TokenSeq bad = sapo::corrupt_response(chosen, vocab, st.next_u64());
    ASSERT_EQ(bad.size(), chosen.size());
    std::size_t changed = 0;
    for (std::size_t i = 0; i < len; ++i)
      if (bad[i] != chosen[i]) {
        ++changed;
        EXPECT_GE(bad[i], 1);
        EXPECT_LT(bad[i], vocab);
      }
    EXPECT_EQ(changed, (len + 3) / 4) << "len " << len;
  }
}

TEST(Corpus, CorruptionDeterministic) {
  TokenSeq chosen{3, 1, 2, 5, 4, 1};
  EXPECT_EQ(sapo::corrupt_response(chosen, 8, 7), sapo::corrupt_response(chosen, 8, 7));
}

TEST(Corpus, PairedGenerationHasRejectedWithSameLength) {
  TaskSpec spec;
  spec.kind = TaskKind::pattern;
  spec.paired = true;
  spec.response_len = 6;
  spec.count = 40;
  spec.seed = 5;
  for (const auto& ex : sapo::generate_dataset(spec)) {
    ASSERT_TRUE(ex.rejected.has_value());
    EXPECT_EQ(ex.rejected->size(), ex.chosen.size());
    EXPECT_NE(*ex.rejected, ex.chosen);
  }
}

TEST(Evaluate, UniformModelTiesCountAsFailure) {
  sapo::TabularBigramLM model(8);  // zero logits: uniform rows
  TaskSpec spec;
  spec.vocab_size = 8;
  spec.count = 20;
  auto data = sapo::generate_dataset(spec);
  EXPECT_EQ(sapo::evaluate_preference_accuracy(model, data, 123), 0.0);
}

TEST(Evaluate, CertainModelScoresPerfectly) {
  // Row logits pushing ~all mass onto the pattern successor parity: instead,
  // use one example whose chosen transitions carry huge logits.
  sapo::TabularBigramLM model(8);
  std::vector<double> table(64, 0.0);
  const TokenSeq prompt{1};
  const TokenSeq chosen{2, 3, 2, 3};
  table[1 * 8 + 2] = 60.0;
  table[2 * 8 + 3] = 60.0;
  table[3 * 8 + 2] = 60.0;
  model.set_params(table);
  std::vector<SftExample> data{{"0", prompt, chosen, std::nullopt}};
  EXPECT_EQ(sapo::evaluate_preference_accuracy(model, data, 9), 1.0);
}

TEST(Evaluate, OrderInvariance) {
  TaskSpec spec;
  spec.kind = TaskKind::pattern;
  spec.vocab_size = 10;
  spec.count = 60;
  spec.seed = 21;
  auto data = sapo::generate_dataset(spec);
  sapo::TabularBigramLM model(10, 77);
  const double acc = sapo::evaluate_preference_accuracy(model, data, 5);
  std::reverse(data.begin(), data.end());
  EXPECT_EQ(sapo::evaluate_preference_accuracy(model, data, 5), acc);
}

TEST(Evaluate, EmptyListIsError) {
  sapo::TabularBigramLM model(8);
  EXPECT_THROW(sapo::evaluate_preference_accuracy(model, {}, 1), sapo::ValidationError);
}

// The accuracy on a converged model is recomputed by an independent script
// that re-derives both log-probs by direct summation. Convergence comes from
// the closed-form SFT optimum of a bigram model: logits = log of smoothed
// empirical transition frequencies.
TEST(Evaluate, AccuracyMatchesBruteForceOracle) {
  TaskSpec spec;
  spec.kind = TaskKind::pattern;
  spec.vocab_size = 8;
  spec.prompt_len = 2;
  spec.response_len = 6;
  spec.count = 200;
  spec.seed = 31;
  auto data = sapo::generate_dataset(spec);

  const int v = spec.vocab_size;
  std::vector<double> counts(static_cast<std::size_t>(v) * v, 0.5);  // add-half smoothing
  for (const auto& ex : data) {
    TokenSeq seq = ex.prompt;
    for (Token t : ex.chosen) {
      const int prev = seq.back();
      counts[static_cast<std::size_t>(prev) * v + static_cast<std::size_t>(t)] += 1.0;
      seq.push_back(t);
    }
  }
  std::vector<double> table(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) table[i] = std::log(counts[i]);
  sapo::TabularBigramLM model(v);
  model.set_params(table);

  const std::uint64_t corruptor_seed = 404;
  const double acc = sapo::evaluate_preference_accuracy(model, data, corruptor_seed);

  std::size_t wins = 0;
  for (const auto& ex : data) {
    TokenSeq corrupted = sapo::corrupt_response(
        ex.chosen, v, sapo::rng::derive(corruptor_seed, sapo::content_key(ex)));
    const double good = oracle::bigram_logprob(table, v, ex.prompt, ex.chosen) /
                        static_cast<double>(ex.chosen.size());
    const double bad = oracle::bigram_logprob(table, v, ex.prompt, corrupted) /
                       static_cast<double>(corrupted.size());
    if (good > bad) ++wins;
  }
  const double oracle_acc = static_cast<double>(wins) / static_cast<double>(data.size());
  EXPECT_EQ(acc, oracle_acc);
  EXPECT_GT(acc, 0.8);  // the converged model should win nearly always
}
