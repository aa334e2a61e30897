#include <gtest/gtest.h>

#include <cmath>

#include "nanocap/baselines.hpp"
#include "support/toy.hpp"

namespace nanocap {
namespace {

using testing::toy_config;
using testing::toy_setup;
using testing::toy_world;

class ToyBaselines : public ::testing::Test {
 protected:
  testing::ToyWorld world = toy_world();
  CompressionSetup setup = toy_setup(world);
  int vocab_size = static_cast<int>(world.vocab.units().size());
  ModelParams model = testing::spiky_params(toy_config(vocab_size, 8, 2, 64, 4), 3.0);

  // Random words from the toy vocabulary; every word is a single token.
  TokenSequence random_words(Rng& rng, std::size_t n) const {
    static const char* words[] = {"a", "b", "c", "d", "e", "f", "g", "h", "x", "y", "z", "1", "2", "3"};
    std::string text;
    for (std::size_t i = 0; i < n; ++i) text += std::string(i ? " " : "") + words[uniform_index(rng, 14)];
    return tokenize(text, world.vocab);
  }
};

TEST_F(ToyBaselines, SelfInformationMatchesPrefixLoopOracle) {
  const auto k = tokenize("a b c d e f g h", world.vocab);
  const auto info = self_information(model, world.vocab, k);
  for (std::size_t t = 0; t < k.size(); ++t) {
    TokenSequence prefix{world.vocab.sep_id()};
    prefix.insert(prefix.end(), k.begin(), k.begin() + static_cast<std::ptrdiff_t>(t));
    const auto logits = forward_last_logits(model, {prefix});
    double z = 0.0;
    for (std::size_t v = 0; v < logits.cols; ++v) z += std::exp(logits(0, v));
    const double oracle = -std::log(std::exp(logits(0, static_cast<std::size_t>(k[t]))) / z);
    EXPECT_NEAR(info[t], oracle, 1e-6) << t;
  }
}

TEST_F(ToyBaselines, SelectiveContextUnchangedWhenItFits) {
  const auto k = tokenize("a b c d", world.vocab);
  const auto r = selective_context(model, world.vocab, k, {4});
  EXPECT_EQ(r.kept, k);
  EXPECT_EQ(r.kept_units.size(), 4U);
}

TEST_F(ToyBaselines, UniformModelDropsEarliestUnitsFirst) {
  auto flat = model;
  std::fill(flat.values.begin(), flat.values.end(), 0.0);
  const auto k = tokenize("a b c d e f", world.vocab);
  const auto r = selective_context(flat, world.vocab, k, {2});
  for (std::size_t i = 1; i < r.units.size(); ++i) EXPECT_EQ(r.units[i].score, r.units[0].score);
  EXPECT_EQ(r.kept, TokenSequence(k.end() - 2, k.end()));
}

TEST_F(ToyBaselines, GreedyMatchesBruteForceOnSmallPrompts) {
  Rng rng(31);
  for (int instance = 0; instance < 60; ++instance) {
    const auto k = random_words(rng, 3 + uniform_index(rng, 6));
    const LengthBudget budget{1 + uniform_index(rng, k.size())};
    const auto r = selective_context(model, world.vocab, k, budget);
    ASSERT_EQ(r.units.size(), k.size());
    // Oracle: the subset with the largest total information that fits.
    const std::size_t n = r.units.size();
    double best = -1.0;
    std::uint32_t best_mask = 0;
    for (std::uint32_t mask = 0; mask < (1U << n); ++mask) {
      std::size_t length = 0;
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (mask & (1U << i)) {
          length += r.units[i].span.size();
          total += r.units[i].score;
        }
      }
      if (length <= budget.max_tokens && total > best) {
        best = total;
        best_mask = mask;
      }
    }
    std::vector<std::size_t> expected;
    for (std::size_t i = 0; i < n; ++i) {
      if (best_mask & (1U << i)) expected.push_back(i);
    }
    ASSERT_EQ(r.kept_units, expected) << "instance " << instance;
  }
}

TEST_F(ToyBaselines, SelectiveContextBudgetAndOrderProperty) {
  Rng rng(32);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto k = random_words(rng, 1 + uniform_index(rng, 20));
    const LengthBudget budget{1 + uniform_index(rng, 24)};
    const auto granularity = static_cast<Granularity>(uniform_index(rng, 3));
    const auto r = selective_context(model, world.vocab, k, budget, {UnitScore::kSum, granularity});
    ASSERT_LE(r.kept.size(), budget.max_tokens);
    ASSERT_TRUE(std::is_sorted(r.kept_units.begin(), r.kept_units.end()));
    // kept tokens are a subsequence of k
    std::size_t j = 0;
    for (std::size_t t = 0; t < k.size() && j < r.kept.size(); ++t) j += k[t] == r.kept[j];
    ASSERT_EQ(j, r.kept.size());
  }
}

TEST_F(ToyBaselines, SentenceAndMeanScoring) {
  const auto k = tokenize("a b ? c d e ? f", world.vocab);
  const auto spans = prune_units(world.vocab, k, Granularity::kSentence);
  ASSERT_EQ(spans.size(), 3U);
  EXPECT_EQ(spans[0].size(), 3U);
  EXPECT_EQ(spans[1].size(), 4U);
  const auto sum = selective_context(model, world.vocab, k, {100}, {UnitScore::kSum, Granularity::kSentence});
  const auto mean = selective_context(model, world.vocab, k, {100}, {UnitScore::kMean, Granularity::kSentence});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(mean.units[i].score, sum.units[i].score / static_cast<double>(spans[i].size()), 1e-12);
  }
}

TEST_F(ToyBaselines, RandomDropUnchangedWhenItFits) {
  const std::string prompt = "a b\n\nc d e\n\nf g";
  const auto r = random_drop(world.vocab, prompt, {100}, 1);
  EXPECT_EQ(r.kept, tokenize(prompt, world.vocab));
  EXPECT_TRUE(r.drop_order.empty());
}

TEST_F(ToyBaselines, RandomDropStopsAtOneBlock) {
  const std::string prompt = "a b c\n\nd e f\n\ng h x";
  const auto r = random_drop(world.vocab, prompt, {2}, 5);
  ASSERT_EQ(r.kept_blocks.size(), 1U);
  EXPECT_EQ(r.drop_order.size(), 2U);
  EXPECT_EQ(r.kept.size(), 2U);
}

TEST_F(ToyBaselines, RandomDropFirstVictimIsUniform) {
  const std::string prompt = "a\n\nb\n\nc\n\nd\n\ne";
  const int draws = 10000;
  std::vector<int> first(5, 0);
  for (int s = 0; s < draws; ++s) {
    ++first[random_drop(world.vocab, prompt, {4}, derive_seed(3, "drop", static_cast<std::uint64_t>(s))).drop_order[0]];
  }
  const double p = 0.2;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int h : first) EXPECT_LT(std::abs(h - draws * p), 3 * sigma);
}

TEST_F(ToyBaselines, RandomDropBudgetAndOrderProperty) {
  Rng rng(33);
  for (int trial = 0; trial < 1000; ++trial) {
    std::string prompt;
    const std::size_t blocks = 1 + uniform_index(rng, 6);
    for (std::size_t b = 0; b < blocks; ++b) {
      if (b) prompt += "\n\n";
      prompt += detokenize(random_words(rng, 1 + uniform_index(rng, 5)), world.vocab);
    }
    const LengthBudget budget{1 + uniform_index(rng, 20)};
    const auto r = random_drop(world.vocab, prompt, budget, trial);
    ASSERT_LE(r.kept.size(), budget.max_tokens);
    ASSERT_TRUE(std::is_sorted(r.kept_blocks.begin(), r.kept_blocks.end()));
  }
}

TEST_F(ToyBaselines, RandomDropNeedsBlocks) {
  try {
    random_drop(world.vocab, "  \n\n ", {3}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnparseableStructure);
  }
}

TEST_F(ToyBaselines, ZeroShotIsBoundedDeterministicAndMatchesUntrainedCompressor) {
  Rng rng(34);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto k = random_words(rng, 1 + uniform_index(rng, 12));
    const LengthBudget budget{1 + uniform_index(rng, 8)};
    const auto c = zero_shot_summarize(model, world.vocab, setup, k, budget);
    ASSERT_LE(c.size(), budget.max_tokens);
    if (trial < 20) {
      ASSERT_EQ(c, zero_shot_summarize(model, world.vocab, setup, k, budget));
      const auto g = summarize_generate(model, world.vocab, setup, k, budget.max_tokens, Decoding::greedy());
      ASSERT_EQ(c, truncate(g.capsule, budget));
    }
  }
}

}  // namespace
}  // namespace nanocap
