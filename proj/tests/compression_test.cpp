#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "nanocap/compression.hpp"
#include "support/gradcheck.hpp"
#include "support/toy.hpp"

namespace nanocap {
namespace {

using testing::toy_config;
using testing::toy_setup;
using testing::toy_world;

TEST(Instructions, DefaultsCarryOneSlot) {
  EXPECT_NO_THROW(InstructionSet::few_shot_cot().validate());
  EXPECT_NO_THROW(InstructionSet::reading().validate());
  EXPECT_EQ(InstructionSet::reading().summarize_text(150),
            "Please summarize the passage within less than 150 words. Make sure not to repeat the passage.");
}

TEST(Instructions, SlotCountIsEnforced) {
  EXPECT_THROW((InstructionSet{"rep", "no slot"}.validate()), Error);
  EXPECT_THROW((InstructionSet{"rep", "{word count} and {word count}"}.validate()), Error);
  EXPECT_THROW((InstructionSet{"  ", "{word count}"}.validate()), Error);
}

TEST(Instructions, LoadJsonAndPlainText) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto json_path = dir / "nanocap_instr.json";
  std::ofstream(json_path) << R"({"t_rep": "say it again", "t_summ": "shorten to {word count}"})";
  const auto a = load_instructions(json_path);
  EXPECT_EQ(a.t_rep, "say it again");
  EXPECT_EQ(a.summarize_text(7), "shorten to 7");
  const auto txt_path = dir / "nanocap_instr.txt";
  std::ofstream(txt_path) << "t_rep: say it again\nt_summ: shorten to {word count}\n";
  EXPECT_EQ(load_instructions(txt_path).t_summ, a.t_summ);
  std::ofstream(txt_path) << "t_rep: only one\n";
  EXPECT_THROW(load_instructions(txt_path), Error);
  std::filesystem::remove(json_path);
  std::filesystem::remove(txt_path);
  try {
    load_instructions(dir / "nanocap_missing_instr.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIoFailure);
  }
}

TEST(SemanticLoss, IdenticalIsZero) {
  const EmbeddingVector e{{0.3, -1.0, 2.5}};
  EXPECT_EQ(semantic_loss(e, e), 0.0);
}

TEST(SemanticLoss, HandComputedPair) {
  EXPECT_DOUBLE_EQ(semantic_loss({{0.0, 0.0}}, {{2.0, 0.0}}), 2.0);
}

TEST(SemanticLoss, MatchesLoopOracleSymmetricAndPermutationInvariant) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + uniform_index(rng, 40);
    EmbeddingVector a, b;
    for (std::size_t i = 0; i < d; ++i) {
      a.values.push_back(standard_normal(rng));
      b.values.push_back(standard_normal(rng));
    }
    double oracle = 0.0;
    for (std::size_t i = 0; i < d; ++i) oracle += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
    oracle /= static_cast<double>(d);
    ASSERT_NEAR(semantic_loss(a, b), oracle, 1e-12);
    ASSERT_EQ(semantic_loss(a, b), semantic_loss(b, a));
    std::vector<std::size_t> perm(d);
    for (std::size_t i = 0; i < d; ++i) perm[i] = i;
    shuffle(perm, rng);
    EmbeddingVector pa, pb;
    for (auto p : perm) {
      pa.values.push_back(a.values[p]);
      pb.values.push_back(b.values[p]);
    }
    ASSERT_NEAR(semantic_loss(pa, pb), oracle, 1e-12);
  }
}

TEST(SemanticLoss, DimensionMismatch) {
  try {
    semantic_loss({{1.0, 2.0}}, {{1.0}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
}

TEST(SemanticLoss, CosineOption) {
  EXPECT_NEAR(semantic_loss({{1.0, 0.0}}, {{3.0, 0.0}}, DistanceKind::kCosine), 0.0, 1e-15);
  EXPECT_NEAR(semantic_loss({{1.0, 0.0}}, {{0.0, 2.0}}, DistanceKind::kCosine), 1.0, 1e-15);
}

class ToyCompressor : public ::testing::Test {
 protected:
  testing::ToyWorld world = toy_world();
  CompressionSetup setup = toy_setup(world);
  ModelParams params = testing::spiky_params(toy_config(static_cast<int>(world.vocab.units().size()), 8, 2, 64), 3.0);
  TokenSequence k = tokenize("a b c d e f g h a b", world.vocab);
};

TEST_F(ToyCompressor, ReplicateEmbedIsDeterministicWithModelWidth) {
  const auto e1 = replicate_embed(params, world.vocab, setup, k);
  const auto e2 = replicate_embed(params, world.vocab, setup, k);
  EXPECT_EQ(e1, e2);
  EXPECT_EQ(e1.size(), 8U);
}

TEST_F(ToyCompressor, ReplicateEmbedMatchesStandalonePoolOracle) {
  // copy <sep> K ; mean of final hidden rows over K's positions
  TokenSequence seq = tokenize("copy", world.vocab);
  seq.push_back(world.vocab.sep_id());
  const std::size_t begin = seq.size();
  seq.insert(seq.end(), k.begin(), k.end());
  const auto pass = forward(params, seq);
  std::vector<double> oracle(8, 0.0);
  for (std::size_t t = begin; t < seq.size(); ++t) {
    for (std::size_t i = 0; i < 8; ++i) oracle[i] += pass.hidden(t, i) / static_cast<double>(k.size());
  }
  const auto e = replicate_embed(params, world.vocab, setup, k);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(e.values[i], oracle[i], 1e-12);
}

TEST_F(ToyCompressor, ReplicateEmbedRejectsOverflowAndEmpty) {
  const TokenSequence long_k(80, k[0]);
  try {
    replicate_embed(params, world.vocab, setup, long_k);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kContextOverflow);
  }
  EXPECT_THROW(replicate_embed(params, world.vocab, setup, TokenSequence{}), Error);
}

TEST_F(ToyCompressor, GenerationStopsAtHeadroom) {
  for (std::size_t budget = 1; budget <= 6; ++budget) {
    const auto g = summarize_generate(params, world.vocab, setup, k, budget, Decoding::sampled(budget));
    EXPECT_LE(g.capsule.size(), setup.max_new_tokens(budget));
    EXPECT_EQ(g.e_c.size(), 8U);
    EXPECT_EQ(g.empty, g.capsule.empty());
  }
}

TEST_F(ToyCompressor, GreedyGenerationIsRepeatable) {
  const auto a = summarize_generate(params, world.vocab, setup, k, 4, Decoding::greedy());
  const auto b = summarize_generate(params, world.vocab, setup, k, 4, Decoding::greedy());
  EXPECT_EQ(a.capsule, b.capsule);
  EXPECT_EQ(a.e_c, b.e_c);
}

TEST_F(ToyCompressor, ContextOverflowIncludesHeadroom) {
  const TokenSequence long_k(55, k[0]);  // 3 + 55 + 2 fits, plus headroom does not
  try {
    summarize_generate(params, world.vocab, setup, long_k, 6, Decoding::greedy());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kContextOverflow);
  }
}

TEST_F(ToyCompressor, ImmediateEosIsFlaggedNotFatal) {
  auto p = params;
  const auto layout = p.layout();
  // Head bias strongly favours eos.
  p.values[layout.head_b + static_cast<std::size_t>(world.vocab.eos_id())] = 1e3;
  const auto g = summarize_generate(p, world.vocab, setup, k, 4, Decoding::greedy());
  EXPECT_TRUE(g.empty);
  EXPECT_TRUE(g.capsule.empty());
  EXPECT_EQ(g.e_c.size(), 8U);
  const auto r = compress(p, world.vocab, setup, k, 4, Decoding::greedy());
  EXPECT_TRUE(r.empty);
  EXPECT_GE(r.semantic_loss, 0.0);
}

TEST(CompressionOverfit, LearnsOneLongToShortMapping) {
  const auto world = toy_world();
  const auto setup = toy_setup(world);
  auto params = ModelParams::initialize(toy_config(static_cast<int>(world.vocab.units().size()), 16, 2, 64, 3));
  const auto k = tokenize("a b c d e f g h a b c d", world.vocab);
  const auto target = tokenize("x y z", world.vocab);
  auto seq = summarize_prompt(world.vocab, setup.instructions, k, 3);
  seq.insert(seq.end(), target.begin(), target.end());
  seq.push_back(world.vocab.eos_id());
  testing::overfit(params, {seq}, 300, 1e-2);
  const auto g = summarize_generate(params, world.vocab, setup, k, 3, Decoding::greedy());
  EXPECT_EQ(g.capsule, target);
}

TEST(SemanticGradient, MatchesFiniteDifferencesThroughCapsuleEmbedding) {
  const auto world = toy_world();
  for (auto mode : {CapsuleEmbedding::kCapsulePositions, CapsuleEmbedding::kGeneratingPositions}) {
    auto setup = toy_setup(world);
    setup.capsule_embedding = mode;
    auto params = testing::spiky_params(toy_config(static_cast<int>(world.vocab.units().size())), 5.0);
    const auto k = tokenize("a b c d e f", world.vocab);
    const auto capsule = tokenize("x y ?", world.vocab);
    const auto e_k = replicate_embed(params, world.vocab, setup, k);  // held fixed
    Gradients g(params);
    semantic_loss_backward(params, world.vocab, setup, k, 3, capsule, e_k, 1.0, g);
    const auto stats = testing::finite_difference_check(params, g, [&](const ModelParams& p) {
      return semantic_loss(e_k, capsule_embedding(p, world.vocab, setup, k, 3, capsule));
    });
    EXPECT_EQ(stats.within_1e2, stats.checked);
    EXPECT_GE(static_cast<double>(stats.within_1e3), 0.95 * static_cast<double>(stats.checked));
    EXPECT_GT(g.global_norm(), 1e-6);
  }
}

TEST(SemanticGradient, TargetEmbeddingCarriesNoGradient) {
  // The analytic gradient is the same whichever constant e_K it is handed
  // relative to; it never differentiates through replicate_embed.
  const auto world = toy_world();
  const auto setup = toy_setup(world);
  auto params = testing::spiky_params(toy_config(static_cast<int>(world.vocab.units().size())), 5.0);
  const auto k = tokenize("a b c d e f", world.vocab);
  const auto capsule = tokenize("x y", world.vocab);
  const auto e_k = replicate_embed(params, world.vocab, setup, k);
  Gradients g(params);
  semantic_loss_backward(params, world.vocab, setup, k, 2, capsule, e_k, 1.0, g);
  // Oracle: finite differences with e_K frozen agree; with e_K recomputed
  // from the perturbed weights they generally do not.
  const auto frozen_target = testing::finite_difference_check(params, g, [&](const ModelParams& p) {
    return semantic_loss(e_k, capsule_embedding(p, world.vocab, setup, k, 2, capsule));
  });
  const auto moving_target = testing::finite_difference_check(params, g, [&](const ModelParams& p) {
    return semantic_loss(replicate_embed(p, world.vocab, setup, k), capsule_embedding(p, world.vocab, setup, k, 2, capsule));
  });
  EXPECT_EQ(frozen_target.within_1e2, frozen_target.checked);
  EXPECT_LT(moving_target.within_1e2, moving_target.checked);
}

}  // namespace
}  // namespace nanocap
