#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nanocap/checkpoint.hpp"
#include "nanocap/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/toy.hpp"

namespace nanocap {
namespace {

using testing::toy_config;
using testing::toy_setup;
using testing::toy_world;

RewardScore reward_of(double v) {
  RewardScore r;
  r.raw = r.value = v;
  return r;
}

TEST(NanoLoss, Examples) {
  EXPECT_DOUBLE_EQ(nano_loss(0.5, reward_of(2.0)), 1.0);
  RewardConfig cfg;
  RewardScore floor;
  floor.raw = 0.0;
  floor.value = cfg.clamp(0.0);
  EXPECT_DOUBLE_EQ(nano_loss(0.5, floor), 0.005);
  EXPECT_GT(nano_loss(0.5, floor), 0.0);
  EXPECT_THROW(nano_loss(-1.0, reward_of(1.0)), Error);
}

TEST(NanoLoss, NonNegativeAndZeroOnlyForZeroSemantic) {
  RewardConfig cfg;
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double sem = uniform_index(rng, 4) == 0 ? 0.0 : std::abs(standard_normal(rng));
    RewardScore r;
    r.raw = std::abs(standard_normal(rng)) * 20.0;
    r.value = cfg.clamp(r.raw);
    const double l = nano_loss(sem, r);
    ASSERT_GE(l, 0.0);
    ASSERT_EQ(l == 0.0, sem == 0.0);
  }
}

TEST(NanoLoss, ClampingPreservesOrderInsideRange) {
  RewardConfig cfg;
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const double sem = 0.1 + std::abs(standard_normal(rng));
    auto inside = [&] { return cfg.r_min + (cfg.r_max - cfg.r_min) * static_cast<double>(uniform_index(rng, 1000000)) / 1e6; };
    const double a = inside(), b = inside();
    ASSERT_EQ(nano_loss(sem, reward_of(a)) < nano_loss(sem, reward_of(b)),
              nano_loss(sem, reward_of(cfg.clamp(a))) < nano_loss(sem, reward_of(cfg.clamp(b))));
  }
}

TEST(Clipping, TenToPointEight) {
  const auto world = toy_world();
  const auto params = ModelParams::initialize(toy_config(static_cast<int>(world.vocab.units().size())));
  Gradients g(params);
  g.values[0] = 6.0;
  g.values[1] = 8.0;
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 0.8), 10.0);
  EXPECT_NEAR(g.global_norm(), 0.8, 1e-12);
}

TEST(Clipping, PostClipNormNeverExceedsLimit) {
  const auto world = toy_world();
  const auto params = ModelParams::initialize(toy_config(static_cast<int>(world.vocab.units().size())));
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    Gradients g(params);
    const double scale = std::pow(10.0, static_cast<double>(uniform_index(rng, 8)) - 4.0);
    for (auto& x : g.values) x = standard_normal(rng) * scale;
    const double clip = 0.05 + static_cast<double>(uniform_index(rng, 100)) / 10.0;
    const double before = g.global_norm();
    clip_global_norm(g, clip);
    ASSERT_LE(g.global_norm(), clip * (1.0 + 1e-12));
    if (before <= clip) {
      ASSERT_EQ(g.global_norm(), before);
    }
  }
}

TEST(Adam, ZeroLearningRateIsBitExactNoOp) {
  const auto world = toy_world();
  auto params = ModelParams::initialize(toy_config(static_cast<int>(world.vocab.units().size())));
  const auto before = params.values;
  Adam adam({.learning_rate = 0.0});
  Gradients g(params);
  Rng rng(1);
  for (int s = 0; s < 5; ++s) {
    for (auto& x : g.values) x = standard_normal(rng);
    adam.step(params, g);
  }
  EXPECT_EQ(params.values, before);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_DOUBLE_EQ(TrainConfig::large_preset().learning_rate, 5e-6);
  EXPECT_DOUBLE_EQ(TrainConfig::large_preset().grad_clip_norm, 0.8);
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.patience = 0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.grad_clip_norm = -1.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(NanoGradient, IsRewardTimesSemanticGradient) {
  const auto world = toy_world();
  const auto setup = toy_setup(world);
  auto params = testing::spiky_params(toy_config(static_cast<int>(world.vocab.units().size())), 5.0);
  const auto k = tokenize("a b c d e f", world.vocab);
  const auto capsule = tokenize("x y ?", world.vocab);
  const auto e_k = replicate_embed(params, world.vocab, setup, k);
  const RewardScore r = reward_of(0.37);
  Gradients nano(params), sem(params);
  semantic_loss_backward(params, world.vocab, setup, k, 3, capsule, e_k, r.value, nano);
  semantic_loss_backward(params, world.vocab, setup, k, 3, capsule, e_k, 1.0, sem);
  for (std::size_t i = 0; i < nano.values.size(); ++i) ASSERT_NEAR(nano.values[i], r.value * sem.values[i], 1e-15);
  const auto stats = testing::finite_difference_check(params, nano, [&](const ModelParams& p) {
    return nano_loss(semantic_loss(e_k, capsule_embedding(p, world.vocab, setup, k, 3, capsule)), r);
  });
  EXPECT_EQ(stats.within_1e2, stats.checked);
  EXPECT_GE(static_cast<double>(stats.within_1e3), 0.95 * static_cast<double>(stats.checked));
}

class ToyTraining : public ::testing::Test {
 protected:
  testing::ToyWorld world = toy_world();
  CompressionSetup setup = toy_setup(world);
  int vocab_size = static_cast<int>(world.vocab.units().size());
  ModelParams scorer = [this] {
    auto p = testing::spiky_params(toy_config(vocab_size, 8, 2, 64, 5), 3.0);
    p.frozen = true;
    return p;
  }();
  TrainConfig cfg = [] {
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.budget = {3};
    c.reward.sample_size = 2;
    c.seed = 3;
    c.eval_every = 5;
    c.validation_items = 3;
    return c;
  }();
  DatasetSplits data = [] {
    DatasetSplits d;
    d.train = {{"t0", "a b c d e f g h", "x ?", "a"},
               {"t1", "h g f e d c b a", "y ?", "b"},
               {"t2", "a c e g b d f h", "z ?", "c"}};
    d.validation = {{"v0", "b d f h a c e g", "x ?", "d"}, {"v1", "a b c d", "y ?", "e"}};
    return d;
  }();
};

TEST_F(ToyTraining, SinglePairConvergence) {
  auto compressor = ModelParams::initialize(toy_config(vocab_size, 8, 2, 64, 9));
  const std::vector<QATriple> pool{data.train[0]};
  cfg.reward.sample_size = 1;
  NanoTrainer trainer(compressor, scorer, world.vocab, setup, cfg, pool);
  const std::vector<const QATriple*> batch{&pool[0]};
  std::vector<double> curve;
  for (std::size_t s = 1; s <= 200; ++s) curve.push_back(trainer.step(s, batch).nano_loss);
  std::ostringstream trace;
  for (std::size_t s = 0; s < curve.size(); s += 20) trace << " " << curve[s];
  EXPECT_LE(curve.back(), 0.5 * curve.front()) << "curve:" << trace.str();
}

TEST_F(ToyTraining, PatienceOneStopsAtSecondEvaluation) {
  // A vanishing learning rate leaves the weights numerically fixed, so the
  // validation loss never strictly improves after the first evaluation.
  auto compressor = ModelParams::initialize(toy_config(vocab_size, 8, 2, 64, 9));
  cfg.learning_rate = 1e-300;
  cfg.patience = 1;
  cfg.max_steps = 50;
  const auto r = train_loop(compressor, scorer, world.vocab, setup, data, cfg);
  EXPECT_EQ(r.stop_reason, "patience");
  EXPECT_EQ(r.state.step, cfg.eval_every);
  EXPECT_EQ(r.state.best_step, 1U);
  std::size_t evals = 0;
  for (const auto& m : r.log) evals += m.val_loss.has_value();
  EXPECT_EQ(evals, 2U);
}

TEST_F(ToyTraining, LogHasOneRecordPerStep) {
  auto compressor = ModelParams::initialize(toy_config(vocab_size, 8, 2, 64, 9));
  cfg.max_steps = 12;
  cfg.patience = 100;
  std::size_t observed = 0;
  const auto r = train_loop(compressor, scorer, world.vocab, setup, data, cfg, [&](const StepMetrics&) { ++observed; });
  ASSERT_EQ(r.log.size(), 12U);
  EXPECT_EQ(observed, 12U);
  for (std::size_t i = 0; i < r.log.size(); ++i) EXPECT_EQ(r.log[i].step, i + 1);
  // evaluated after step 1, every 5 steps and at the last one
  for (std::size_t s : {1U, 5U, 10U, 12U}) EXPECT_TRUE(r.log[s - 1].val_loss.has_value()) << s;
  EXPECT_FALSE(r.log[1].val_loss.has_value());
  std::ostringstream os;
  write_log(r.log, os);
  std::istringstream is(os.str());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "semantic_loss", "reward", "nano_loss", "capsule_length"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    ++lines;
  }
  EXPECT_EQ(lines, 12U);
}

TEST_F(ToyTraining, SeededRunsGiveIdenticalCheckpoints) {
  cfg.max_steps = 15;
  cfg.patience = 100;
  const auto dir = std::filesystem::temp_directory_path();
  std::vector<std::string> bytes;
  std::vector<std::string> logs;
  for (int run = 0; run < 2; ++run) {
    auto compressor = ModelParams::initialize(toy_config(vocab_size, 8, 2, 64, 9));
    const auto r = train_loop(compressor, scorer, world.vocab, setup, data, cfg);
    const auto path = dir / ("nanocap_seeded_" + std::to_string(run) + ".ckpt");
    save_checkpoint(r.best, world.vocab, path);
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    bytes.push_back(ss.str());
    std::ostringstream log;
    write_log(r.log, log);
    logs.push_back(log.str());
    std::filesystem::remove(path);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
  EXPECT_EQ(logs[0], logs[1]);
}

TEST_F(ToyTraining, ScorerUntouchedByTraining) {
  auto compressor = ModelParams::initialize(toy_config(vocab_size, 8, 2, 64, 9));
  const auto before = scorer.values;
  cfg.max_steps = 10;
  cfg.patience = 100;
  const auto start = compressor.values;
  train_loop(compressor, scorer, world.vocab, setup, data, cfg);
  EXPECT_EQ(scorer.values, before);
  EXPECT_NE(compressor.values, start);
}

TEST_F(ToyTraining, RequiresFrozenScorerAndData) {
  auto compressor = ModelParams::initialize(toy_config(vocab_size, 8, 2, 64, 9));
  auto thawed = scorer;
  thawed.frozen = false;
  EXPECT_THROW(train_loop(compressor, thawed, world.vocab, setup, data, cfg), Error);
  DatasetSplits empty;
  try {
    train_loop(compressor, scorer, world.vocab, setup, empty, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyDataset);
  }
}

TEST_F(ToyTraining, NonFiniteStepIsSkippedNotFatal) {
  auto compressor = ModelParams::initialize(toy_config(vocab_size, 8, 2, 64, 9));
  cfg.reward.metric = RewardMetric::kExternalStub;
  cfg.reward.external = [](std::span<const TokenId>, std::span<const TokenId>, const QuestionItem&) {
    return std::numeric_limits<double>::quiet_NaN();
  };
  const auto start = compressor.values;
  NanoTrainer trainer(compressor, scorer, world.vocab, setup, cfg, data.train);
  const auto m = trainer.step(1, {&data.train[0]});
  EXPECT_TRUE(m.skipped);
  EXPECT_EQ(compressor.values, start);
}

TEST_F(ToyTraining, ConstantRewardAblation) {
  auto compressor = ModelParams::initialize(toy_config(vocab_size, 8, 2, 64, 9));
  cfg.use_reward = false;
  cfg.constant_reward = 1.0;
  NanoTrainer trainer(compressor, scorer, world.vocab, setup, cfg, data.train);
  const auto m = trainer.step(1, {&data.train[0]});
  EXPECT_EQ(m.reward, 1.0);
  EXPECT_DOUBLE_EQ(m.nano_loss, m.semantic_loss);
}

}  // namespace
}  // namespace nanocap
