#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nanocap/compression.hpp"
#include "nanocap/datasets.hpp"
#include "nanocap/error.hpp"
#include "nanocap/format.hpp"
#include "nanocap/model.hpp"
#include "nanocap/optim.hpp"
#include "nanocap/reward.hpp"

namespace nanocap {

/// L_Nano = L_Comp * R_cap, with R_cap already clamped and detached.
inline double nano_loss(double semantic, const RewardScore& reward) {
  if (!(semantic >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "semantic loss must be >= 0");
  return semantic * reward.value;
}

struct TrainConfig {
  double learning_rate = 3e-4;
  double grad_clip_norm = 1.0;
  std::size_t max_steps = 300;
  std::size_t patience = 3;
  LengthBudget budget{32};
  RewardConfig reward;
  std::uint64_t seed = 0;
  std::size_t eval_every = 25;
  std::size_t grad_accumulation = 1;
  std::size_t validation_items = 16;
  // Decoding temperature for capsules generated during training steps.
  double temperature = 1.0;
  // Ablation switch: false replaces R_cap by constant_reward.
  bool use_reward = true;
  double constant_reward = 1.0;

  /// Values used for full-scale runs with 7B models.
  static TrainConfig large_preset() {
    TrainConfig c;
    c.learning_rate = 5e-6;
    c.grad_clip_norm = 0.8;
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::kConfigInvalid, "train.learning_rate must be > 0");
    if (!(grad_clip_norm > 0.0)) throw Error(ErrorCode::kConfigInvalid, "train.grad_clip_norm must be > 0");
    if (patience < 1) throw Error(ErrorCode::kConfigInvalid, "train.patience must be >= 1");
    if (eval_every < 1) throw Error(ErrorCode::kConfigInvalid, "train.eval_every must be >= 1");
    if (grad_accumulation < 1) throw Error(ErrorCode::kConfigInvalid, "train.grad_accumulation must be >= 1");
    if (validation_items < 1) throw Error(ErrorCode::kConfigInvalid, "train.validation_items must be >= 1");
    if (!(temperature > 0.0)) throw Error(ErrorCode::kConfigInvalid, "train.temperature must be > 0");
    if (!(constant_reward > 0.0)) throw Error(ErrorCode::kConfigInvalid, "train.constant_reward must be > 0");
    budget.validate();
    reward.validate();
  }
};

struct StepMetrics {
  std::size_t step = 0;
  double semantic_loss = 0.0;
  double reward = 0.0;
  double nano_loss = 0.0;
  std::size_t capsule_length = 0;
  double grad_norm = 0.0;
  bool skipped = false;
  std::optional<double> val_loss;
};

inline nlohmann::ordered_json to_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["semantic_loss"] = m.semantic_loss;
  j["reward"] = m.reward;
  j["nano_loss"] = m.nano_loss;
  j["capsule_length"] = m.capsule_length;
  if (m.val_loss) j["val_loss"] = *m.val_loss;
  j["grad_norm"] = m.grad_norm;
  if (m.skipped) j["skipped"] = true;
  return j;
}

inline void write_log(const std::vector<StepMetrics>& log, std::ostream& os) {
  for (const auto& m : log) os << to_json(m).dump() << '\n';
}

struct TrainState {
  std::size_t step = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t steps_since_improvement = 0;  // counted in evaluations
};

/// One compressor, one frozen scorer, Adam with global-norm clipping.
class NanoTrainer {
 public:
  NanoTrainer(ModelParams& compressor, const ModelParams& scorer, const Vocabulary& vocab, CompressionSetup setup,
              TrainConfig cfg, const std::vector<QATriple>& question_pool)
      : compressor_(compressor),
        scorer_(scorer),
        vocab_(vocab),
        setup_(std::move(setup)),
        cfg_(std::move(cfg)),
        pool_(question_pool),
        adam_({.learning_rate = cfg_.learning_rate}) {
    cfg_.validate();
    if (!scorer_.frozen) throw Error(ErrorCode::kInvalidArgument, "scorer must be frozen");
    if (compressor_.frozen) throw Error(ErrorCode::kFrozenParams, "compressor is frozen");
    cfg_.reward.budget = cfg_.budget;
  }

  const TrainConfig& config() const { return cfg_; }

  /// generate C -> sample Q -> reward -> minimise L_Nano, over one or more
  /// triples accumulated into a single update.
  StepMetrics step(std::size_t step_index, const std::vector<const QATriple*>& batch) {
    if (batch.empty()) throw Error(ErrorCode::kEmptyDataset, "train step needs at least one triple");
    StepMetrics m;
    m.step = step_index;
    Gradients grads(compressor_);
    const double inv = 1.0 / static_cast<double>(batch.size());
    std::size_t capsule_tokens = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto k = tokenize(batch[b]->prompt, vocab_);
      const auto decoding =
          Decoding::sampled(derive_seed(cfg_.seed, "capsule", step_index * 1000003ULL + b), cfg_.temperature);
      const auto capsule = generate(compressor_, summarize_prompt(vocab_, setup_.instructions, k, cfg_.budget.max_tokens),
                                    setup_.max_new_tokens(cfg_.budget.max_tokens), decoding, vocab_.eos_id());
      const RewardScore reward = score(k, capsule, derive_seed(cfg_.seed, "questions", step_index * 1000003ULL + b));
      const auto e_k = replicate_embed(compressor_, vocab_, setup_, k);
      const double sem = semantic_loss_backward(compressor_, vocab_, setup_, k, cfg_.budget.max_tokens, capsule, e_k,
                                                reward.value * inv, grads);
      m.semantic_loss += sem * inv;
      m.reward += reward.value * inv;
      m.nano_loss += (std::isfinite(sem) ? nano_loss(sem, reward) : sem) * inv;
      capsule_tokens += std::min(capsule.size(), cfg_.budget.max_tokens);
    }
    m.capsule_length = (capsule_tokens + batch.size() / 2) / batch.size();
    if (!std::isfinite(m.nano_loss) || !grads.all_finite()) {
      m.skipped = true;
      m.grad_norm = grads.global_norm();
      return m;
    }
    m.grad_norm = clip_global_norm(grads, cfg_.grad_clip_norm);
    adam_.step(compressor_, grads);
    return m;
  }

  /// Mean nano_loss over the first validation_items triples with greedy
  /// capsules and per-item question samples fixed by the seed.
  double validation_loss(const std::vector<QATriple>& validation) const {
    if (validation.empty()) throw Error(ErrorCode::kEmptyDataset, "validation split is empty");
    const std::size_t n = std::min(cfg_.validation_items, validation.size());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = tokenize(validation[i].prompt, vocab_);
      const auto gen = summarize_generate(compressor_, vocab_, setup_, k, cfg_.budget.max_tokens, Decoding::greedy());
      const auto reward = score(k, gen.capsule, derive_seed(cfg_.seed, "val-questions", i));
      const auto e_k = replicate_embed(compressor_, vocab_, setup_, k);
      total += nano_loss(semantic_loss(e_k, gen.e_c, setup_.distance), reward);
    }
    return total / static_cast<double>(n);
  }

 private:
  RewardScore score(std::span<const TokenId> k, std::span<const TokenId> capsule, std::uint64_t seed) const {
    if (!cfg_.use_reward) {
      RewardScore r;
      r.raw = r.value = cfg_.constant_reward;
      return r;
    }
    const auto q = sample_questions(pool_, std::min(cfg_.reward.sample_size, pool_.size()), seed, vocab_);
    return reward_score(scorer_, vocab_, k, capsule, q, cfg_.reward);
  }

  ModelParams& compressor_;
  const ModelParams& scorer_;
  const Vocabulary& vocab_;
  CompressionSetup setup_;
  TrainConfig cfg_;
  const std::vector<QATriple>& pool_;
  Adam adam_;
};

struct TrainResult {
  ModelParams best;
  std::vector<StepMetrics> log;
  TrainState state;
  std::string stop_reason;
};

using StepObserver = std::function<void(const StepMetrics&)>;

/// Early stopping on validation nano_loss: evaluated after step 1, every
/// eval_every steps and at the last step; stops after `patience`
/// evaluations without improvement or at max_steps.
inline TrainResult train_loop(ModelParams& compressor, const ModelParams& scorer, const Vocabulary& vocab,
                              const CompressionSetup& setup, const DatasetSplits& data, const TrainConfig& cfg,
                              const StepObserver& observer = {}) {
  if (data.train.empty()) throw Error(ErrorCode::kEmptyDataset, "training split is empty");
  if (data.validation.empty()) throw Error(ErrorCode::kEmptyDataset, "validation split is empty");
  NanoTrainer trainer(compressor, scorer, vocab, setup, cfg, data.train);
  TrainResult result;
  result.best = compressor;
  result.stop_reason = "max_steps";

  std::vector<std::size_t> order;
  std::size_t cursor = 0, epoch = 0;
  auto next_triple = [&]() -> const QATriple* {
    if (cursor == order.size()) {
      order.resize(data.train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(cfg.seed, "epoch", epoch++));
      shuffle(order, rng);
      cursor = 0;
    }
    return &data.train[order[cursor++]];
  };

  auto& st = result.state;
  for (std::size_t s = 1; s <= cfg.max_steps; ++s) {
    std::vector<const QATriple*> batch;
    for (std::size_t a = 0; a < cfg.grad_accumulation; ++a) batch.push_back(next_triple());
    StepMetrics m = trainer.step(s, batch);
    st.step = s;
    if (s == 1 || s % cfg.eval_every == 0 || s == cfg.max_steps) {
      const double val = trainer.validation_loss(data.validation);
      m.val_loss = val;
      if (val < st.best_val_loss) {
        st.best_val_loss = val;
        st.best_step = s;
        st.steps_since_improvement = 0;
        result.best = compressor;
      } else {
        ++st.steps_since_improvement;
      }
    }
    result.log.push_back(m);
    if (observer) observer(m);
    if (st.steps_since_improvement >= cfg.patience) {
      result.stop_reason = "patience";
      break;
    }
  }
  return result;
}

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1) throw Error(ErrorCode::kConfigInvalid, "pretrain.steps must be >= 1");
    if (batch_size < 1) throw Error(ErrorCode::kConfigInvalid, "pretrain.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::kConfigInvalid, "pretrain.learning_rate must be > 0");
    if (!(grad_clip_norm > 0.0)) throw Error(ErrorCode::kConfigInvalid, "pretrain.grad_clip_norm must be > 0");
  }
};

/// Plain next-token training over a fixed sequence set; returns the mean
/// loss of every step.
inline std::vector<double> pretrain_lm(ModelParams& params, const std::vector<TokenSequence>& sequences,
                                       const PretrainConfig& cfg,
                                       const std::function<void(std::size_t, double)>& observer = {}) {
  cfg.validate();
  if (sequences.empty()) throw Error(ErrorCode::kEmptyDataset, "no pretraining sequences");
  Adam adam({.learning_rate = cfg.learning_rate});
  Gradients grads(params);
  Rng rng(derive_seed(cfg.seed, "pretrain"));
  std::vector<double> curve;
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    grads.zero();
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& seq = sequences[uniform_index(rng, sequences.size())];
      loss += lm_loss_and_grad(params, seq, grads, inv) * inv;
    }
    curve.push_back(loss);
    if (observer) observer(s, loss);
    if (!std::isfinite(loss) || !grads.all_finite()) continue;
    clip_global_norm(grads, cfg.grad_clip_norm);
    adam.step(params, grads);
  }
  return curve;
}

}  // namespace nanocap
