#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "nanocap/datasets.hpp"
#include "nanocap/error.hpp"
#include "nanocap/format.hpp"
#include "nanocap/model.hpp"
#include "nanocap/rng.hpp"
#include "nanocap/vocab.hpp"

namespace nanocap {

struct LengthBudget {
  std::size_t max_tokens = 1;

  void validate() const {
    if (max_tokens < 1) throw Error(ErrorCode::kConfigInvalid, "budget.max_tokens must be >= 1");
  }
};

/// Hard cut to the first min(|c|, B) tokens.
inline TokenSequence truncate(std::span<const TokenId> c, LengthBudget budget) {
  const std::size_t n = std::min(c.size(), budget.max_tokens);
  return TokenSequence(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(n));
}

struct QuestionItem {
  TokenSequence question;
  std::string reference_answer;
};

struct QuestionSample {
  std::vector<QuestionItem> items;
  std::vector<std::size_t> source_indices;
};

/// Uniform draw of n items without replacement (partial Fisher-Yates).
inline QuestionSample sample_questions(const std::vector<QATriple>& split, std::size_t n, std::uint64_t seed,
                                       const Vocabulary& vocab) {
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "question sample size must be >= 1");
  if (split.size() < n) {
    throw Error(ErrorCode::kInsufficientData, "need " + std::to_string(n) + " questions, split has " +
                                                  std::to_string(split.size()));
  }
  std::vector<std::size_t> idx(split.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_index(rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  QuestionSample out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = split[idx[i]];
    out.items.push_back({tokenize(t.question, vocab), t.answer});
    out.source_indices.push_back(idx[i]);
  }
  return out;
}

enum class RewardMetric { kHiddenMse, kExactMatchDelta, kExternalStub };

inline std::string_view to_string(RewardMetric m) {
  switch (m) {
    case RewardMetric::kHiddenMse: return "hidden_mse";
    case RewardMetric::kExactMatchDelta: return "exact_match_delta";
    case RewardMetric::kExternalStub: return "external_stub";
  }
  return "hidden_mse";
}

inline RewardMetric reward_metric_from_string(std::string_view s) {
  if (s == "hidden_mse") return RewardMetric::kHiddenMse;
  if (s == "exact_match_delta") return RewardMetric::kExactMatchDelta;
  if (s == "external_stub") return RewardMetric::kExternalStub;
  throw Error(ErrorCode::kConfigInvalid, "unknown reward metric: " + std::string(s));
}

/// Caller-supplied per-question score for the external_stub metric.
using ExternalScorer =
    std::function<double(std::span<const TokenId> truncated_capsule, std::span<const TokenId> k, const QuestionItem&)>;

struct RewardConfig {
  RewardMetric metric = RewardMetric::kHiddenMse;
  std::size_t sample_size = 4;
  LengthBudget budget;
  double r_min = 0.01;
  double r_max = 10.0;
  std::size_t answer_max_tokens = 16;
  ExternalScorer external;

  void validate() const {
    if (!(r_min > 0.0)) throw Error(ErrorCode::kConfigInvalid, "reward.r_min must be > 0");
    if (!(r_min <= r_max)) throw Error(ErrorCode::kConfigInvalid, "reward.r_min must be <= reward.r_max");
    if (sample_size < 1) throw Error(ErrorCode::kConfigInvalid, "reward.sample_size must be >= 1");
    budget.validate();
  }

  double clamp(double raw) const { return std::clamp(raw, r_min, r_max); }
};

struct RewardScore {
  double value = 0.0;  // clamped
  double raw = 0.0;    // mean of per_question
  std::vector<double> per_question;
};

namespace detail {

inline double pooled_mse(const ModelParams& scorer, std::span<const TokenId> a, std::span<const TokenId> b) {
  const auto pa = forward(scorer, a);
  const auto pb = forward(scorer, b);
  const auto ea = pool_embedding(pa.hidden, {0, a.size()}, PoolMethod::kMean);
  const auto eb = pool_embedding(pb.hidden, {0, b.size()}, PoolMethod::kMean);
  double s = 0.0;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    const double d = ea.values[i] - eb.values[i];
    s += d * d;
  }
  return s / static_cast<double>(ea.size());
}

inline std::string greedy_answer(const ModelParams& scorer, const Vocabulary& vocab, std::span<const TokenId> query,
                                 std::size_t max_tokens) {
  return normalize_answer(detokenize(generate(scorer, query, max_tokens, Decoding::greedy(), vocab.eos_id()), vocab));
}

}  // namespace detail

/// Divergence between scorer behaviour on Φ(C) ⊕ Q and K ⊕ Q, averaged over
/// the sample and clamped. Lower means the capsule behaves more like K.
inline RewardScore reward_score(const ModelParams& scorer, const Vocabulary& vocab, std::span<const TokenId> k,
                                std::span<const TokenId> c, const QuestionSample& q, const RewardConfig& cfg) {
  if (!scorer.frozen) throw Error(ErrorCode::kInvalidArgument, "reward scorer must be frozen");
  if (q.items.empty()) throw Error(ErrorCode::kEmptyQuestionSample, "reward needs at least one question");
  const TokenSequence capsule = truncate(c, cfg.budget);
  const auto window = static_cast<std::size_t>(scorer.config.context_window);
  RewardScore out;
  for (const auto& item : q.items) {
    const auto with_capsule = qa_query(vocab, capsule, item.question);
    const auto with_original = qa_query(vocab, k, item.question);
    const std::size_t extra = cfg.metric == RewardMetric::kExactMatchDelta ? cfg.answer_max_tokens : 0;
    if (std::max(with_capsule.size(), with_original.size()) + extra > window) {
      throw Error(ErrorCode::kContextOverflow, "reward query of " + std::to_string(with_original.size()) +
                                                   " tokens does not fit context window " + std::to_string(window));
    }
    double score = 0.0;
    switch (cfg.metric) {
      case RewardMetric::kHiddenMse:
        score = detail::pooled_mse(scorer, with_capsule, with_original);
        break;
      case RewardMetric::kExactMatchDelta:
        score = detail::greedy_answer(scorer, vocab, with_capsule, cfg.answer_max_tokens) ==
                        detail::greedy_answer(scorer, vocab, with_original, cfg.answer_max_tokens)
                    ? 0.0
                    : 1.0;
        break;
      case RewardMetric::kExternalStub:
        if (!cfg.external) throw Error(ErrorCode::kConfigInvalid, "external_stub metric needs a caller-supplied scorer");
        score = cfg.external(capsule, k, item);
        break;
    }
    out.per_question.push_back(score);
  }
  out.raw = std::accumulate(out.per_question.begin(), out.per_question.end(), 0.0) /
            static_cast<double>(out.per_question.size());
  out.value = cfg.clamp(out.raw);
  return out;
}

}  // namespace nanocap
