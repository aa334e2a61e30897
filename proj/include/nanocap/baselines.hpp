#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "nanocap/compression.hpp"
#include "nanocap/datasets.hpp"
#include "nanocap/error.hpp"
#include "nanocap/model.hpp"
#include "nanocap/reward.hpp"
#include "nanocap/rng.hpp"
#include "nanocap/vocab.hpp"

namespace nanocap {

/// Summarize-and-truncate with the base checkpoint, greedy, no training.
inline TokenSequence zero_shot_summarize(const ModelParams& model, const Vocabulary& vocab,
                                         const CompressionSetup& setup, std::span<const TokenId> k,
                                         LengthBudget budget) {
  budget.validate();
  const auto prompt = summarize_prompt(vocab, setup.instructions, k, budget.max_tokens);
  const auto capsule = generate(model, prompt, setup.max_new_tokens(budget.max_tokens), Decoding::greedy(),
                                vocab.eos_id());
  return truncate(capsule, budget);
}

struct PruneUnit {
  PositionSpan span;
  std::string surface;
  double score = 0.0;
};

enum class UnitScore { kSum, kMean };
enum class Granularity { kToken, kWord, kSentence };

struct SelectiveContextOptions {
  UnitScore score = UnitScore::kSum;
  Granularity granularity = Granularity::kWord;
};

struct SelectiveContextResult {
  TokenSequence kept;
  std::vector<PruneUnit> units;
  std::vector<std::size_t> kept_units;  // ascending unit indices
};

/// -log p(k_t | <sep>, k_<t) for every token of k.
inline std::vector<double> self_information(const ModelParams& model, const Vocabulary& vocab,
                                            std::span<const TokenId> k) {
  TokenSequence seq{vocab.sep_id()};
  seq.insert(seq.end(), k.begin(), k.end());
  const auto pass = forward(model, seq);
  std::vector<double> out(k.size());
  for (std::size_t t = 0; t < k.size(); ++t) {
    const auto row = pass.logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    out[t] = -(row[static_cast<std::size_t>(k[t])] - mx - std::log(z));
  }
  return out;
}

/// Groups positions into units: single tokens, words (a unit starts at a
/// word-start marker or special token) or sentences (a unit ends after
/// ".", "?" or "!").
inline std::vector<PositionSpan> prune_units(const Vocabulary& vocab, std::span<const TokenId> k,
                                             Granularity granularity) {
  std::vector<PositionSpan> spans;
  for (std::size_t t = 0; t < k.size(); ++t) {
    bool starts = spans.empty() || granularity == Granularity::kToken;
    if (!starts && granularity == Granularity::kWord) {
      starts = vocab.is_special(k[t]) || vocab.is_special(k[t - 1]) || vocab.unit(k[t]).starts_with(kWordStart);
    }
    if (!starts && granularity == Granularity::kSentence) {
      const auto& prev = vocab.unit(k[t - 1]);
      const std::string_view bare = prev.starts_with(kWordStart) ? std::string_view(prev).substr(kWordStart.size())
                                                                 : std::string_view(prev);
      starts = bare == "." || bare == "?" || bare == "!";
    }
    if (starts) {
      spans.push_back({t, t + 1});
    } else {
      spans.back().end = t + 1;
    }
  }
  return spans;
}

/// Drops the lowest-scoring unit (earliest first on ties) until the kept
/// tokens fit the budget. If one unit remains and still does not fit, it is
/// the highest-scoring unit and gets truncated.
inline SelectiveContextResult selective_context(const ModelParams& model, const Vocabulary& vocab,
                                                std::span<const TokenId> k, LengthBudget budget,
                                                const SelectiveContextOptions& options = {}) {
  budget.validate();
  SelectiveContextResult r;
  if (k.empty()) return r;
  const auto info = self_information(model, vocab, k);
  for (const auto& span : prune_units(vocab, k, options.granularity)) {
    PruneUnit u;
    u.span = span;
    u.surface = detokenize(k.subspan(span.begin, span.size()), vocab);
    for (std::size_t t = span.begin; t < span.end; ++t) u.score += info[t];
    if (options.score == UnitScore::kMean) u.score /= static_cast<double>(span.size());
    r.units.push_back(std::move(u));
  }
  std::vector<std::size_t> by_score(r.units.size());
  std::iota(by_score.begin(), by_score.end(), std::size_t{0});
  std::stable_sort(by_score.begin(), by_score.end(),
                   [&](std::size_t a, std::size_t b) { return r.units[a].score < r.units[b].score; });
  std::vector<bool> keep(r.units.size(), true);
  std::size_t length = k.size();
  std::size_t remaining = r.units.size();
  for (std::size_t i : by_score) {
    if (length <= budget.max_tokens || remaining == 1) break;
    keep[i] = false;
    length -= r.units[i].span.size();
    --remaining;
  }
  for (std::size_t i = 0; i < r.units.size(); ++i) {
    if (!keep[i]) continue;
    r.kept_units.push_back(i);
    for (std::size_t t = r.units[i].span.begin; t < r.units[i].span.end; ++t) r.kept.push_back(k[t]);
  }
  r.kept = truncate(r.kept, budget);
  return r;
}

struct RandomDropResult {
  TokenSequence kept;
  std::vector<std::size_t> kept_blocks;  // ascending
  std::vector<std::size_t> drop_order;
};

/// Removes uniformly chosen whole demonstrations until the prompt fits;
/// a single remaining block that still does not fit is truncated.
inline RandomDropResult random_drop(const Vocabulary& vocab, std::string_view prompt, LengthBudget budget,
                                    std::uint64_t seed) {
  budget.validate();
  const auto blocks = demonstration_blocks(prompt);
  if (blocks.empty()) throw Error(ErrorCode::kUnparseableStructure, "prompt has no demonstration blocks");
  std::vector<TokenSequence> tokens;
  std::size_t length = 0;
  for (const auto& b : blocks) {
    tokens.push_back(tokenize(b, vocab));
    length += tokens.back().size();
  }
  RandomDropResult r;
  std::vector<std::size_t> alive(blocks.size());
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  Rng rng(seed);
  while (length > budget.max_tokens && alive.size() > 1) {
    const std::size_t pick = uniform_index(rng, alive.size());
    const std::size_t block = alive[pick];
    alive.erase(alive.begin() + static_cast<std::ptrdiff_t>(pick));
    length -= tokens[block].size();
    r.drop_order.push_back(block);
  }
  r.kept_blocks = alive;
  for (std::size_t b : alive) r.kept.insert(r.kept.end(), tokens[b].begin(), tokens[b].end());
  r.kept = truncate(r.kept, budget);
  return r;
}

}  // namespace nanocap
