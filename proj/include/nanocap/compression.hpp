#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nanocap/datasets.hpp"
#include "nanocap/error.hpp"
#include "nanocap/model.hpp"
#include "nanocap/vocab.hpp"

namespace nanocap {

/// Replicating and summarizing instructions. t_summ carries exactly one
/// budget placeholder.
struct InstructionSet {
  static constexpr std::string_view kBudgetSlot = "{word count}";

  std::string t_rep;
  std::string t_summ;

  void validate() const {
    if (normalize_whitespace(t_rep).empty() || normalize_whitespace(t_summ).empty()) {
      throw Error(ErrorCode::kConfigInvalid, "instructions must be nonempty");
    }
    const auto first = t_summ.find(kBudgetSlot);
    if (first == std::string::npos || t_summ.find(kBudgetSlot, first + 1) != std::string::npos) {
      throw Error(ErrorCode::kConfigInvalid, "t_summ must contain exactly one " + std::string(kBudgetSlot));
    }
  }

  std::string summarize_text(std::size_t budget) const {
    std::string out = t_summ;
    const auto pos = out.find(kBudgetSlot);
    if (pos != std::string::npos) out.replace(pos, kBudgetSlot.size(), std::to_string(budget));
    return out;
  }

  static InstructionSet few_shot_cot() {
    return {"Repeat the following main input.",
            "Please summarize each question-answer pair in one sentence within less than {word count} words. "
            "Make sure not to repeat the input question-answer pair."};
  }

  static InstructionSet reading() {
    return {"Repeat the following main input.",
            "Please summarize the passage within less than {word count} words. Make sure not to repeat the passage."};
  }

  static InstructionSet for_task(TaskKind kind) { return kind == TaskKind::kCot ? few_shot_cot() : reading(); }
};

/// Reads {"t_rep": ..., "t_summ": ...} JSON, or plain text with one
/// "t_rep: ..." and one "t_summ: ..." line.
inline InstructionSet load_instructions(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  const std::string text = buf.str();
  InstructionSet set;
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (!j.is_discarded() && j.is_object()) {
    if (!j.contains("t_rep") || !j.contains("t_summ")) {
      throw Error(ErrorCode::kConfigInvalid, path.string() + ": instruction file needs t_rep and t_summ");
    }
    set.t_rep = j.at("t_rep").get<std::string>();
    set.t_summ = j.at("t_summ").get<std::string>();
  } else {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.starts_with("t_rep:")) set.t_rep = normalize_whitespace(line.substr(6));
      if (line.starts_with("t_summ:")) set.t_summ = normalize_whitespace(line.substr(7));
    }
  }
  set.validate();
  return set;
}

enum class DistanceKind { kMse, kCosine };

/// Which hidden states become e_C: the capsule tokens' own positions
/// (a second pass over the finished capsule) or the positions that emitted
/// each capsule token during decoding.
enum class CapsuleEmbedding { kCapsulePositions, kGeneratingPositions };

struct CompressionSetup {
  InstructionSet instructions = InstructionSet::few_shot_cot();
  PoolMethod pool = PoolMethod::kMean;
  DistanceKind distance = DistanceKind::kMse;
  CapsuleEmbedding capsule_embedding = CapsuleEmbedding::kCapsulePositions;
  double headroom = 1.5;  // decode limit as a multiple of the budget

  std::size_t max_new_tokens(std::size_t budget) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(headroom * static_cast<double>(budget))));
  }
};

struct CapsuleResult {
  TokenSequence capsule;
  EmbeddingVector e_k;
  EmbeddingVector e_c;
  double semantic_loss = 0.0;
  bool empty = false;
};

/// t_rep <sep> K ; K occupies the returned span.
inline TokenSequence replicate_input(const Vocabulary& vocab, const InstructionSet& instr,
                                     std::span<const TokenId> k, PositionSpan* k_span = nullptr) {
  TokenSequence seq = tokenize(instr.t_rep, vocab);
  seq.push_back(vocab.sep_id());
  if (k_span != nullptr) *k_span = {seq.size(), seq.size() + k.size()};
  seq.insert(seq.end(), k.begin(), k.end());
  return seq;
}

/// t_summ(budget) <sep> K <sep> ; the capsule is decoded after this.
inline TokenSequence summarize_prompt(const Vocabulary& vocab, const InstructionSet& instr,
                                      std::span<const TokenId> k, std::size_t budget) {
  TokenSequence seq = tokenize(instr.summarize_text(budget), vocab);
  seq.push_back(vocab.sep_id());
  seq.insert(seq.end(), k.begin(), k.end());
  seq.push_back(vocab.sep_id());
  return seq;
}

namespace detail {

inline PositionSpan capsule_span(std::size_t prompt_len, std::size_t capsule_len, CapsuleEmbedding mode) {
  // An empty capsule falls back to the state that emitted eos.
  if (capsule_len == 0) return {prompt_len - 1, prompt_len};
  if (mode == CapsuleEmbedding::kGeneratingPositions) return {prompt_len - 1, prompt_len - 1 + capsule_len};
  return {prompt_len, prompt_len + capsule_len};
}

inline void check_context(const ModelParams& params, std::size_t needed) {
  if (needed > static_cast<std::size_t>(params.config.context_window)) {
    throw Error(ErrorCode::kContextOverflow, std::to_string(needed) + " positions needed, context window is " +
                                                 std::to_string(params.config.context_window));
  }
}

}  // namespace detail

inline double semantic_loss(const EmbeddingVector& e_k, const EmbeddingVector& e_c,
                            DistanceKind kind = DistanceKind::kMse) {
  if (e_k.size() != e_c.size() || e_k.size() == 0) {
    throw Error(ErrorCode::kDimensionMismatch, "embedding dimensions differ: " + std::to_string(e_k.size()) +
                                                   " vs " + std::to_string(e_c.size()));
  }
  const std::size_t d = e_k.size();
  if (kind == DistanceKind::kMse) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = e_k.values[i] - e_c.values[i];
      s += diff * diff;
    }
    return s / static_cast<double>(d);
  }
  double dot = 0.0, nk = 0.0, nc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += e_k.values[i] * e_c.values[i];
    nk += e_k.values[i] * e_k.values[i];
    nc += e_c.values[i] * e_c.values[i];
  }
  const double denom = std::sqrt(nk * nc);
  if (denom == 0.0) return 1.0;
  return std::max(0.0, 1.0 - dot / denom);
}

/// d semantic_loss / d e_c with e_k held constant.
inline std::vector<double> semantic_loss_gradient(const EmbeddingVector& e_k, const EmbeddingVector& e_c,
                                                  DistanceKind kind = DistanceKind::kMse) {
  if (e_k.size() != e_c.size()) throw Error(ErrorCode::kDimensionMismatch, "embedding dimensions differ");
  const std::size_t d = e_k.size();
  std::vector<double> g(d, 0.0);
  if (kind == DistanceKind::kMse) {
    for (std::size_t i = 0; i < d; ++i) g[i] = 2.0 * (e_c.values[i] - e_k.values[i]) / static_cast<double>(d);
    return g;
  }
  double dot = 0.0, nk = 0.0, nc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += e_k.values[i] * e_c.values[i];
    nk += e_k.values[i] * e_k.values[i];
    nc += e_c.values[i] * e_c.values[i];
  }
  const double a = std::sqrt(nk), c = std::sqrt(nc);
  if (a == 0.0 || c == 0.0) return g;
  for (std::size_t i = 0; i < d; ++i) {
    g[i] = -(e_k.values[i] / (a * c) - dot * e_c.values[i] / (a * c * c * c));
  }
  return g;
}

/// e_K: pooled final hidden states over K's span under the replicating
/// instruction. A constant target; nothing flows back through it.
inline EmbeddingVector replicate_embed(const ModelParams& compressor, const Vocabulary& vocab,
                                       const CompressionSetup& setup, std::span<const TokenId> k) {
  if (k.empty()) throw Error(ErrorCode::kEmptySpan, "cannot embed an empty prompt");
  PositionSpan span;
  const auto input = replicate_input(vocab, setup.instructions, k, &span);
  detail::check_context(compressor, input.size());
  const auto pass = forward(compressor, input);
  return pool_embedding(pass.hidden, span, setup.pool);
}

struct CapsuleGeneration {
  TokenSequence capsule;
  EmbeddingVector e_c;
  bool empty = false;
};

/// Embeds an already-decoded capsule; used by generation and by the
/// training-time gradient path, which share this forward computation.
inline EmbeddingVector capsule_embedding(const ModelParams& compressor, const Vocabulary& vocab,
                                         const CompressionSetup& setup, std::span<const TokenId> k,
                                         std::size_t budget, std::span<const TokenId> capsule) {
  auto seq = summarize_prompt(vocab, setup.instructions, k, budget);
  const std::size_t prompt_len = seq.size();
  seq.insert(seq.end(), capsule.begin(), capsule.end());
  detail::check_context(compressor, seq.size());
  const auto pass = forward(compressor, seq);
  return pool_embedding(pass.hidden, detail::capsule_span(prompt_len, capsule.size(), setup.capsule_embedding),
                        setup.pool);
}

/// Decodes C under the summarizing instruction and pools e_C from the
/// forward pass over (prompt, C). An immediate eos is reported through
/// `empty`, not as an error.
inline CapsuleGeneration summarize_generate(const ModelParams& compressor, const Vocabulary& vocab,
                                            const CompressionSetup& setup, std::span<const TokenId> k,
                                            std::size_t budget, const Decoding& decoding) {
  const auto prompt = summarize_prompt(vocab, setup.instructions, k, budget);
  const std::size_t max_new = setup.max_new_tokens(budget);
  detail::check_context(compressor, prompt.size() + max_new);
  CapsuleGeneration out;
  out.capsule = generate(compressor, prompt, max_new, decoding, vocab.eos_id());
  out.empty = out.capsule.empty();
  out.e_c = capsule_embedding(compressor, vocab, setup, k, budget, out.capsule);
  return out;
}

/// Semantic loss for a fixed capsule and target e_K; accumulates
/// scale * d loss / d params into grads through e_C only.
inline double semantic_loss_backward(const ModelParams& compressor, const Vocabulary& vocab,
                                     const CompressionSetup& setup, std::span<const TokenId> k, std::size_t budget,
                                     std::span<const TokenId> capsule, const EmbeddingVector& e_k, double scale,
                                     Gradients& grads) {
  auto seq = summarize_prompt(vocab, setup.instructions, k, budget);
  const std::size_t prompt_len = seq.size();
  seq.insert(seq.end(), capsule.begin(), capsule.end());
  detail::check_context(compressor, seq.size());
  const auto pass = forward(compressor, seq);
  const auto span = detail::capsule_span(prompt_len, capsule.size(), setup.capsule_embedding);
  const auto e_c = pool_embedding(pass.hidden, span, setup.pool);
  const double loss = semantic_loss(e_k, e_c, setup.distance);
  auto d_ec = semantic_loss_gradient(e_k, e_c, setup.distance);
  for (double& v : d_ec) v *= scale;
  Matrix d_hidden(pass.hidden.rows, pass.hidden.cols);
  pool_embedding_backward(d_ec, span, setup.pool, d_hidden);
  backward(compressor, pass, {}, d_hidden.data, grads);
  return loss;
}

inline CapsuleResult compress(const ModelParams& compressor, const Vocabulary& vocab, const CompressionSetup& setup,
                              std::span<const TokenId> k, std::size_t budget, const Decoding& decoding) {
  CapsuleResult r;
  auto gen = summarize_generate(compressor, vocab, setup, k, budget, decoding);
  r.capsule = std::move(gen.capsule);
  r.e_c = std::move(gen.e_c);
  r.empty = gen.empty;
  r.e_k = replicate_embed(compressor, vocab, setup, k);
  r.semantic_loss = semantic_loss(r.e_k, r.e_c, setup.distance);
  return r;
}

}  // namespace nanocap
