#pragma once

#include <cctype>
#include <span>
#include <string>
#include <string_view>

#include "nanocap/vocab.hpp"

namespace nanocap {

// Scorer-side layout:  prompt <sep> question <sep> answer <eos>
// The answer is whatever the model decodes after the second separator.

inline TokenSequence qa_query(const Vocabulary& vocab, std::span<const TokenId> prompt,
                              std::span<const TokenId> question) {
  TokenSequence seq(prompt.begin(), prompt.end());
  seq.push_back(vocab.sep_id());
  seq.insert(seq.end(), question.begin(), question.end());
  seq.push_back(vocab.sep_id());
  return seq;
}

inline TokenSequence qa_example(const Vocabulary& vocab, std::span<const TokenId> prompt,
                                std::span<const TokenId> question, std::span<const TokenId> answer) {
  auto seq = qa_query(vocab, prompt, question);
  seq.insert(seq.end(), answer.begin(), answer.end());
  seq.push_back(vocab.eos_id());
  return seq;
}

/// Lowercase, punctuation removed, whitespace collapsed.
inline std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c)) {
      cleaned.push_back(' ');
    } else {
      cleaned.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  return normalize_whitespace(cleaned);
}

}  // namespace nanocap
