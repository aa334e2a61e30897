#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nanocap/error.hpp"

namespace nanocap {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

/// Marks a unit that begins a new whitespace-delimited word.
inline constexpr std::string_view kWordStart = "\xe2\x96\x81";

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kSepToken = "<sep>";

namespace detail {

inline bool is_word_char(unsigned char c) { return std::isalnum(c) != 0 || c == '_' || c >= 0x80; }

// Splits one whitespace-free word into alphanumeric runs and single
// punctuation characters.
inline std::vector<std::string> split_pieces(std::string_view word) {
  std::vector<std::string> pieces;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    if (is_word_char(c)) {
      std::size_t j = i;
      while (j < word.size() && is_word_char(static_cast<unsigned char>(word[j]))) ++j;
      pieces.emplace_back(word.substr(i, j - i));
      i = j;
    } else {
      pieces.emplace_back(1, word[i]);
      ++i;
    }
  }
  return pieces;
}

inline std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.push_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

// Word-marked unit strings for a text, before vocabulary lookup.
inline std::vector<std::string> pretokenize(std::string_view text) {
  std::vector<std::string> units;
  for (auto word : split_whitespace(text)) {
    auto pieces = split_pieces(word);
    for (std::size_t p = 0; p < pieces.size(); ++p) {
      units.push_back(p == 0 ? std::string(kWordStart) + pieces[p] : std::move(pieces[p]));
    }
  }
  return units;
}

}  // namespace detail

class Vocabulary {
 public:
  struct BuildOptions {
    std::size_t min_count = 1;
    bool char_fallback = true;
  };

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// Special tokens are inserted first when absent, so ids 0..3 are always
  /// pad, unk, eos, sep.
  explicit Vocabulary(std::vector<std::string> units) {
    const std::string_view specials[] = {kPadToken, kUnkToken, kEosToken, kSepToken};
    for (auto s : specials) add(std::string(s));
    for (auto& u : units) add(std::move(u));
  }

  template <typename Range>
  static Vocabulary build(const Range& corpus, BuildOptions options = {}) {
    std::map<std::string, std::size_t> counts;
    for (const auto& text : corpus) {
      for (auto& unit : detail::pretokenize(text)) ++counts[unit];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> units;
    for (auto& [unit, count] : ranked) {
      if (count >= options.min_count) units.push_back(unit);
    }
    if (options.char_fallback) {
      for (int c = 33; c < 127; ++c) {
        units.push_back(std::string(kWordStart) + static_cast<char>(c));
        units.emplace_back(1, static_cast<char>(c));
      }
    }
    return Vocabulary(std::move(units));
  }

  std::size_t size() const { return units_.size(); }
  bool empty() const { return units_.empty(); }

  TokenId pad_id() const { return 0; }
  TokenId unk_id() const { return 1; }
  TokenId eos_id() const { return 2; }
  TokenId sep_id() const { return 3; }
  bool is_special(TokenId id) const { return id >= 0 && id < 4; }

  std::optional<TokenId> find(std::string_view unit) const {
    auto it = index_.find(std::string(unit));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& unit(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= units_.size()) {
      throw Error(ErrorCode::kInvalidArgument, "token id " + std::to_string(id) + " outside vocabulary");
    }
    return units_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& units() const { return units_; }

  bool operator==(const Vocabulary& other) const { return units_ == other.units_; }

 private:
  void add(std::string unit) {
    if (index_.contains(unit)) return;
    index_.emplace(unit, static_cast<TokenId>(units_.size()));
    units_.push_back(std::move(unit));
  }

  std::vector<std::string> units_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Word-level lookup with per-character fallback. Characters outside the
/// vocabulary alphabet become unk.
inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence ids;
  for (const auto& unit : detail::pretokenize(text)) {
    if (auto id = vocab.find(unit)) {
      ids.push_back(*id);
      continue;
    }
    const bool word_start = unit.starts_with(kWordStart);
    std::string_view body(unit);
    if (word_start) body.remove_prefix(kWordStart.size());
    for (std::size_t i = 0; i < body.size(); ++i) {
      std::string piece = (i == 0 && word_start) ? std::string(kWordStart) : std::string();
      piece.push_back(body[i]);
      ids.push_back(vocab.find(piece).value_or(vocab.unk_id()));
    }
  }
  return ids;
}

/// Special tokens are dropped; unk renders as a standalone "<unk>" word.
inline std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == vocab.unk_id()) {
      if (!out.empty()) out.push_back(' ');
      out += kUnkToken;
      continue;
    }
    if (vocab.is_special(id)) continue;
    std::string_view unit = vocab.unit(id);
    if (unit.starts_with(kWordStart)) {
      unit.remove_prefix(kWordStart.size());
      if (!out.empty()) out.push_back(' ');
    }
    out += unit;
  }
  return out;
}

/// Collapses whitespace runs to single spaces and trims both ends.
inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  for (auto word : detail::split_whitespace(text)) {
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

inline TokenSequence concat(std::initializer_list<std::span<const TokenId>> parts) {
  TokenSequence out;
  for (auto p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace nanocap
