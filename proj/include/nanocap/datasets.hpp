#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nanocap/error.hpp"
#include "nanocap/rng.hpp"
#include "nanocap/vocab.hpp"

namespace nanocap {

/// One (long prompt, question, reference answer) record.
struct QATriple {
  std::string id;
  std::string prompt;
  std::string question;
  std::string answer;

  bool operator==(const QATriple&) const = default;
};

enum class TaskKind { kCot, kReading };

inline std::string_view to_string(TaskKind kind) { return kind == TaskKind::kCot ? "cot" : "reading"; }

inline TaskKind task_kind_from_string(std::string_view s) {
  if (s == "cot") return TaskKind::kCot;
  if (s == "reading") return TaskKind::kReading;
  throw Error(ErrorCode::kSchemaViolation, "unknown task_kind '" + std::string(s) + "'");
}

struct DatasetManifest {
  std::string name;
  TaskKind task_kind = TaskKind::kCot;
  std::vector<QATriple> records;
  std::uint64_t split_seed = 0;
};

struct Demonstration {
  std::string question;
  std::string rationale;
  std::string answer;
};

struct FewShotSpec {
  std::vector<Demonstration> demonstrations;
  std::size_t k = 0;
};

inline constexpr std::string_view kDemoTemplate = "Q: {question} A: {rationale} The answer is {answer} .";
inline constexpr std::string_view kDemoSeparator = "\n\n";

namespace detail {

inline bool replace_slot(std::string& text, std::string_view slot, std::string_view value) {
  const auto pos = text.find(slot);
  if (pos == std::string::npos) return false;
  text.replace(pos, slot.size(), value);
  return true;
}

inline std::vector<std::string> split_on(std::string_view text, std::string_view sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.emplace_back(text.substr(start));
      break;
    }
    parts.emplace_back(text.substr(start, pos - start));
    start = pos + sep.size();
  }
  return parts;
}

}  // namespace detail

/// Fills the template once per demonstration and joins the blocks, in
/// order, with kDemoSeparator.
inline std::string assemble_fewshot(const FewShotSpec& spec, std::string_view tmpl = kDemoTemplate) {
  if (spec.k < 1 || spec.k != spec.demonstrations.size()) {
    throw Error(ErrorCode::kInvalidArgument, "few-shot k must equal the number of demonstrations and be >= 1");
  }
  for (std::string_view slot : {"{question}", "{rationale}", "{answer}"}) {
    if (tmpl.find(slot) == std::string_view::npos) {
      throw Error(ErrorCode::kMissingSlot, "template lacks " + std::string(slot));
    }
  }
  std::string out;
  for (std::size_t i = 0; i < spec.demonstrations.size(); ++i) {
    const auto& d = spec.demonstrations[i];
    std::string block(tmpl);
    detail::replace_slot(block, "{question}", d.question);
    detail::replace_slot(block, "{rationale}", d.rationale);
    detail::replace_slot(block, "{answer}", d.answer);
    if (i > 0) out += kDemoSeparator;
    out += block;
  }
  return out;
}

/// Demonstration blocks of an assembled few-shot prompt.
inline std::vector<std::string> demonstration_blocks(std::string_view prompt) {
  std::vector<std::string> blocks;
  for (auto& b : detail::split_on(prompt, kDemoSeparator)) {
    if (!normalize_whitespace(b).empty()) blocks.push_back(std::move(b));
  }
  return blocks;
}

inline nlohmann::json to_json(const QATriple& t) {
  return {{"id", t.id}, {"prompt", t.prompt}, {"question", t.question}, {"answer", t.answer}};
}

inline DatasetManifest parse_jsonl(std::istream& is, std::string name = "dataset") {
  DatasetManifest m;
  m.name = std::move(name);
  std::vector<std::string> problems;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      QATriple t;
      for (const char* key : {"id", "prompt", "question", "answer"}) {
        if (!j.contains(key) || !j.at(key).is_string()) {
          throw std::runtime_error(std::string("missing string field '") + key + "'");
        }
      }
      t.id = j.at("id").get<std::string>();
      t.prompt = j.at("prompt").get<std::string>();
      t.question = j.at("question").get<std::string>();
      t.answer = j.at("answer").get<std::string>();
      if (normalize_whitespace(t.prompt).empty() || normalize_whitespace(t.question).empty()) {
        throw std::runtime_error("prompt and question must be nonempty");
      }
      if (!seen.insert(t.id).second) throw std::runtime_error("duplicate id '" + t.id + "'");
      m.records.push_back(std::move(t));
    } catch (const std::exception& e) {
      problems.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " malformed line(s)";
    for (const auto& p : problems) msg += "; " + p;
    throw Error(ErrorCode::kSchemaViolation, msg);
  }
  if (m.records.empty()) throw Error(ErrorCode::kSchemaViolation, "no records");
  return m;
}

inline DatasetManifest load_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  return parse_jsonl(is, path.stem().string());
}

inline void save_jsonl(const std::vector<QATriple>& records, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string() + " for writing");
  for (const auto& r : records) os << to_json(r).dump() << '\n';
  if (!os) throw Error(ErrorCode::kIoFailure, "write failed for " + path.string());
}

inline nlohmann::json manifest_metadata(const DatasetManifest& m) {
  return {{"name", m.name}, {"task_kind", to_string(m.task_kind)}, {"split_seed", m.split_seed},
          {"records", m.records.size()}};
}

inline void apply_metadata(DatasetManifest& m, const nlohmann::json& meta) {
  m.name = meta.value("name", m.name);
  if (meta.contains("task_kind")) m.task_kind = task_kind_from_string(meta.at("task_kind").get<std::string>());
  m.split_seed = meta.value("split_seed", m.split_seed);
}

struct DatasetSplits {
  std::vector<QATriple> train;
  std::vector<QATriple> validation;
  std::vector<QATriple> test;
};

struct SplitRatios {
  double train_val = 0.7;
  double validation_within_train_val = 0.15;
};

/// Seeded shuffle, then a train+val / test partition with a validation
/// sub-split carved out of train+val.
inline DatasetSplits split(const std::vector<QATriple>& records, std::uint64_t seed, SplitRatios ratios = {}) {
  if (records.size() < 10) {
    throw Error(ErrorCode::kInsufficientData, "splitting needs at least 10 records, got " +
                                                  std::to_string(records.size()));
  }
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  shuffle(order, rng);
  const auto n = static_cast<double>(records.size());
  const auto n_train_val = static_cast<std::size_t>(std::llround(ratios.train_val * n));
  const auto n_val = static_cast<std::size_t>(std::llround(ratios.validation_within_train_val * n_train_val));
  DatasetSplits s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& r = records[order[i]];
    if (i < n_val) {
      s.validation.push_back(r);
    } else if (i < n_train_val) {
      s.train.push_back(r);
    } else {
      s.test.push_back(r);
    }
  }
  return s;
}

/// Drops records whose prompt exceeds max_tokens (0 keeps everything).
inline std::vector<QATriple> filter_by_prompt_length(const std::vector<QATriple>& records, const Vocabulary& vocab,
                                                     std::size_t max_tokens) {
  if (max_tokens == 0) return records;
  std::vector<QATriple> kept;
  for (const auto& r : records) {
    if (tokenize(r.prompt, vocab).size() <= max_tokens) kept.push_back(r);
  }
  return kept;
}

enum class SynthKind { kArithCot, kPassageQa };

inline SynthKind synth_kind_from_string(std::string_view s) {
  if (s == "arith_cot") return SynthKind::kArithCot;
  if (s == "passage_qa") return SynthKind::kPassageQa;
  throw Error(ErrorCode::kConfigInvalid, "unknown synthetic corpus kind '" + std::string(s) + "'");
}

namespace detail {

inline constexpr std::string_view kNames[] = {"tom", "mary", "sam", "lily", "jack", "emma",
                                              "ben", "kate", "leo", "nina", "omar", "rosa"};
inline constexpr std::string_view kItems[] = {"apples", "pens",  "books", "cards",   "eggs",
                                              "coins",  "shells", "stamps", "cookies", "marbles"};

template <typename T, std::size_t N>
const T& pick(const T (&arr)[N], Rng& rng) {
  return arr[uniform_index(rng, N)];
}

inline int draw(Rng& rng, int lo, int hi) { return lo + static_cast<int>(uniform_index(rng, hi - lo + 1)); }

struct ArithProblem {
  Demonstration demo;
  int template_id = 0;
};

inline constexpr int kArithTemplates = 12;

inline ArithProblem arith_problem(Rng& rng, std::string_view name, std::string_view other, int tmpl) {
  const std::string n(name), m(other), item(pick(kItems, rng));
  auto s = [](int v) { return std::to_string(v); };
  ArithProblem p;
  p.template_id = tmpl;
  auto& d = p.demo;
  switch (tmpl) {
    case 0: {
      const int a = draw(rng, 2, 20), b = draw(rng, 2, 20);
      d.question = n + " has " + s(a) + " " + item + " , buys " + s(b) + " more . how many " + item + " ?";
      d.rationale = s(a) + " + " + s(b) + " = " + s(a + b) + " .";
      d.answer = s(a + b);
      break;
    }
    case 1: {
      const int b = draw(rng, 1, 15), c = draw(rng, 1, 15);
      d.question = n + " has " + s(b + c) + " " + item + " , gives away " + s(b) + " . how many are left ?";
      d.rationale = s(b + c) + " - " + s(b) + " = " + s(c) + " .";
      d.answer = s(c);
      break;
    }
    case 2: {
      const int a = draw(rng, 2, 6), b = draw(rng, 2, 9);
      d.question = n + " buys " + s(a) + " bags of " + s(b) + " " + item + " . how many " + item + " ?";
      d.rationale = s(a) + " * " + s(b) + " = " + s(a * b) + " .";
      d.answer = s(a * b);
      break;
    }
    case 3: {
      const int a = draw(rng, 5, 20), b = draw(rng, 1, 9), c = draw(rng, 1, a + b - 1);
      d.question = n + " has " + s(a) + " " + item + " , finds " + s(b) + " and loses " + s(c) + " . how many now ?";
      d.rationale = s(a) + " + " + s(b) + " = " + s(a + b) + " . " + s(a + b) + " - " + s(c) + " = " + s(a + b - c) + " .";
      d.answer = s(a + b - c);
      break;
    }
    case 4: {
      const int b = draw(rng, 2, 5), c = draw(rng, 2, 8);
      d.question = n + " shares " + s(b * c) + " " + item + " among " + s(b) + " friends . how many each ?";
      d.rationale = s(b * c) + " / " + s(b) + " = " + s(c) + " .";
      d.answer = s(c);
      break;
    }
    case 5: {
      const int a = draw(rng, 2, 25);
      d.question = n + " has " + s(a) + " " + item + " and doubles them . how many " + item + " ?";
      d.rationale = s(a) + " * 2 = " + s(2 * a) + " .";
      d.answer = s(2 * a);
      break;
    }
    case 6: {
      const int a = draw(rng, 2, 20), b = draw(rng, 2, 20);
      d.question = n + " has " + s(a) + " " + item + " and " + m + " has " + s(b) + " . how many together ?";
      d.rationale = s(a) + " + " + s(b) + " = " + s(a + b) + " .";
      d.answer = s(a + b);
      break;
    }
    case 7: {
      const int b = draw(rng, 1, 15), c = draw(rng, 1, 10);
      d.question = n + " has " + s(b + c) + " " + item + " and " + m + " has " + s(b) + " . how many more ?";
      d.rationale = s(b + c) + " - " + s(b) + " = " + s(c) + " .";
      d.answer = s(c);
      break;
    }
    case 8: {
      const int a = draw(rng, 2, 5), b = draw(rng, 2, 6), c = draw(rng, 1, 9);
      d.question = n + " buys " + s(a) + " boxes of " + s(b) + " " + item + " and " + s(c) + " extra . how many ?";
      d.rationale = s(a) + " * " + s(b) + " = " + s(a * b) + " . " + s(a * b) + " + " + s(c) + " = " + s(a * b + c) + " .";
      d.answer = s(a * b + c);
      break;
    }
    case 9: {
      const int c = draw(rng, 1, 8), b = draw(rng, 1, 9);
      d.question = n + " has " + s(b + c) + " " + item + " , eats " + s(b) + " and triples the rest . how many ?";
      d.rationale = s(b + c) + " - " + s(b) + " = " + s(c) + " . " + s(c) + " * 3 = " + s(3 * c) + " .";
      d.answer = s(3 * c);
      break;
    }
    case 10: {
      const int a = draw(rng, 2, 9), b = draw(rng, 2, 7);
      d.question = n + " reads " + s(a) + " pages a day for " + s(b) + " days . how many pages ?";
      d.rationale = s(a) + " * " + s(b) + " = " + s(a * b) + " .";
      d.answer = s(a * b);
      break;
    }
    default: {
      const int c = draw(rng, 1, 15);
      d.question = n + " has " + s(2 * c) + " " + item + " and gives half to " + m + " . how many are left ?";
      d.rationale = s(2 * c) + " / 2 = " + s(c) + " .";
      d.answer = s(c);
      break;
    }
  }
  return p;
}

struct Fact {
  std::string sentence;
  std::string question;
  std::string answer;
};

inline constexpr int kPassageTemplates = 10;

inline Fact passage_fact(Rng& rng, const std::string& n, int tmpl) {
  static constexpr std::string_view cities[] = {"paris", "oslo", "lima", "cairo", "tokyo", "rome", "delhi", "quito"};
  static constexpr std::string_view jobs[] = {"baker", "doctor", "pilot", "farmer", "teacher", "nurse", "painter"};
  static constexpr std::string_view pets[] = {"cat", "dog", "parrot", "rabbit", "turtle", "hamster"};
  static constexpr std::string_view colors[] = {"red", "blue", "green", "yellow", "purple", "orange"};
  static constexpr std::string_view instruments[] = {"piano", "violin", "drums", "flute", "guitar", "cello"};
  static constexpr std::string_view foods[] = {"rice", "soup", "bread", "pasta", "salad", "fish"};
  static constexpr std::string_view sports[] = {"tennis", "soccer", "chess", "golf", "rugby", "hockey"};
  static constexpr std::string_view cars[] = {"van", "truck", "bike", "scooter", "jeep", "boat"};
  Fact f;
  auto set = [&](std::string_view value, std::string sentence, std::string question) {
    f.answer = std::string(value);
    f.sentence = std::move(sentence);
    f.question = std::move(question);
  };
  switch (tmpl) {
    case 0: {
      const auto v = std::string(pick(cities, rng));
      set(v, n + " lives in " + v + " .", "where does " + n + " live ?");
      break;
    }
    case 1: {
      const auto v = std::string(pick(jobs, rng));
      set(v, n + " works as a " + v + " .", "what is the job of " + n + " ?");
      break;
    }
    case 2: {
      const auto v = std::string(pick(pets, rng));
      set(v, n + " owns a pet " + v + " .", "what pet does " + n + " own ?");
      break;
    }
    case 3: {
      const auto v = std::string(pick(colors, rng));
      set(v, n + " likes the color " + v + " .", "what color does " + n + " like ?");
      break;
    }
    case 4: {
      const auto v = std::to_string(draw(rng, 1950, 2010));
      set(v, n + " was born in " + v + " .", "when was " + n + " born ?");
      break;
    }
    case 5: {
      const auto v = std::string(pick(instruments, rng));
      set(v, n + " plays the " + v + " .", "which instrument does " + n + " play ?");
      break;
    }
    case 6: {
      const auto v = std::string(pick(foods, rng));
      set(v, n + " eats " + v + " for lunch .", "what does " + n + " eat for lunch ?");
      break;
    }
    case 7: {
      const auto v = std::string(pick(sports, rng));
      set(v, n + " enjoys playing " + v + " .", "which sport does " + n + " enjoy ?");
      break;
    }
    case 8: {
      const auto v = std::to_string(draw(rng, 2, 9));
      set(v, n + " has " + v + " siblings .", "how many siblings does " + n + " have ?");
      break;
    }
    default: {
      const auto v = std::string(pick(cars, rng));
      set(v, n + " drives a " + v + " to work .", "what does " + n + " drive to work ?");
      break;
    }
  }
  return f;
}

inline std::string pad_id(std::size_t i) {
  std::string s = std::to_string(i);
  return std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

inline std::string template_tag(int t) { return (t < 10 ? "t0" : "t") + std::to_string(t); }

}  // namespace detail

/// Template index a synthetic record was generated from, read back from
/// its id ("...-tNN"); -1 for ids without the tag.
inline int synth_template_id(std::string_view id) {
  const auto pos = id.rfind("-t");
  if (pos == std::string_view::npos || pos + 2 >= id.size()) return -1;
  int v = 0;
  for (std::size_t i = pos + 2; i < id.size(); ++i) {
    if (id[i] < '0' || id[i] > '9') return -1;
    v = v * 10 + (id[i] - '0');
  }
  return v;
}

struct SynthOptions {
  std::size_t min_demos = 3;
  std::size_t max_demos = 5;
  std::size_t people_per_passage = 3;
  std::size_t facts_per_person = 2;
};

/// Desk-scale corpora with programmatically correct answers.
///
/// arith_cot: the prompt is a few-shot block of worked arithmetic problems
/// (distinct people per block); the question re-asks one of them and the
/// answer is that problem's result.
/// passage_qa: the prompt is a short passage of facts about a few people;
/// the question asks for one fact and the answer occurs verbatim in it.
inline DatasetManifest synth_corpus(SynthKind kind, std::size_t size, std::uint64_t seed, SynthOptions opt = {}) {
  if (size < 1) throw Error(ErrorCode::kInvalidArgument, "synthetic corpus size must be >= 1");
  DatasetManifest m;
  m.split_seed = seed;
  Rng rng(derive_seed(seed, "synth"));
  if (kind == SynthKind::kArithCot) {
    m.name = "arith_cot";
    m.task_kind = TaskKind::kCot;
    for (std::size_t i = 0; i < size; ++i) {
      const std::size_t k = opt.min_demos + uniform_index(rng, opt.max_demos - opt.min_demos + 1);
      std::vector<std::string_view> names(std::begin(detail::kNames), std::end(detail::kNames));
      shuffle(names, rng);
      FewShotSpec spec;
      spec.k = k;
      std::vector<int> templates;
      for (std::size_t j = 0; j < k; ++j) {
        const int tmpl = static_cast<int>(uniform_index(rng, detail::kArithTemplates));
        auto problem = detail::arith_problem(rng, names[j], names[k + (j % (names.size() - k))], tmpl);
        spec.demonstrations.push_back(std::move(problem.demo));
        templates.push_back(tmpl);
      }
      const std::size_t asked = uniform_index(rng, k);
      QATriple t;
      t.id = "arith-" + detail::pad_id(i) + "-" + detail::template_tag(templates[asked]);
      t.prompt = assemble_fewshot(spec);
      t.question = spec.demonstrations[asked].question;
      t.answer = spec.demonstrations[asked].answer;
      m.records.push_back(std::move(t));
    }
  } else {
    m.name = "passage_qa";
    m.task_kind = TaskKind::kReading;
    for (std::size_t i = 0; i < size; ++i) {
      std::vector<std::string_view> names(std::begin(detail::kNames), std::end(detail::kNames));
      shuffle(names, rng);
      std::vector<detail::Fact> facts;
      std::vector<int> fact_templates;
      for (std::size_t p = 0; p < opt.people_per_passage; ++p) {
        std::vector<int> kinds(detail::kPassageTemplates);
        for (int t = 0; t < detail::kPassageTemplates; ++t) kinds[static_cast<std::size_t>(t)] = t;
        shuffle(kinds, rng);
        for (std::size_t f = 0; f < opt.facts_per_person; ++f) {
          facts.push_back(detail::passage_fact(rng, std::string(names[p]), kinds[f]));
          fact_templates.push_back(kinds[f]);
        }
      }
      std::vector<std::size_t> order(facts.size());
      for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
      shuffle(order, rng);
      std::string passage;
      for (auto j : order) passage += (passage.empty() ? "" : " ") + facts[j].sentence;
      const std::size_t asked = uniform_index(rng, facts.size());
      QATriple t;
      t.id = "passage-" + detail::pad_id(i) + "-" + detail::template_tag(fact_templates[asked]);
      t.prompt = passage;
      t.question = facts[asked].question;
      t.answer = facts[asked].answer;
      m.records.push_back(std::move(t));
    }
  }
  return m;
}

/// Program check of a synthetic record against its own prompt.
///
/// arith_cot: the demonstration whose question matches must exist, every
/// "a op b = c" step in its rationale must hold, and the rationale's final
/// number must equal both the demonstrated and the recorded answer.
/// passage_qa: the answer must occur verbatim in the passage.
inline bool verify_synthetic(const QATriple& t, SynthKind kind) {
  if (kind == SynthKind::kPassageQa) {
    return !t.answer.empty() && t.prompt.find(t.answer) != std::string::npos;
  }
  for (const auto& block : demonstration_blocks(t.prompt)) {
    const auto q_pos = block.find("Q: ");
    const auto a_pos = block.find(" A: ");
    const auto ans_pos = block.rfind(" The answer is ");
    if (q_pos == std::string::npos || a_pos == std::string::npos || ans_pos == std::string::npos) return false;
    const std::string question = block.substr(q_pos + 3, a_pos - q_pos - 3);
    if (question != t.question) continue;
    const std::string rationale = block.substr(a_pos + 4, ans_pos - a_pos - 4);
    std::string stated = block.substr(ans_pos + 15);
    stated = normalize_whitespace(stated.substr(0, stated.find(" .")));
    std::istringstream steps(rationale);
    std::string a, op, b, eq, c, dot;
    std::string last;
    while (steps >> a >> op >> b >> eq >> c >> dot) {
      if (eq != "=" || dot != ".") return false;
      const long x = std::stol(a), y = std::stol(b), z = std::stol(c);
      const bool ok = (op == "+" && x + y == z) || (op == "-" && x - y == z) || (op == "*" && x * y == z) ||
                      (op == "/" && y != 0 && x % y == 0 && x / y == z);
      if (!ok) return false;
      last = c;
    }
    return !last.empty() && last == t.answer && stated == t.answer;
  }
  return false;
}

}  // namespace nanocap
