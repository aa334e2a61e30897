#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "nanocap/datasets.hpp"

namespace nanocap {
namespace {

std::string line(const std::string& id, const std::string& prompt = "some prompt", const std::string& q = "q ?",
                 const std::string& a = "a") {
  return nlohmann::json{{"id", id}, {"prompt", prompt}, {"question", q}, {"answer", a}}.dump() + "\n";
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kInvalidArgument;
}

TEST(LoadJsonl, EmptyInputIsSchemaViolation) {
  std::istringstream is("");
  EXPECT_EQ(code_of([&] { parse_jsonl(is); }), ErrorCode::kSchemaViolation);
}

TEST(LoadJsonl, ThreeValidLines) {
  std::istringstream is(line("a") + line("b") + line("c"));
  const auto m = parse_jsonl(is);
  ASSERT_EQ(m.records.size(), 3U);
  EXPECT_EQ(m.records[1].id, "b");
}

TEST(LoadJsonl, BadLineIsNamed) {
  std::string text;
  for (int i = 0; i < 10; ++i) text += i == 6 ? std::string("{\"id\": \"x\", \"prompt\": 3}\n") : line(std::to_string(i));
  std::istringstream is(text);
  try {
    parse_jsonl(is);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSchemaViolation);
    EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos) << e.what();
    EXPECT_EQ(std::string(e.what()).find("line 6"), std::string::npos);
  }
}

TEST(LoadJsonl, DuplicateIdsAndEmptyPromptsRejected) {
  std::istringstream dup(line("a") + line("a"));
  EXPECT_EQ(code_of([&] { parse_jsonl(dup); }), ErrorCode::kSchemaViolation);
  std::istringstream empty(line("a", "   "));
  EXPECT_EQ(code_of([&] { parse_jsonl(empty); }), ErrorCode::kSchemaViolation);
}

TEST(LoadJsonl, MissingFileIsIoFailure) {
  EXPECT_EQ(code_of([] { load_jsonl("/nonexistent/file.jsonl"); }), ErrorCode::kIoFailure);
}

TEST(LoadJsonl, SaveLoadRoundTrip) {
  const auto m = synth_corpus(SynthKind::kArithCot, 25, 3);
  const auto path = std::filesystem::temp_directory_path() / "nanocap_roundtrip.jsonl";
  save_jsonl(m.records, path);
  const auto back = load_jsonl(path);
  EXPECT_EQ(back.records, m.records);
  std::ifstream a(path);
  std::stringstream first;
  first << a.rdbuf();
  save_jsonl(back.records, path);
  std::ifstream b(path);
  std::stringstream second;
  second << b.rdbuf();
  EXPECT_EQ(first.str(), second.str());
  std::filesystem::remove(path);
}

TEST(Metadata, AppliesNameKindAndSeed) {
  DatasetManifest m;
  apply_metadata(m, {{"name", "mqa"}, {"task_kind", "reading"}, {"split_seed", 9}});
  EXPECT_EQ(m.name, "mqa");
  EXPECT_EQ(m.task_kind, TaskKind::kReading);
  EXPECT_EQ(m.split_seed, 9U);
  EXPECT_EQ(manifest_metadata(m).at("task_kind"), "reading");
}

Demonstration demo(int i) {
  return {"question " + std::to_string(i), "because " + std::to_string(i), std::to_string(i)};
}

TEST(Fewshot, SingleDemonstration) {
  FewShotSpec spec{{demo(1)}, 1};
  EXPECT_EQ(assemble_fewshot(spec), "Q: question 1 A: because 1 The answer is 1 .");
}

TEST(Fewshot, BlocksFollowDemonstrationOrder) {
  FewShotSpec spec{{demo(3), demo(1), demo(2)}, 3};
  const auto text = assemble_fewshot(spec);
  const auto blocks = demonstration_blocks(text);
  ASSERT_EQ(blocks.size(), 3U);
  EXPECT_NE(blocks[0].find("question 3"), std::string::npos);
  EXPECT_NE(blocks[1].find("question 1"), std::string::npos);
  EXPECT_NE(blocks[2].find("question 2"), std::string::npos);
}

TEST(Fewshot, LengthIsSumOfPartsPlusSeparators) {
  FewShotSpec spec;
  for (int i = 0; i < 7; ++i) spec.demonstrations.push_back(demo(i));
  spec.k = 7;
  const auto text = assemble_fewshot(spec);
  std::size_t parts = 0;
  for (int i = 0; i < 7; ++i) parts += assemble_fewshot({{demo(i)}, 1}).size();
  EXPECT_EQ(text.size(), parts + 6 * kDemoSeparator.size());
}

TEST(Fewshot, MissingSlotAndBadCount) {
  FewShotSpec spec{{demo(1)}, 1};
  EXPECT_EQ(code_of([&] { assemble_fewshot(spec, "Q: {question} A: {answer}"); }), ErrorCode::kMissingSlot);
  FewShotSpec wrong{{demo(1)}, 2};
  EXPECT_THROW(assemble_fewshot(wrong), Error);
}

std::vector<QATriple> numbered(std::size_t n) {
  std::vector<QATriple> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back({"r" + std::to_string(i), "p", "q", "a"});
  return v;
}

TEST(Split, SeventyThirtyOuterPartition) {
  const auto s = split(numbered(100), 5);
  EXPECT_EQ(s.train.size() + s.validation.size(), 70U);
  EXPECT_EQ(s.test.size(), 30U);
  EXPECT_EQ(s.validation.size(), 11U);  // 15% of 70, rounded
}

TEST(Split, SameSeedSameSplits) {
  const auto a = split(numbered(57), 11);
  const auto b = split(numbered(57), 11);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_EQ(a.test, b.test);
}

TEST(Split, DisjointAndExhaustiveUnderManySeeds) {
  const auto records = numbered(43);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = split(records, seed);
    std::multiset<std::string> ids;
    for (const auto* part : {&s.train, &s.validation, &s.test}) {
      for (const auto& r : *part) ids.insert(r.id);
    }
    ASSERT_EQ(ids.size(), records.size());
    ASSERT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), records.size());
  }
}

TEST(Split, TooFewRecords) {
  EXPECT_EQ(code_of([] { split(numbered(9), 1); }), ErrorCode::kInsufficientData);
}

TEST(Synth, ArithAnswersVerifyForEveryItem) {
  const auto m = synth_corpus(SynthKind::kArithCot, 1000, 21);
  ASSERT_EQ(m.records.size(), 1000U);
  EXPECT_EQ(m.task_kind, TaskKind::kCot);
  for (const auto& t : m.records) ASSERT_TRUE(verify_synthetic(t, SynthKind::kArithCot)) << t.id;
}

TEST(Synth, PassageAnswersOccurVerbatim) {
  const auto m = synth_corpus(SynthKind::kPassageQa, 1000, 22);
  EXPECT_EQ(m.task_kind, TaskKind::kReading);
  for (const auto& t : m.records) {
    ASSERT_NE(t.prompt.find(t.answer), std::string::npos) << t.id;
    ASSERT_TRUE(verify_synthetic(t, SynthKind::kPassageQa));
  }
}

TEST(Synth, VerifierRejectsCorruptedAnswer) {
  auto t = synth_corpus(SynthKind::kArithCot, 1, 4).records.front();
  t.answer += "1";
  EXPECT_FALSE(verify_synthetic(t, SynthKind::kArithCot));
}

TEST(Synth, AtLeastTenTemplatesInThousandItems) {
  for (auto kind : {SynthKind::kArithCot, SynthKind::kPassageQa}) {
    const auto m = synth_corpus(kind, 1000, 8);
    std::set<int> templates;
    for (const auto& t : m.records) templates.insert(synth_template_id(t.id));
    EXPECT_FALSE(templates.contains(-1));
    EXPECT_GE(templates.size(), 10U);
  }
}

TEST(Synth, SeededAndUniqueIds) {
  const auto a = synth_corpus(SynthKind::kArithCot, 50, 3);
  EXPECT_EQ(a.records, synth_corpus(SynthKind::kArithCot, 50, 3).records);
  EXPECT_NE(a.records, synth_corpus(SynthKind::kArithCot, 50, 4).records);
  std::set<std::string> ids;
  for (const auto& t : a.records) ids.insert(t.id);
  EXPECT_EQ(ids.size(), 50U);
}

TEST(Filter, DropsLongPrompts) {
  const auto m = synth_corpus(SynthKind::kArithCot, 40, 3);
  std::vector<std::string> texts;
  for (const auto& t : m.records) texts.push_back(t.prompt);
  const auto vocab = Vocabulary::build(texts);
  EXPECT_EQ(filter_by_prompt_length(m.records, vocab, 0).size(), m.records.size());
  const auto kept = filter_by_prompt_length(m.records, vocab, 110);
  EXPECT_LT(kept.size(), m.records.size());
  for (const auto& t : kept) EXPECT_LE(tokenize(t.prompt, vocab).size(), 110U);
}

}  // namespace
}  // namespace nanocap
