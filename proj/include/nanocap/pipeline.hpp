#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "nanocap/baselines.hpp"
#include "nanocap/checkpoint.hpp"
#include "nanocap/compression.hpp"
#include "nanocap/datasets.hpp"
#include "nanocap/error.hpp"
#include "nanocap/eval.hpp"
#include "nanocap/format.hpp"
#include "nanocap/model.hpp"
#include "nanocap/reward.hpp"
#include "nanocap/trainer.hpp"

namespace nanocap {

namespace fs = std::filesystem;

struct DatasetSource {
  fs::path manifest;  // JSONL; used when synth is empty
  std::optional<SynthKind> synth;
  std::size_t synth_size = 240;
};

struct BaselineConfig {
  std::string method = "selective_context";  // selective_context | random_drop | zero_shot
  SelectiveContextOptions selective;
};

struct BenchConfig {
  std::vector<std::size_t> batch_sizes{1, 2, 4, 8, 16};
  std::size_t prompts = 16;
  LatencyOptions latency;
};

/// Declarative description of a run. Relative paths resolve against the
/// directory of the config file.
struct RunConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;
  fs::path output_dir = "out";
  ModelConfig model;
  fs::path instructions;  // empty: built-in set for the dataset's task kind
  DatasetSource dataset;
  SplitRatios split;
  double budget_fraction = 0.25;  // of the mean tokenized prompt length
  std::size_t budget_tokens = 0;  // nonzero overrides budget_fraction
  std::string pretrain_summaries = "block_lead";  // block_lead | none
  // Extra synthetic triples for the base model only; never scored.
  std::size_t pretrain_extra_synth = 0;
  PretrainConfig pretrain;
  TrainConfig train;
  CompressionSetup compression;
  BaselineConfig baseline;
  std::size_t answer_max_tokens = 16;
  fs::path pricing;
  std::string provider = "claude2";
  BenchConfig bench;

  fs::path run_dir() const { return output_dir / run_id; }
};

namespace detail {

inline const nlohmann::json* find_path(const nlohmann::json& j, std::string_view dotted) {
  const nlohmann::json* cur = &j;
  std::size_t start = 0;
  while (start <= dotted.size()) {
    const auto dot = dotted.find('.', start);
    const std::string key(dotted.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
    if (!cur->is_object() || !cur->contains(key)) return nullptr;
    cur = &(*cur)[key];
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return cur;
}

// Typed lookup that names the offending field in every error.
template <typename T>
T field(const nlohmann::json& j, std::string_view path, T fallback) {
  const auto* v = find_path(j, path);
  if (v == nullptr || v->is_null()) return fallback;
  try {
    return v->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kConfigInvalid, "config field '" + std::string(path) + "' has the wrong type");
  }
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline void require_file(const fs::path& p, std::string_view name) {
  if (!p.empty() && !fs::is_regular_file(p)) {
    throw Error(ErrorCode::kConfigInvalid, "config field '" + std::string(name) + "': no such file " + p.string());
  }
}

inline PoolMethod pool_from_string(const std::string& s) {
  if (s == "mean") return PoolMethod::kMean;
  if (s == "last") return PoolMethod::kLast;
  throw Error(ErrorCode::kConfigInvalid, "config field 'compression.pool' must be mean or last");
}

inline DistanceKind distance_from_string(const std::string& s) {
  if (s == "mse") return DistanceKind::kMse;
  if (s == "cosine") return DistanceKind::kCosine;
  throw Error(ErrorCode::kConfigInvalid, "config field 'compression.distance' must be mse or cosine");
}

inline CapsuleEmbedding capsule_embedding_from_string(const std::string& s) {
  if (s == "capsule_positions") return CapsuleEmbedding::kCapsulePositions;
  if (s == "generating_positions") return CapsuleEmbedding::kGeneratingPositions;
  throw Error(ErrorCode::kConfigInvalid,
              "config field 'compression.capsule_embedding' must be capsule_positions or generating_positions");
}

inline Granularity granularity_from_string(const std::string& s) {
  if (s == "token") return Granularity::kToken;
  if (s == "word") return Granularity::kWord;
  if (s == "sentence") return Granularity::kSentence;
  throw Error(ErrorCode::kConfigInvalid, "config field 'baseline.granularity' must be token, word or sentence");
}

inline std::string_view to_string(PoolMethod p) { return p == PoolMethod::kMean ? "mean" : "last"; }
inline std::string_view to_string(DistanceKind d) { return d == DistanceKind::kMse ? "mse" : "cosine"; }
inline std::string_view to_string(CapsuleEmbedding c) {
  return c == CapsuleEmbedding::kCapsulePositions ? "capsule_positions" : "generating_positions";
}
inline std::string_view to_string(Granularity g) {
  return g == Granularity::kToken ? "token" : g == Granularity::kWord ? "word" : "sentence";
}
inline std::string_view to_string(SynthKind k) { return k == SynthKind::kArithCot ? "arith_cot" : "passage_qa"; }

}  // namespace detail

/// Sets a dotted key; the value is parsed as JSON when possible and kept as
/// a string otherwise.
inline void apply_override(nlohmann::json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw Error(ErrorCode::kConfigInvalid, "override must look like key=value: " + std::string(assignment));
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  auto value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object()) *cur = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      break;
    }
    cur = &(*cur)[part];
    start = dot + 1;
  }
}

inline RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base) {
  using detail::field;
  if (!j.is_object()) throw Error(ErrorCode::kConfigInvalid, "config must be a JSON object");
  RunConfig c;
  c.run_id = field<std::string>(j, "run_id", c.run_id);
  if (c.run_id.empty() || c.run_id.find_first_of("/\\") != std::string::npos) {
    throw Error(ErrorCode::kConfigInvalid, "config field 'run_id' must be a nonempty name without slashes");
  }
  c.seed = field<std::uint64_t>(j, "seed", c.seed);
  c.output_dir = detail::resolve(base, field<std::string>(j, "output_dir", "out"));

  c.model.n_layers = field<int>(j, "model.n_layers", 2);
  c.model.d_model = field<int>(j, "model.d_model", 32);
  c.model.n_heads = field<int>(j, "model.n_heads", 4);
  c.model.context_window = field<int>(j, "model.context_window", 384);
  c.model.seed = derive_seed(c.seed, "model");

  c.instructions = detail::resolve(base, field<std::string>(j, "instructions", ""));
  detail::require_file(c.instructions, "instructions");

  if (detail::find_path(j, "dataset") == nullptr) {
    throw Error(ErrorCode::kConfigInvalid, "config field 'dataset' is missing (need dataset.manifest or dataset.synth)");
  }
  const auto synth = field<std::string>(j, "dataset.synth", "");
  if (!synth.empty()) {
    c.dataset.synth = synth_kind_from_string(synth);
    c.dataset.synth_size = field<std::size_t>(j, "dataset.size", c.dataset.synth_size);
  } else {
    const auto manifest = field<std::string>(j, "dataset.manifest", "");
    if (manifest.empty()) throw Error(ErrorCode::kConfigInvalid, "config field 'dataset.manifest' is missing");
    c.dataset.manifest = detail::resolve(base, manifest);
    detail::require_file(c.dataset.manifest, "dataset.manifest");
  }
  c.split.train_val = field<double>(j, "split.train_val", c.split.train_val);
  c.split.validation_within_train_val =
      field<double>(j, "split.validation_within_train_val", c.split.validation_within_train_val);

  c.budget_fraction = field<double>(j, "budget.fraction_of_mean_prompt", c.budget_fraction);
  c.budget_tokens = field<std::size_t>(j, "budget.max_tokens", 0);
  if (c.budget_tokens == 0 && !(c.budget_fraction > 0.0 && c.budget_fraction <= 1.0)) {
    throw Error(ErrorCode::kConfigInvalid, "config field 'budget.fraction_of_mean_prompt' must be in (0, 1]");
  }

  c.pretrain_summaries = field<std::string>(j, "pretrain.summaries", c.pretrain_summaries);
  if (c.pretrain_summaries != "block_lead" && c.pretrain_summaries != "none") {
    throw Error(ErrorCode::kConfigInvalid, "config field 'pretrain.summaries' must be block_lead or none");
  }
  c.pretrain_extra_synth = field<std::size_t>(j, "pretrain.extra_synth", c.pretrain_extra_synth);
  c.pretrain.steps = field<std::size_t>(j, "pretrain.steps", c.pretrain.steps);
  c.pretrain.batch_size = field<std::size_t>(j, "pretrain.batch_size", c.pretrain.batch_size);
  c.pretrain.learning_rate = field<double>(j, "pretrain.learning_rate", c.pretrain.learning_rate);
  c.pretrain.grad_clip_norm = field<double>(j, "pretrain.grad_clip_norm", c.pretrain.grad_clip_norm);
  c.pretrain.seed = derive_seed(c.seed, "pretrain");

  if (field<std::string>(j, "train.preset", "desk") == "large") c.train = TrainConfig::large_preset();
  auto& t = c.train;
  t.learning_rate = field<double>(j, "train.learning_rate", t.learning_rate);
  t.grad_clip_norm = field<double>(j, "train.grad_clip_norm", t.grad_clip_norm);
  t.max_steps = field<std::size_t>(j, "train.max_steps", t.max_steps);
  t.patience = field<std::size_t>(j, "train.patience", t.patience);
  t.eval_every = field<std::size_t>(j, "train.eval_every", t.eval_every);
  t.grad_accumulation = field<std::size_t>(j, "train.grad_accumulation", t.grad_accumulation);
  t.validation_items = field<std::size_t>(j, "train.validation_items", t.validation_items);
  t.temperature = field<double>(j, "train.temperature", t.temperature);
  t.use_reward = field<bool>(j, "train.use_reward", t.use_reward);
  t.constant_reward = field<double>(j, "train.constant_reward", t.constant_reward);
  t.seed = derive_seed(c.seed, "train");
  t.reward.metric = reward_metric_from_string(field<std::string>(j, "reward.metric", "hidden_mse"));
  t.reward.sample_size = field<std::size_t>(j, "reward.sample_size", t.reward.sample_size);
  t.reward.r_min = field<double>(j, "reward.r_min", t.reward.r_min);
  t.reward.r_max = field<double>(j, "reward.r_max", t.reward.r_max);
  t.reward.answer_max_tokens = field<std::size_t>(j, "reward.answer_max_tokens", t.reward.answer_max_tokens);

  c.compression.pool = detail::pool_from_string(field<std::string>(j, "compression.pool", "mean"));
  c.compression.distance = detail::distance_from_string(field<std::string>(j, "compression.distance", "mse"));
  c.compression.capsule_embedding =
      detail::capsule_embedding_from_string(field<std::string>(j, "compression.capsule_embedding", "capsule_positions"));
  c.compression.headroom = field<double>(j, "compression.headroom", c.compression.headroom);
  if (!(c.compression.headroom >= 1.0)) {
    throw Error(ErrorCode::kConfigInvalid, "config field 'compression.headroom' must be >= 1");
  }

  c.baseline.method = field<std::string>(j, "baseline.method", c.baseline.method);
  if (c.baseline.method != "selective_context" && c.baseline.method != "random_drop" &&
      c.baseline.method != "zero_shot") {
    throw Error(ErrorCode::kConfigInvalid,
                "config field 'baseline.method' must be selective_context, random_drop or zero_shot");
  }
  const auto score = field<std::string>(j, "baseline.score", "sum");
  if (score != "sum" && score != "mean") throw Error(ErrorCode::kConfigInvalid, "config field 'baseline.score' must be sum or mean");
  c.baseline.selective.score = score == "sum" ? UnitScore::kSum : UnitScore::kMean;
  c.baseline.selective.granularity = detail::granularity_from_string(field<std::string>(j, "baseline.granularity", "word"));

  c.answer_max_tokens = field<std::size_t>(j, "eval.answer_max_tokens", c.answer_max_tokens);
  c.provider = field<std::string>(j, "eval.provider", c.provider);
  c.pricing = detail::resolve(base, field<std::string>(j, "pricing", ""));
  detail::require_file(c.pricing, "pricing");

  c.bench.batch_sizes = field<std::vector<std::size_t>>(j, "bench.batch_sizes", c.bench.batch_sizes);
  c.bench.prompts = field<std::size_t>(j, "bench.prompts", c.bench.prompts);
  c.bench.latency.gen_tokens = field<std::size_t>(j, "bench.gen_tokens", c.bench.latency.gen_tokens);
  c.bench.latency.repetitions = field<std::size_t>(j, "bench.repetitions", c.bench.latency.repetitions);
  c.bench.latency.warmup = field<std::size_t>(j, "bench.warmup", c.bench.latency.warmup);
  c.bench.latency.memory_limit_bytes = field<std::size_t>(j, "bench.memory_limit_bytes", 0);

  try {
    c.model.vocab_size = 8;  // real size is known once the vocabulary is built
    c.model.validate();
    c.pretrain.validate();
    c.train.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfigInvalid, e.what());
  }
  c.model.vocab_size = 0;
  return c;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["run_id"] = c.run_id;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["model"] = {{"n_layers", c.model.n_layers},
                {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"context_window", c.model.context_window}};
  j["instructions"] = c.instructions.string();
  if (c.dataset.synth) {
    j["dataset"] = {{"synth", detail::to_string(*c.dataset.synth)}, {"size", c.dataset.synth_size}};
  } else {
    j["dataset"] = {{"manifest", c.dataset.manifest.string()}};
  }
  j["split"] = {{"train_val", c.split.train_val},
                {"validation_within_train_val", c.split.validation_within_train_val}};
  j["budget"] = {{"fraction_of_mean_prompt", c.budget_fraction}, {"max_tokens", c.budget_tokens}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"learning_rate", c.pretrain.learning_rate},
                   {"grad_clip_norm", c.pretrain.grad_clip_norm},
                   {"summaries", c.pretrain_summaries},
                   {"extra_synth", c.pretrain_extra_synth}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"grad_clip_norm", c.train.grad_clip_norm},
                {"max_steps", c.train.max_steps},
                {"patience", c.train.patience},
                {"eval_every", c.train.eval_every},
                {"grad_accumulation", c.train.grad_accumulation},
                {"validation_items", c.train.validation_items},
                {"temperature", c.train.temperature},
                {"use_reward", c.train.use_reward},
                {"constant_reward", c.train.constant_reward}};
  j["reward"] = {{"metric", to_string(c.train.reward.metric)},
                 {"sample_size", c.train.reward.sample_size},
                 {"r_min", c.train.reward.r_min},
                 {"r_max", c.train.reward.r_max},
                 {"answer_max_tokens", c.train.reward.answer_max_tokens}};
  j["compression"] = {{"pool", detail::to_string(c.compression.pool)},
                      {"distance", detail::to_string(c.compression.distance)},
                      {"capsule_embedding", detail::to_string(c.compression.capsule_embedding)},
                      {"headroom", c.compression.headroom}};
  j["baseline"] = {{"method", c.baseline.method},
                   {"score", c.baseline.selective.score == UnitScore::kSum ? "sum" : "mean"},
                   {"granularity", detail::to_string(c.baseline.selective.granularity)}};
  j["eval"] = {{"answer_max_tokens", c.answer_max_tokens}, {"provider", c.provider}};
  j["pricing"] = c.pricing.string();
  j["bench"] = {{"batch_sizes", c.bench.batch_sizes},
                {"prompts", c.bench.prompts},
                {"gen_tokens", c.bench.latency.gen_tokens},
                {"repetitions", c.bench.latency.repetitions},
                {"warmup", c.bench.latency.warmup},
                {"memory_limit_bytes", c.bench.latency.memory_limit_bytes}};
  return j;
}

/// Reads the config file, applies overrides in order, then validates.
inline RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::kConfigInvalid, "config file not found: " + path.string());
  auto j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::kConfigInvalid, path.string() + " is not valid JSON");
  for (const auto& o : overrides) apply_override(j, o);
  return parse_run_config(j, path.parent_path());
}

/// Exclusive writer lock on a run directory, released on destruction.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) throw Error(ErrorCode::kIoFailure, "run directory is locked by another writer: " + path_.string());
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// Artifact names inside <output_dir>/<run_id>/.
namespace artifact {
inline constexpr const char* kDataset = "dataset.jsonl";
inline constexpr const char* kPretrained = "pretrained.ckpt";
inline constexpr const char* kPretrainLog = "pretrain_log.jsonl";
inline constexpr const char* kCompressor = "compressor.ckpt";
inline constexpr const char* kTrainLog = "train_log.jsonl";
inline constexpr const char* kCapsules = "capsules.jsonl";
inline constexpr const char* kLatencyJson = "latency.json";
inline constexpr const char* kLatencyCsv = "latency.csv";
inline constexpr const char* kCost = "cost.json";
}  // namespace artifact

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  os << text;
  if (!os) throw Error(ErrorCode::kIoFailure, "write failed for " + path.string());
}

inline void write_snapshot(const RunConfig& cfg, std::string_view command) {
  write_text(cfg.run_dir() / ("config." + std::string(command) + ".json"), to_json(cfg).dump(2) + "\n");
}

/// Everything derived from the dataset that every command needs.
struct Workspace {
  DatasetManifest manifest;
  DatasetSplits splits;
  Vocabulary vocab;
  InstructionSet instructions;
  LengthBudget budget;
};

inline DatasetManifest load_or_make_dataset(const RunConfig& cfg) {
  if (cfg.dataset.synth) {
    return synth_corpus(*cfg.dataset.synth, cfg.dataset.synth_size, derive_seed(cfg.seed, "synth"));
  }
  return load_jsonl(cfg.dataset.manifest);
}

/// Vocabulary over the training split and both instruction texts.
inline Vocabulary build_vocabulary(const std::vector<QATriple>& train, const InstructionSet& instr) {
  std::vector<std::string> texts{instr.t_rep, instr.t_summ};
  for (const auto& t : train) {
    texts.push_back(t.prompt);
    texts.push_back(t.question);
    texts.push_back(t.answer);
  }
  return Vocabulary::build(texts);
}

inline Workspace make_workspace(const RunConfig& cfg, std::optional<Vocabulary> vocab = std::nullopt) {
  Workspace ws;
  ws.manifest = load_or_make_dataset(cfg);
  if (ws.manifest.records.empty()) throw Error(ErrorCode::kEmptyDataset, "dataset has no records");
  ws.splits = split(ws.manifest.records, derive_seed(cfg.seed, "split"), cfg.split);
  ws.instructions =
      cfg.instructions.empty() ? InstructionSet::for_task(ws.manifest.task_kind) : load_instructions(cfg.instructions);
  ws.vocab = vocab ? std::move(*vocab) : build_vocabulary(ws.splits.train, ws.instructions);
  if (cfg.budget_tokens > 0) {
    ws.budget.max_tokens = cfg.budget_tokens;
  } else {
    double total = 0.0;
    for (const auto& t : ws.manifest.records) total += static_cast<double>(tokenize(t.prompt, ws.vocab).size());
    const double mean = total / static_cast<double>(ws.manifest.records.size());
    ws.budget.max_tokens = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.budget_fraction * mean)));
  }
  return ws;
}

inline CompressionSetup setup_for(const RunConfig& cfg, const Workspace& ws) {
  CompressionSetup s = cfg.compression;
  s.instructions = ws.instructions;
  return s;
}

/// Lead summary: the first tokens of every demonstration, sharing the
/// budget evenly.
inline TokenSequence block_lead_summary(const Vocabulary& vocab, std::string_view prompt, std::size_t budget) {
  const auto blocks = demonstration_blocks(prompt);
  if (blocks.empty()) return {};
  const std::size_t per = std::max<std::size_t>(1, budget / blocks.size());
  TokenSequence out;
  for (const auto& b : blocks) {
    const auto toks = tokenize(b, vocab);
    out.insert(out.end(), toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(std::min(per, toks.size())));
  }
  return truncate(out, LengthBudget{budget});
}

/// Training triples plus, for synthetic runs, `pretrain_extra_synth` fresh
/// triples whose prompt or question does not occur in validation or test.
inline std::vector<QATriple> pretraining_triples(const RunConfig& cfg, const Workspace& ws) {
  std::vector<QATriple> out = ws.splits.train;
  if (!cfg.dataset.synth || cfg.pretrain_extra_synth == 0) return out;
  std::set<std::string> held_out;
  for (const auto* part : {&ws.splits.validation, &ws.splits.test}) {
    for (const auto& t : *part) {
      held_out.insert(t.prompt);
      held_out.insert(t.question);
    }
  }
  const auto extra =
      synth_corpus(*cfg.dataset.synth, cfg.pretrain_extra_synth, derive_seed(cfg.seed, "pretrain-corpus"));
  for (const auto& t : extra.records) {
    if (!held_out.contains(t.prompt) && !held_out.contains(t.question)) out.push_back(t);
  }
  return out;
}

/// Sequences for the stand-in base model: question answering on full
/// prompts and on single demonstrations that contain the question, plus
/// lead summaries under the summarizing instruction.
inline std::vector<TokenSequence> pretraining_sequences(const RunConfig& cfg, const Workspace& ws) {
  std::vector<TokenSequence> seqs;
  const auto& v = ws.vocab;
  for (const auto& t : pretraining_triples(cfg, ws)) {
    const auto k = tokenize(t.prompt, v);
    const auto q = tokenize(t.question, v);
    const auto a = tokenize(t.answer, v);
    seqs.push_back(qa_example(v, k, q, a));
    for (const auto& block : demonstration_blocks(t.prompt)) {
      if (block.find(t.question) != std::string::npos) seqs.push_back(qa_example(v, tokenize(block, v), q, a));
    }
    if (cfg.pretrain_summaries == "block_lead") {
      auto s = summarize_prompt(v, ws.instructions, k, ws.budget.max_tokens);
      const auto lead = block_lead_summary(v, t.prompt, ws.budget.max_tokens);
      s.insert(s.end(), lead.begin(), lead.end());
      s.push_back(v.eos_id());
      seqs.push_back(std::move(s));
    }
  }
  const auto window = static_cast<std::size_t>(cfg.model.context_window);
  std::erase_if(seqs, [&](const TokenSequence& s) { return s.size() > window || s.size() < 2; });
  return seqs;
}

struct CapsuleRecord {
  std::string id;
  std::size_t original_tokens = 0;
  std::string capsule;
  std::size_t capsule_tokens = 0;
  TokenSequence capsule_ids;
};

inline nlohmann::ordered_json to_json(const CapsuleRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["original_tokens"] = r.original_tokens;
  j["capsule"] = r.capsule;
  j["capsule_tokens"] = r.capsule_tokens;
  j["capsule_ids"] = r.capsule_ids;
  return j;
}

inline void save_capsules(const std::vector<CapsuleRecord>& records, const fs::path& path) {
  std::string text;
  for (const auto& r : records) text += to_json(r).dump() + "\n";
  write_text(path, text);
}

inline std::vector<CapsuleRecord> load_capsules(const fs::path& path, const Vocabulary& vocab) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  std::vector<CapsuleRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("capsule")) {
      throw Error(ErrorCode::kSchemaViolation, path.string() + ":" + std::to_string(lineno) + ": not a capsule record");
    }
    CapsuleRecord r;
    r.id = j.at("id").get<std::string>();
    r.capsule = j.at("capsule").get<std::string>();
    r.original_tokens = j.value("original_tokens", std::size_t{0});
    if (j.contains("capsule_ids")) {
      r.capsule_ids = j.at("capsule_ids").get<TokenSequence>();
    } else {
      r.capsule_ids = tokenize(r.capsule, vocab);
    }
    r.capsule_tokens = r.capsule_ids.size();
    out.push_back(std::move(r));
  }
  return out;
}

inline CapsuleRecord make_record(const Vocabulary& vocab, const QATriple& t, TokenSequence capsule) {
  CapsuleRecord r;
  r.id = t.id;
  r.original_tokens = tokenize(t.prompt, vocab).size();
  r.capsule = detokenize(capsule, vocab);
  r.capsule_tokens = capsule.size();
  r.capsule_ids = std::move(capsule);
  return r;
}

using Logger = std::function<void(const std::string&)>;

// ---- commands --------------------------------------------------------------

struct PretrainOutcome {
  std::vector<double> curve;
  std::size_t sequences = 0;
};

inline PretrainOutcome cmd_pretrain(const RunConfig& cfg, const Logger& log = {}) {
  RunLock lock(cfg.run_dir());
  const auto ws = make_workspace(cfg);
  save_jsonl(ws.manifest.records, cfg.run_dir() / artifact::kDataset);
  ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(ws.vocab.units().size());
  auto params = ModelParams::initialize(mc);
  const auto seqs = pretraining_sequences(cfg, ws);
  PretrainOutcome out;
  out.sequences = seqs.size();
  std::string text;
  out.curve = pretrain_lm(params, seqs, cfg.pretrain, [&](std::size_t step, double loss) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["lm_loss"] = loss;
    text += j.dump() + "\n";
    if (log && (step == 1 || step % 100 == 0)) log("pretrain step " + std::to_string(step) + " loss " + std::to_string(loss));
  });
  write_text(cfg.run_dir() / artifact::kPretrainLog, text);
  save_checkpoint(params, ws.vocab, cfg.run_dir() / artifact::kPretrained);
  write_snapshot(cfg, "pretrain");
  return out;
}

inline Checkpoint load_run_checkpoint(const RunConfig& cfg, const char* name) {
  const auto path = cfg.run_dir() / name;
  if (!fs::exists(path)) throw Error(ErrorCode::kIoFailure, "missing artifact " + path.string());
  return load_checkpoint(path);
}

inline TrainResult cmd_train(const RunConfig& cfg, const Logger& log = {}) {
  RunLock lock(cfg.run_dir());
  auto base = load_run_checkpoint(cfg, artifact::kPretrained);
  const auto ws = make_workspace(cfg, base.vocab);
  ModelParams scorer = base.params;
  scorer.frozen = true;
  ModelParams compressor = base.params;
  compressor.frozen = false;
  TrainConfig tc = cfg.train;
  tc.budget = ws.budget;
  std::string text;
  auto result = train_loop(compressor, scorer, ws.vocab, setup_for(cfg, ws), ws.splits, tc, [&](const StepMetrics& m) {
    text += to_json(m).dump() + "\n";
    if (log && m.val_loss) {
      log("train step " + std::to_string(m.step) + " nano_loss " + std::to_string(m.nano_loss) + " val " +
          std::to_string(*m.val_loss));
    }
  });
  write_text(cfg.run_dir() / artifact::kTrainLog, text);
  save_checkpoint(result.best, ws.vocab, cfg.run_dir() / artifact::kCompressor);
  write_snapshot(cfg, "train");
  return result;
}

/// Capsules for `inputs` (default: the test split) with greedy decoding.
inline std::vector<CapsuleRecord> cmd_compress(const RunConfig& cfg, const std::optional<fs::path>& input = {},
                                               const std::optional<fs::path>& checkpoint = {}) {
  RunLock lock(cfg.run_dir());
  const auto ck = checkpoint ? load_checkpoint(*checkpoint) : load_run_checkpoint(cfg, artifact::kCompressor);
  const auto ws = make_workspace(cfg, ck.vocab);
  const auto inputs = input ? load_jsonl(*input).records : ws.splits.test;
  const auto setup = setup_for(cfg, ws);
  std::vector<CapsuleRecord> records;
  for (const auto& t : inputs) {
    const auto k = tokenize(t.prompt, ws.vocab);
    const auto gen = summarize_generate(ck.params, ws.vocab, setup, k, ws.budget.max_tokens, Decoding::greedy());
    records.push_back(make_record(ws.vocab, t, truncate(gen.capsule, ws.budget)));
  }
  save_capsules(records, cfg.run_dir() / artifact::kCapsules);
  write_snapshot(cfg, "compress");
  return records;
}

/// Baseline capsules over the test split, from the pretrained checkpoint.
inline std::vector<CapsuleRecord> cmd_baseline(const RunConfig& cfg, const std::optional<fs::path>& input = {}) {
  RunLock lock(cfg.run_dir());
  const auto base = load_run_checkpoint(cfg, artifact::kPretrained);
  const auto ws = make_workspace(cfg, base.vocab);
  const auto inputs = input ? load_jsonl(*input).records : ws.splits.test;
  const auto setup = setup_for(cfg, ws);
  std::vector<CapsuleRecord> records;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& t = inputs[i];
    const auto k = tokenize(t.prompt, ws.vocab);
    TokenSequence capsule;
    if (cfg.baseline.method == "zero_shot") {
      capsule = zero_shot_summarize(base.params, ws.vocab, setup, k, ws.budget);
    } else if (cfg.baseline.method == "selective_context") {
      capsule = selective_context(base.params, ws.vocab, k, ws.budget, cfg.baseline.selective).kept;
    } else {
      capsule = random_drop(ws.vocab, t.prompt, ws.budget, derive_seed(cfg.seed, "random_drop", i)).kept;
    }
    records.push_back(make_record(ws.vocab, t, std::move(capsule)));
  }
  save_capsules(records, cfg.run_dir() / ("capsules." + cfg.baseline.method + ".jsonl"));
  write_snapshot(cfg, "baseline");
  return records;
}

/// Scores a capsule file (or the original prompts when `prompts` is
/// "original") on the test split with the frozen pretrained model.
inline EvalReport cmd_eval(const RunConfig& cfg, const std::optional<fs::path>& prompts = {},
                           const std::string& method = "capsule") {
  RunLock lock(cfg.run_dir());
  auto base = load_run_checkpoint(cfg, artifact::kPretrained);
  base.params.frozen = true;
  const auto ws = make_workspace(cfg, base.vocab);
  std::vector<EvalItem> items;
  if (method == "original") {
    for (const auto& t : ws.splits.test) items.push_back({t, tokenize(t.prompt, ws.vocab)});
  } else {
    const auto path = prompts ? *prompts : cfg.run_dir() / artifact::kCapsules;
    const auto caps = load_capsules(path, ws.vocab);
    std::map<std::string, const QATriple*> by_id;
    for (const auto& t : ws.manifest.records) by_id[t.id] = &t;
    for (const auto& c : caps) {
      const auto it = by_id.find(c.id);
      if (it == by_id.end()) throw Error(ErrorCode::kSchemaViolation, "capsule id " + c.id + " is not in the dataset");
      items.push_back({*it->second, c.capsule_ids});
    }
  }
  std::optional<PricingTable> pricing;
  if (!cfg.pricing.empty()) pricing = load_pricing(cfg.pricing);
  EvalOptions opts;
  opts.dataset = ws.manifest.name;
  opts.method = method;
  opts.answer_max_tokens = cfg.answer_max_tokens;
  opts.pricing = pricing ? &*pricing : nullptr;
  opts.provider = cfg.provider;
  const auto report = run_eval(base.params, ws.vocab, items, opts);
  write_text(cfg.run_dir() / ("eval." + method + ".json"), to_json(report).dump(2) + "\n");
  std::ostringstream csv;
  write_eval_csv({report}, csv);
  write_text(cfg.run_dir() / ("eval." + method + ".csv"), csv.str());
  write_snapshot(cfg, "eval");
  return report;
}

struct CostReport {
  std::string provider;
  std::size_t requests = 0;
  double total_cost = 0.0;
  std::optional<double> original_cost;
  std::optional<double> cost_saved_fraction;
};

/// Token-count file: JSONL with input_tokens/output_tokens per request, or
/// capsule records (original_tokens/capsule_tokens, input only).
inline CostReport cmd_cost(const RunConfig& cfg, const fs::path& counts) {
  RunLock lock(cfg.run_dir());
  if (cfg.pricing.empty()) throw Error(ErrorCode::kConfigInvalid, "config field 'pricing' is required for cost");
  const auto pricing = load_pricing(cfg.pricing);
  std::ifstream is(counts);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot open " + counts.string());
  std::vector<TokenCount> compressed, original;
  bool capsule_format = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    const auto where = counts.string() + ":" + std::to_string(lineno);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::kSchemaViolation, where + ": not a JSON object");
    if (j.contains("input_tokens")) {
      compressed.push_back({j.at("input_tokens").get<double>(), j.value("output_tokens", 0.0)});
    } else if (j.contains("capsule_tokens") && j.contains("original_tokens")) {
      capsule_format = true;
      compressed.push_back({j.at("capsule_tokens").get<double>(), 0.0});
      original.push_back({j.at("original_tokens").get<double>(), 0.0});
    } else {
      throw Error(ErrorCode::kSchemaViolation, where + ": needs input_tokens or original_tokens/capsule_tokens");
    }
  }
  CostReport rep;
  rep.provider = cfg.provider;
  rep.requests = compressed.size();
  rep.total_cost = api_cost(compressed, pricing, cfg.provider);
  if (capsule_format) {
    rep.original_cost = api_cost(original, pricing, cfg.provider);
    if (*rep.original_cost > 0.0) rep.cost_saved_fraction = cost_saved_fraction(*rep.original_cost, rep.total_cost);
  }
  nlohmann::ordered_json j;
  j["provider"] = rep.provider;
  j["requests"] = rep.requests;
  j["total_cost"] = rep.total_cost;
  if (rep.original_cost) j["original_cost"] = *rep.original_cost;
  if (rep.cost_saved_fraction) j["cost_saved_fraction"] = *rep.cost_saved_fraction;
  write_text(cfg.run_dir() / artifact::kCost, j.dump(2) + "\n");
  write_snapshot(cfg, "cost");
  return rep;
}

/// Original test prompts against their capsules.
inline LatencyBench cmd_bench(const RunConfig& cfg, const std::optional<fs::path>& prompts = {}) {
  RunLock lock(cfg.run_dir());
  auto base = load_run_checkpoint(cfg, artifact::kPretrained);
  base.params.frozen = true;
  const auto ws = make_workspace(cfg, base.vocab);
  const auto caps = load_capsules(prompts ? *prompts : cfg.run_dir() / artifact::kCapsules, ws.vocab);
  std::map<std::string, const QATriple*> by_id;
  for (const auto& t : ws.manifest.records) by_id[t.id] = &t;
  std::vector<TokenSequence> original, compressed;
  for (const auto& c : caps) {
    if (original.size() == cfg.bench.prompts) break;
    const auto it = by_id.find(c.id);
    if (it == by_id.end()) throw Error(ErrorCode::kSchemaViolation, "capsule id " + c.id + " is not in the dataset");
    original.push_back(tokenize(it->second->prompt, ws.vocab));
    // An empty capsule still needs one position to decode from.
    compressed.push_back(c.capsule_ids.empty() ? TokenSequence{ws.vocab.sep_id()} : c.capsule_ids);
  }
  auto bench = latency_bench(base.params, original, compressed, cfg.bench.batch_sizes, cfg.bench.latency);
  nlohmann::ordered_json j;
  j["reports"] = nlohmann::ordered_json::array();
  for (const auto& r : bench.reports) j["reports"].push_back(to_json(r));
  j["warnings"] = bench.warnings;
  write_text(cfg.run_dir() / artifact::kLatencyJson, j.dump(2) + "\n");
  std::ostringstream csv;
  write_latency_csv(bench.reports, csv);
  write_text(cfg.run_dir() / artifact::kLatencyCsv, csv.str());
  write_snapshot(cfg, "bench");
  return bench;
}

}  // namespace nanocap
