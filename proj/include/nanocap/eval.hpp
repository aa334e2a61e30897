#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <new>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nanocap/datasets.hpp"
#include "nanocap/error.hpp"
#include "nanocap/format.hpp"
#include "nanocap/model.hpp"
#include "nanocap/vocab.hpp"

namespace nanocap {

inline bool exact_match(std::string_view pred, std::string_view gold) {
  return normalize_answer(pred) == normalize_answer(gold);
}

/// 1 - m/n.
inline double compression_rate(double n_original, double m_compressed) {
  if (!(n_original > 0.0)) throw Error(ErrorCode::kZeroLengthOriginal, "original length must be > 0");
  return 1.0 - m_compressed / n_original;
}

/// 1 - compressed/original, for costs or any other positive totals.
inline double cost_saved_fraction(double original, double compressed) {
  if (!(original > 0.0)) throw Error(ErrorCode::kZeroLengthOriginal, "original cost must be > 0");
  return 1.0 - compressed / original;
}

struct Price {
  double input_per_1k = 0.0;
  double output_per_1k = 0.0;
  std::string currency = "USD";
};

struct PricingTable {
  std::map<std::string, Price> providers;

  const Price& at(const std::string& provider) const {
    const auto it = providers.find(provider);
    if (it == providers.end()) throw Error(ErrorCode::kUnknownProvider, "no pricing for provider " + provider);
    return it->second;
  }

  static PricingTable from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::kSchemaViolation, "pricing table must be a JSON object");
    PricingTable t;
    for (const auto& [name, entry] : j.items()) {
      if (!entry.is_object() || !entry.contains("input_per_1k") || !entry.contains("output_per_1k")) {
        throw Error(ErrorCode::kSchemaViolation, "pricing entry " + name + " needs input_per_1k and output_per_1k");
      }
      Price p;
      p.input_per_1k = entry.at("input_per_1k").get<double>();
      p.output_per_1k = entry.at("output_per_1k").get<double>();
      p.currency = entry.value("currency", std::string("USD"));
      if (!(p.input_per_1k >= 0.0) || !(p.output_per_1k >= 0.0)) {
        throw Error(ErrorCode::kSchemaViolation, "pricing entry " + name + " has a negative price");
      }
      t.providers.emplace(name, p);
    }
    return t;
  }
};

inline PricingTable load_pricing(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  const auto j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::kSchemaViolation, path.string() + " is not valid JSON");
  return PricingTable::from_json(j);
}

struct TokenCount {
  double input_tokens = 0;
  double output_tokens = 0;
};

inline double api_cost(const std::vector<TokenCount>& requests, const PricingTable& pricing,
                       const std::string& provider) {
  const Price& p = pricing.at(provider);
  double total = 0.0;
  for (const auto& r : requests) {
    total += r.input_tokens / 1000.0 * p.input_per_1k + r.output_tokens / 1000.0 * p.output_per_1k;
  }
  return total;
}

struct EvalItem {
  QATriple triple;
  TokenSequence prompt;  // compressed (or original) prompt fed to the model
};

struct EvalItemResult {
  std::string id;
  std::string prediction;
  std::string reference;
  bool correct = false;
  std::size_t original_tokens = 0;
  std::size_t prompt_tokens = 0;
  std::size_t question_tokens = 0;
  std::size_t answer_tokens = 0;
  std::string error;
};

struct EvalReport {
  std::string dataset;
  std::string method;
  std::size_t items = 0;
  std::size_t failures = 0;
  double accuracy = 0.0;
  double mean_original_tokens = 0.0;
  double mean_prompt_tokens = 0.0;
  double compression_rate = 0.0;          // mean of per-item rates
  double dataset_compression_rate = 0.0;  // from token means
  double total_cost = 0.0;
  double original_cost = 0.0;
  double cost_saved_fraction = 0.0;
  std::vector<EvalItemResult> per_item;
};

struct EvalOptions {
  std::string dataset = "dataset";
  std::string method = "capsule";
  std::size_t answer_max_tokens = 16;
  const PricingTable* pricing = nullptr;
  std::string provider;
};

/// Greedy answers on (prompt ⊕ question); failed items count as wrong.
inline EvalReport run_eval(const ModelParams& model, const Vocabulary& vocab, const std::vector<EvalItem>& items,
                           const EvalOptions& options) {
  if (items.empty()) throw Error(ErrorCode::kEmptyDataset, "nothing to evaluate");
  EvalReport rep;
  rep.dataset = options.dataset;
  rep.method = options.method;
  rep.items = items.size();
  std::vector<TokenCount> compressed_requests, original_requests;
  std::size_t correct = 0;
  double rate_sum = 0.0;
  for (const auto& item : items) {
    EvalItemResult r;
    r.id = item.triple.id;
    r.reference = item.triple.answer;
    const auto original = tokenize(item.triple.prompt, vocab);
    const auto question = tokenize(item.triple.question, vocab);
    r.original_tokens = original.size();
    r.prompt_tokens = item.prompt.size();
    r.question_tokens = question.size();
    try {
      const auto answer =
          generate(model, qa_query(vocab, item.prompt, question), options.answer_max_tokens, Decoding::greedy(),
                   vocab.eos_id());
      r.answer_tokens = answer.size();
      r.prediction = detokenize(answer, vocab);
      r.correct = exact_match(r.prediction, r.reference);
    } catch (const Error& e) {
      r.error = e.what();
      ++rep.failures;
    }
    if (r.correct) ++correct;
    rate_sum += r.original_tokens > 0 ? compression_rate(static_cast<double>(r.original_tokens),
                                                         static_cast<double>(r.prompt_tokens))
                                      : 0.0;
    rep.mean_original_tokens += static_cast<double>(r.original_tokens);
    rep.mean_prompt_tokens += static_cast<double>(r.prompt_tokens);
    compressed_requests.push_back({static_cast<double>(r.prompt_tokens + r.question_tokens),
                                   static_cast<double>(r.answer_tokens)});
    original_requests.push_back({static_cast<double>(r.original_tokens + r.question_tokens),
                                 static_cast<double>(r.answer_tokens)});
    rep.per_item.push_back(std::move(r));
  }
  const auto n = static_cast<double>(items.size());
  rep.accuracy = static_cast<double>(correct) / n;
  rep.compression_rate = rate_sum / n;
  rep.mean_original_tokens /= n;
  rep.mean_prompt_tokens /= n;
  if (rep.mean_original_tokens > 0.0) {
    rep.dataset_compression_rate = compression_rate(rep.mean_original_tokens, rep.mean_prompt_tokens);
  }
  if (options.pricing != nullptr) {
    rep.total_cost = api_cost(compressed_requests, *options.pricing, options.provider);
    rep.original_cost = api_cost(original_requests, *options.pricing, options.provider);
    if (rep.original_cost > 0.0) rep.cost_saved_fraction = cost_saved_fraction(rep.original_cost, rep.total_cost);
  }
  return rep;
}

struct LatencyReport {
  std::string method;
  std::size_t batch_size = 0;
  std::size_t tokens_generated = 0;
  double wall_seconds = 0.0;
  double speedup_vs_original = 0.0;
  bool oom = false;
};

struct LatencyOptions {
  std::size_t gen_tokens = 200;
  std::size_t repetitions = 5;
  std::size_t warmup = 1;
  // Estimated working-set cap in bytes; 0 disables the check.
  std::size_t memory_limit_bytes = 0;
};

struct LatencyBench {
  std::vector<LatencyReport> reports;  // original then compressed, per batch size
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<TokenSequence> take_batch(const std::vector<TokenSequence>& prompts, std::size_t n) {
  std::vector<TokenSequence> batch;
  for (std::size_t i = 0; i < n; ++i) batch.push_back(prompts[i % prompts.size()]);
  return batch;
}

inline std::size_t decode_working_set(const ModelConfig& cfg, const std::vector<TokenSequence>& batch,
                                      std::size_t gen_tokens) {
  std::size_t longest = 0;
  for (const auto& p : batch) longest = std::max(longest, p.size());
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t rows = batch.size() * (longest + gen_tokens);
  return sizeof(double) * rows * (3 * d * static_cast<std::size_t>(cfg.n_layers) + 4 * d * 4);
}

// Median wall time of one batched decode; NaN signals memory exhaustion.
inline double time_decode(const ModelParams& model, const std::vector<TokenSequence>& batch,
                          const LatencyOptions& options) {
  if (options.memory_limit_bytes > 0 &&
      decode_working_set(model.config, batch, options.gen_tokens) > options.memory_limit_bytes) {
    return std::nan("");
  }
  GenerateOptions gen;
  gen.stop_at_eos = false;
  std::vector<double> times;
  try {
    for (std::size_t r = 0; r < options.warmup + options.repetitions; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = generate_batch(model, batch, options.gen_tokens, gen);
      const auto t1 = std::chrono::steady_clock::now();
      if (r >= options.warmup) times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
  } catch (const std::bad_alloc&) {
    return std::nan("");
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

}  // namespace detail

/// Times gen_tokens of batched decoding for original and compressed
/// prompts at every batch size. A batch of size b uses the first b prompts,
/// cycling when there are fewer.
inline LatencyBench latency_bench(const ModelParams& model, const std::vector<TokenSequence>& original,
                                  const std::vector<TokenSequence>& compressed,
                                  const std::vector<std::size_t>& batch_sizes, const LatencyOptions& options = {}) {
  if (original.empty() || compressed.empty()) throw Error(ErrorCode::kInvalidArgument, "latency bench needs prompts");
  if (options.repetitions < 1) throw Error(ErrorCode::kInvalidArgument, "latency bench needs >= 1 repetition");
  LatencyBench bench;
  double prev_orig = 0.0, prev_comp = 0.0;
  for (std::size_t bs : batch_sizes) {
    if (bs < 1) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
    const double t_orig = detail::time_decode(model, detail::take_batch(original, bs), options);
    const double t_comp = detail::time_decode(model, detail::take_batch(compressed, bs), options);
    LatencyReport o{"original", bs, bs * options.gen_tokens, 0.0, 0.0, std::isnan(t_orig)};
    LatencyReport c{"compressed", bs, bs * options.gen_tokens, 0.0, 0.0, std::isnan(t_comp)};
    if (!o.oom) {
      o.wall_seconds = t_orig;
      o.speedup_vs_original = 1.0;
    }
    if (!c.oom) c.wall_seconds = t_comp;
    if (!o.oom && !c.oom) c.speedup_vs_original = t_orig / t_comp;
    if (!o.oom && t_orig < prev_orig) {
      bench.warnings.push_back("original wall time decreased at batch size " + std::to_string(bs));
    }
    if (!c.oom && t_comp < prev_comp) {
      bench.warnings.push_back("compressed wall time decreased at batch size " + std::to_string(bs));
    }
    if (!o.oom) prev_orig = t_orig;
    if (!c.oom) prev_comp = t_comp;
    bench.reports.push_back(o);
    bench.reports.push_back(c);
  }
  return bench;
}

// Emitters. Column order is fixed and documented in the README.

inline constexpr std::string_view kEvalCsvHeader =
    "dataset,method,items,failures,accuracy,mean_original_tokens,mean_prompt_tokens,compression_rate,"
    "dataset_compression_rate,total_cost,original_cost,cost_saved_fraction";

inline constexpr std::string_view kLatencyCsvHeader =
    "method,batch_size,tokens_generated,wall_seconds,speedup_vs_original,oom";

inline nlohmann::ordered_json to_json(const EvalReport& r, bool with_items = true) {
  nlohmann::ordered_json j;
  j["dataset"] = r.dataset;
  j["method"] = r.method;
  j["items"] = r.items;
  j["failures"] = r.failures;
  j["accuracy"] = r.accuracy;
  j["mean_original_tokens"] = r.mean_original_tokens;
  j["mean_prompt_tokens"] = r.mean_prompt_tokens;
  j["compression_rate"] = r.compression_rate;
  j["dataset_compression_rate"] = r.dataset_compression_rate;
  j["total_cost"] = r.total_cost;
  j["original_cost"] = r.original_cost;
  j["cost_saved_fraction"] = r.cost_saved_fraction;
  if (with_items) {
    j["per_item"] = nlohmann::ordered_json::array();
    for (const auto& it : r.per_item) {
      nlohmann::ordered_json e;
      e["id"] = it.id;
      e["prediction"] = it.prediction;
      e["reference"] = it.reference;
      e["correct"] = it.correct;
      e["original_tokens"] = it.original_tokens;
      e["prompt_tokens"] = it.prompt_tokens;
      if (!it.error.empty()) e["error"] = it.error;
      j["per_item"].push_back(e);
    }
  }
  return j;
}

namespace detail {

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace detail

inline void write_eval_csv(const std::vector<EvalReport>& reports, std::ostream& os) {
  os << kEvalCsvHeader << '\n';
  for (const auto& r : reports) {
    os << detail::csv_field(r.dataset) << ',' << detail::csv_field(r.method) << ',' << r.items << ',' << r.failures
       << ',' << detail::num(r.accuracy) << ',' << detail::num(r.mean_original_tokens) << ','
       << detail::num(r.mean_prompt_tokens) << ',' << detail::num(r.compression_rate) << ','
       << detail::num(r.dataset_compression_rate) << ',' << detail::num(r.total_cost) << ','
       << detail::num(r.original_cost) << ',' << detail::num(r.cost_saved_fraction) << '\n';
  }
}

inline nlohmann::ordered_json to_json(const LatencyReport& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["batch_size"] = r.batch_size;
  j["tokens_generated"] = r.tokens_generated;
  j["wall_seconds"] = r.wall_seconds;
  j["speedup_vs_original"] = r.speedup_vs_original;
  j["oom"] = r.oom;
  return j;
}

inline void write_latency_csv(const std::vector<LatencyReport>& reports, std::ostream& os) {
  os << kLatencyCsvHeader << '\n';
  for (const auto& r : reports) {
    os << r.method << ',' << r.batch_size << ',' << r.tokens_generated << ',' << detail::num(r.wall_seconds) << ','
       << detail::num(r.speedup_vs_original) << ',' << (r.oom ? "true" : "false") << '\n';
  }
}

}  // namespace nanocap
