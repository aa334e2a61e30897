// nanocap: command-line driver for the prompt-compression pipeline.
//
//   nanocap <command> --config run.json [--seed N] [--out DIR] [--override key=value ...]
//
// Commands: pretrain, train, compress, eval, cost, bench, baseline.

#include <chrono>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nanocap/pipeline.hpp"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

nanocap::RunConfig resolve(const Globals& g) {
  auto overrides = g.overrides;
  if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
  auto cfg = nanocap::load_run_config(g.config, overrides);
  if (!g.out.empty()) cfg.output_dir = g.out;
  return cfg;
}

std::optional<std::filesystem::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::filesystem::path(s);
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate prompt compressors at desk scale"};
  app.require_subcommand(1);
  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "run configuration (JSON)")->required();
    sub->add_option("--seed", g.seed, "top-level seed");
    sub->add_option("--out", g.out, "output directory");
    sub->add_option("--override", g.overrides, "key=value config override (repeatable)");
  };

  auto* pretrain = app.add_subcommand("pretrain", "train the base language model");
  auto* train = app.add_subcommand("train", "train the compressor against the frozen scorer");
  auto* compress = app.add_subcommand("compress", "write capsule prompts");
  auto* eval = app.add_subcommand("eval", "answer test questions from capsules or original prompts");
  auto* cost = app.add_subcommand("cost", "price a token-count file");
  auto* bench = app.add_subcommand("bench", "time decoding with original vs capsule prompts");
  auto* baseline = app.add_subcommand("baseline", "write baseline capsules");
  for (auto* sub : {pretrain, train, compress, eval, cost, bench, baseline}) add_globals(sub);

  std::string input, checkpoint, prompts, method = "capsule", counts, baseline_method;
  compress->add_option("--input", input, "JSONL of triples (default: test split)");
  compress->add_option("--checkpoint", checkpoint, "compressor checkpoint (default: run's compressor.ckpt)");
  eval->add_option("--prompts", prompts, "capsule file (default: run's capsules.jsonl)");
  eval->add_option("--method", method, "report label; 'original' evaluates the uncompressed prompts");
  cost->add_option("--counts", counts, "token-count JSONL")->required();
  bench->add_option("--prompts", prompts, "capsule file (default: run's capsules.jsonl)");
  baseline->add_option("--method", baseline_method, "selective_context | random_drop | zero_shot");
  baseline->add_option("--input", input, "JSONL of triples (default: test split)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!baseline_method.empty()) g.overrides.push_back("baseline.method=" + baseline_method);
    const auto cfg = resolve(g);
    const auto t0 = std::chrono::steady_clock::now();
    if (pretrain->parsed()) {
      const auto out = nanocap::cmd_pretrain(cfg, log_line);
      std::cout << "pretrained on " << out.sequences << " sequences, final loss " << out.curve.back() << '\n';
    } else if (train->parsed()) {
      const auto r = nanocap::cmd_train(cfg, log_line);
      std::cout << "trained " << r.state.step << " steps (" << r.stop_reason << "), best validation loss "
                << r.state.best_val_loss << " at step " << r.state.best_step << '\n';
    } else if (compress->parsed()) {
      const auto recs = nanocap::cmd_compress(cfg, opt_path(input), opt_path(checkpoint));
      std::cout << "wrote " << recs.size() << " capsules\n";
    } else if (eval->parsed()) {
      const auto r = nanocap::cmd_eval(cfg, opt_path(prompts), method);
      std::cout << r.method << ": accuracy " << r.accuracy << ", compression rate " << r.compression_rate
                << ", cost saved " << r.cost_saved_fraction << '\n';
    } else if (cost->parsed()) {
      const auto r = nanocap::cmd_cost(cfg, counts);
      std::cout << r.provider << ": " << r.requests << " requests, total cost " << r.total_cost << '\n';
    } else if (bench->parsed()) {
      const auto b = nanocap::cmd_bench(cfg, opt_path(prompts));
      for (const auto& r : b.reports) {
        std::cout << r.method << " batch " << r.batch_size << ": " << r.wall_seconds << " s, speedup "
                  << r.speedup_vs_original << (r.oom ? " (oom)" : "") << '\n';
      }
      for (const auto& w : b.warnings) std::cerr << "warning: " << w << '\n';
    } else if (baseline->parsed()) {
      const auto recs = nanocap::cmd_baseline(cfg, opt_path(input));
      std::cout << "wrote " << recs.size() << " " << cfg.baseline.method << " capsules\n";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "done in " << secs << " s\n";
  } catch (const nanocap::Error& e) {
    std::cerr << "error [" << nanocap::to_string(e.code()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
