#pragma once

#include <string>
#include <vector>

#include "nanocap/compression.hpp"
#include "nanocap/model.hpp"
#include "nanocap/optim.hpp"
#include "nanocap/vocab.hpp"

namespace nanocap::testing {

inline ModelConfig toy_config(int vocab_size, int d_model = 8, int n_layers = 2, int context = 64,
                              std::uint64_t seed = 7) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = 2;
  c.context_window = context;
  c.vocab_size = vocab_size;
  c.seed = seed;
  return c;
}

// Scales every weight so logits are far from uniform and the gradient
// check exercises non-trivial curvature.
inline ModelParams spiky_params(const ModelConfig& cfg, double factor = 25.0) {
  auto p = ModelParams::initialize(cfg);
  const auto layout = p.layout();
  for (const auto& t : layout.tensors) {
    if (t.name.ends_with(".gain") || t.name.ends_with(".bias")) continue;
    for (std::size_t k = 0; k < t.size; ++k) p.values[t.offset + k] *= factor;
  }
  return p;
}

// Plain LM-loss fitting on a fixed set of sequences.
inline double overfit(ModelParams& params, const std::vector<TokenSequence>& seqs, int steps, double lr = 3e-3) {
  Adam adam({.learning_rate = lr});
  Gradients grads(params);
  double loss = 0.0;
  for (int s = 0; s < steps; ++s) {
    grads.zero();
    loss = 0.0;
    for (const auto& seq : seqs) {
      loss += lm_loss_and_grad(params, seq, grads, 1.0 / static_cast<double>(seqs.size()));
    }
    loss /= static_cast<double>(seqs.size());
    adam.step(params, grads);
  }
  return loss;
}

// A vocabulary of 24 units (no character fallback) and two short
// instructions; small enough for exhaustive finite differences.
struct ToyWorld {
  Vocabulary vocab;
  InstructionSet instructions;
};

inline ToyWorld toy_world() {
  const std::vector<std::string> texts = {"copy shrink 1 2 3 4 5 6", "a b c d e f g h", "x y z ?"};
  return {Vocabulary::build(texts, {.min_count = 1, .char_fallback = false}), {"copy", "shrink {word count}"}};
}

inline CompressionSetup toy_setup(const ToyWorld& w) {
  CompressionSetup s;
  s.instructions = w.instructions;
  return s;
}

}  // namespace nanocap::testing
