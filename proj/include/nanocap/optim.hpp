#pragma once

#include <cmath>
#include <vector>

#include "nanocap/error.hpp"
#include "nanocap/model.hpp"

namespace nanocap {

/// Rescales grads in place so the global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(Gradients& grads, double max_norm) {
  const double norm = grads.global_norm();
  if (norm > max_norm && norm > 0.0) grads.scale(max_norm / norm);
  return norm;
}

struct AdamOptions {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  void step(ModelParams& params, const Gradients& grads) {
    if (params.frozen) throw Error(ErrorCode::kFrozenParams, "optimizer step on frozen parameters");
    if (grads.values.size() != params.values.size()) {
      throw Error(ErrorCode::kDimensionMismatch, "gradient buffer does not match parameters");
    }
    if (m_.size() != params.values.size()) {
      m_.assign(params.values.size(), 0.0);
      v_.assign(params.values.size(), 0.0);
      t_ = 0;
    }
    ++t_;
    const double lr = options_.learning_rate;
    if (lr == 0.0) {
      update_moments(grads);
      return;
    }
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    update_moments(grads);
    for (std::size_t i = 0; i < params.values.size(); ++i) {
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      params.values[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }

  const AdamOptions& options() const { return options_; }
  long steps() const { return t_; }

 private:
  void update_moments(const Gradients& grads) {
    for (std::size_t i = 0; i < grads.values.size(); ++i) {
      const double g = grads.values[i];
      m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
      v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g * g;
    }
  }

  AdamOptions options_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace nanocap
