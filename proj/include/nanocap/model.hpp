#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nanocap/error.hpp"
#include "nanocap/rng.hpp"
#include "nanocap/vocab.hpp"

namespace nanocap {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 32;
  int n_heads = 4;
  int context_window = 256;
  int vocab_size = 0;
  std::uint64_t seed = 1;

  int head_dim() const { return d_model / n_heads; }
  int mlp_width() const { return 4 * d_model; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || context_window < 1 || vocab_size < 1) {
      throw Error(ErrorCode::kConfigInvalid, "model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw Error(ErrorCode::kConfigInvalid, "d_model must be divisible by n_heads");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Row-major dense matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

struct EmbeddingVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const EmbeddingVector&) const = default;
};

/// Offsets of every named tensor inside the flat parameter buffer.
class ParamLayout {
 public:
  struct Tensor {
    std::string name;
    std::size_t offset;
    std::vector<std::size_t> shape;
    std::size_t size;
  };
  struct Block {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    std::size_t ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
  };

  explicit ParamLayout(const ModelConfig& cfg) {
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    const auto f = static_cast<std::size_t>(cfg.mlp_width());
    wte = add("wte", {v, d});
    wpe = add("wpe", {static_cast<std::size_t>(cfg.context_window), d});
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Block b{};
      b.ln1_g = add(p + "ln1.gain", {d});
      b.ln1_b = add(p + "ln1.bias", {d});
      b.qkv_w = add(p + "attn.qkv.weight", {d, 3 * d});
      b.qkv_b = add(p + "attn.qkv.bias", {3 * d});
      b.proj_w = add(p + "attn.proj.weight", {d, d});
      b.proj_b = add(p + "attn.proj.bias", {d});
      b.ln2_g = add(p + "ln2.gain", {d});
      b.ln2_b = add(p + "ln2.bias", {d});
      b.fc_w = add(p + "mlp.fc.weight", {d, f});
      b.fc_b = add(p + "mlp.fc.bias", {f});
      b.out_w = add(p + "mlp.proj.weight", {f, d});
      b.out_b = add(p + "mlp.proj.bias", {d});
      blocks.push_back(b);
    }
    lnf_g = add("ln_f.gain", {d});
    lnf_b = add("ln_f.bias", {d});
    head_w = add("head.weight", {d, v});
    head_b = add("head.bias", {v});
  }

  std::size_t wte = 0, wpe = 0, lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;
  std::vector<Block> blocks;
  std::vector<Tensor> tensors;
  std::size_t total = 0;

 private:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    const std::size_t offset = total;
    tensors.push_back({std::move(name), offset, std::move(shape), n});
    total += n;
    return offset;
  }
};

/// Weights of one causal language model. `frozen` marks a scorer whose
/// weights no optimizer may touch.
struct ModelParams {
  ModelConfig config;
  std::vector<double> values;
  bool frozen = false;

  static ModelParams initialize(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    const ParamLayout layout(cfg);
    p.values.assign(layout.total, 0.0);
    Rng rng(derive_seed(cfg.seed, "model-init"));
    constexpr double kStd = 0.02;
    const double residual_std = kStd / std::sqrt(2.0 * cfg.n_layers);
    auto fill_normal = [&](std::size_t offset, std::size_t n, double stddev) {
      for (std::size_t i = 0; i < n; ++i) p.values[offset + i] = stddev * standard_normal(rng);
    };
    auto fill_const = [&](std::size_t offset, std::size_t n, double value) {
      std::fill_n(p.values.begin() + static_cast<std::ptrdiff_t>(offset), n, value);
    };
    for (const auto& t : layout.tensors) {
      const bool is_gain = t.name.ends_with(".gain");
      const bool is_bias = t.name.ends_with(".bias");
      const bool is_residual = t.name.ends_with("attn.proj.weight") || t.name.ends_with("mlp.proj.weight");
      if (is_gain) {
        fill_const(t.offset, t.size, 1.0);
      } else if (is_bias) {
        fill_const(t.offset, t.size, 0.0);
      } else {
        fill_normal(t.offset, t.size, is_residual ? residual_std : kStd);
      }
    }
    return p;
  }

  ParamLayout layout() const { return ParamLayout(config); }

  std::span<const double> tensor(std::string_view name) const {
    for (const auto& t : layout().tensors) {
      if (t.name == name) return {values.data() + t.offset, t.size};
    }
    throw Error(ErrorCode::kInvalidArgument, "no tensor named " + std::string(name));
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
};

/// Gradient buffer with the same flat layout as ModelParams::values.
struct Gradients {
  std::vector<double> values;

  Gradients() = default;
  explicit Gradients(const ModelParams& params) : values(params.values.size(), 0.0) {}

  void zero() { std::fill(values.begin(), values.end(), 0.0); }

  double global_norm() const {
    double s = 0.0;
    for (double g : values) s += g * g;
    return std::sqrt(s);
  }

  void scale(double factor) {
    for (double& g : values) g *= factor;
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

// out[r] = b + in[r] * W  (W is in_dim x out_dim)
inline void linear(const double* in, std::size_t rows, std::size_t in_dim, const double* w, const double* b,
                   std::size_t out_dim, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out + r * out_dim;
    for (std::size_t n = 0; n < out_dim; ++n) o[n] = b[n];
    const double* x = in + r * in_dim;
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double a = x[k];
      const double* wk = w + k * out_dim;
      for (std::size_t n = 0; n < out_dim; ++n) o[n] += a * wk[n];
    }
  }
}

// Accumulates dW, db and (when din is non-null) din.
inline void linear_backward(const double* in, std::size_t rows, std::size_t in_dim, const double* w,
                            std::size_t out_dim, const double* dout, double* din, double* dw, double* db) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in + r * in_dim;
    const double* g = dout + r * out_dim;
    for (std::size_t n = 0; n < out_dim; ++n) db[n] += g[n];
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double a = x[k];
      double* dwk = dw + k * out_dim;
      for (std::size_t n = 0; n < out_dim; ++n) dwk[n] += a * g[n];
    }
    if (din != nullptr) {
      double* dx = din + r * in_dim;
      for (std::size_t k = 0; k < in_dim; ++k) {
        const double* wk = w + k * out_dim;
        double s = 0.0;
        for (std::size_t n = 0; n < out_dim; ++n) s += g[n] * wk[n];
        dx[k] += s;
      }
    }
  }
}

inline void layernorm(const double* in, std::size_t rows, std::size_t dim, const double* gain, const double* bias,
                      double* out, double* mean_out, double* rstd_out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in + r * dim;
    double mean = 0.0;
    for (std::size_t i = 0; i < dim; ++i) mean += x[i];
    mean /= static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t i = 0; i < dim; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(dim);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    double* o = out + r * dim;
    for (std::size_t i = 0; i < dim; ++i) o[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    if (mean_out != nullptr) mean_out[r] = mean;
    if (rstd_out != nullptr) rstd_out[r] = rstd;
  }
}

// Adds the input gradient into din.
inline void layernorm_backward(const double* in, std::size_t rows, std::size_t dim, const double* gain,
                               const double* mean, const double* rstd, const double* dout, double* din,
                               double* dgain, double* dbias) {
  const double inv_dim = 1.0 / static_cast<double>(dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in + r * dim;
    const double* g = dout + r * dim;
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double xhat = (x[i] - mean[r]) * rstd[r];
      const double dxhat = g[i] * gain[i];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      dgain[i] += g[i] * xhat;
      dbias[i] += g[i];
    }
    double* dx = din + r * dim;
    for (std::size_t i = 0; i < dim; ++i) {
      const double xhat = (x[i] - mean[r]) * rstd[r];
      const double dxhat = g[i] * gain[i];
      dx[i] += rstd[r] * (dxhat - inv_dim * sum_dxhat - xhat * inv_dim * sum_dxhat_xhat);
    }
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// Causal multi-head attention for one sequence of T rows whose first `pad`
// rows are left padding. Padded keys are masked; padded queries attend to
// themselves only. probs (H x T x T) is optional.
inline void attention(const double* qkv, std::size_t T, std::size_t D, std::size_t H, std::size_t pad, double* out,
                      double* probs) {
  const std::size_t hd = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> row(T);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t first = t < pad ? t : pad;
      const double* q = qkv + t * 3 * D + h * hd;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t u = first; u <= t; ++u) {
        const double* k = qkv + u * 3 * D + D + h * hd;
        double s = 0.0;
        for (std::size_t j = 0; j < hd; ++j) s += q[j] * k[j];
        row[u] = s * scale;
        mx = std::max(mx, row[u]);
      }
      double z = 0.0;
      for (std::size_t u = first; u <= t; ++u) {
        row[u] = std::exp(row[u] - mx);
        z += row[u];
      }
      double* o = out + t * D + h * hd;
      for (std::size_t j = 0; j < hd; ++j) o[j] = 0.0;
      for (std::size_t u = first; u <= t; ++u) {
        const double p = row[u] / z;
        if (probs != nullptr) probs[(h * T + t) * T + u] = p;
        const double* v = qkv + u * 3 * D + 2 * D + h * hd;
        for (std::size_t j = 0; j < hd; ++j) o[j] += p * v[j];
      }
    }
  }
}

// Unpadded backward; accumulates into dqkv.
inline void attention_backward(const double* qkv, const double* probs, const double* dout, std::size_t T,
                               std::size_t D, std::size_t H, double* dqkv) {
  const std::size_t hd = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> dp(T);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      const double* p = probs + (h * T + t) * T;
      const double* g = dout + t * D + h * hd;
      double dot = 0.0;
      for (std::size_t u = 0; u <= t; ++u) {
        const double* v = qkv + u * 3 * D + 2 * D + h * hd;
        double* dv = dqkv + u * 3 * D + 2 * D + h * hd;
        double s = 0.0;
        for (std::size_t j = 0; j < hd; ++j) {
          s += g[j] * v[j];
          dv[j] += p[u] * g[j];
        }
        dp[u] = s;
        dot += p[u] * s;
      }
      const double* q = qkv + t * 3 * D + h * hd;
      double* dq = dqkv + t * 3 * D + h * hd;
      for (std::size_t u = 0; u <= t; ++u) {
        const double ds = p[u] * (dp[u] - dot) * scale;
        const double* k = qkv + u * 3 * D + D + h * hd;
        double* dk = dqkv + u * 3 * D + D + h * hd;
        for (std::size_t j = 0; j < hd; ++j) {
          dq[j] += ds * k[j];
          dk[j] += ds * q[j];
        }
      }
    }
  }
}

inline void check_ids(const ModelConfig& cfg, std::span<const TokenId> ids) {
  if (ids.size() > static_cast<std::size_t>(cfg.context_window)) {
    throw Error(ErrorCode::kSequenceTooLong, std::to_string(ids.size()) + " tokens exceed context window " +
                                                 std::to_string(cfg.context_window));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw Error(ErrorCode::kInvalidArgument, "token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

}  // namespace detail

/// Activations of one full forward pass, kept for backward.
struct ForwardPass {
  struct Layer {
    std::vector<double> x_in, ln1, ln1_mean, ln1_rstd, qkv, probs, att, x_mid, ln2, ln2_mean, ln2_rstd, fc_pre,
        fc_act;
  };

  TokenSequence ids;
  Matrix logits;  // T x V
  Matrix hidden;  // T x D, final-layer hidden states after the output norm
  std::vector<Layer> layers;
  std::vector<double> x_final, lnf_mean, lnf_rstd;

  std::size_t length() const { return ids.size(); }
};

inline ForwardPass forward(const ModelParams& params, std::span<const TokenId> ids) {
  const auto& cfg = params.config;
  detail::check_ids(cfg, ids);
  const ParamLayout L(cfg);
  const double* w = params.values.data();
  const std::size_t T = ids.size();
  const auto D = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto F = static_cast<std::size_t>(cfg.mlp_width());
  const auto V = static_cast<std::size_t>(cfg.vocab_size);

  ForwardPass pass;
  pass.ids.assign(ids.begin(), ids.end());
  std::vector<double> x(T * D);
  for (std::size_t t = 0; t < T; ++t) {
    const double* e = w + L.wte + static_cast<std::size_t>(ids[t]) * D;
    const double* p = w + L.wpe + t * D;
    for (std::size_t i = 0; i < D; ++i) x[t * D + i] = e[i] + p[i];
  }

  pass.layers.resize(L.blocks.size());
  for (std::size_t l = 0; l < L.blocks.size(); ++l) {
    const auto& B = L.blocks[l];
    auto& c = pass.layers[l];
    c.x_in = x;
    c.ln1.resize(T * D);
    c.ln1_mean.resize(T);
    c.ln1_rstd.resize(T);
    detail::layernorm(x.data(), T, D, w + B.ln1_g, w + B.ln1_b, c.ln1.data(), c.ln1_mean.data(), c.ln1_rstd.data());
    c.qkv.resize(T * 3 * D);
    detail::linear(c.ln1.data(), T, D, w + B.qkv_w, w + B.qkv_b, 3 * D, c.qkv.data());
    c.probs.assign(H * T * T, 0.0);
    c.att.resize(T * D);
    detail::attention(c.qkv.data(), T, D, H, 0, c.att.data(), c.probs.data());
    std::vector<double> proj(T * D);
    detail::linear(c.att.data(), T, D, w + B.proj_w, w + B.proj_b, D, proj.data());
    for (std::size_t i = 0; i < T * D; ++i) x[i] += proj[i];
    c.x_mid = x;
    c.ln2.resize(T * D);
    c.ln2_mean.resize(T);
    c.ln2_rstd.resize(T);
    detail::layernorm(x.data(), T, D, w + B.ln2_g, w + B.ln2_b, c.ln2.data(), c.ln2_mean.data(), c.ln2_rstd.data());
    c.fc_pre.resize(T * F);
    detail::linear(c.ln2.data(), T, D, w + B.fc_w, w + B.fc_b, F, c.fc_pre.data());
    c.fc_act.resize(T * F);
    for (std::size_t i = 0; i < T * F; ++i) c.fc_act[i] = detail::gelu(c.fc_pre[i]);
    std::vector<double> mlp(T * D);
    detail::linear(c.fc_act.data(), T, F, w + B.out_w, w + B.out_b, D, mlp.data());
    for (std::size_t i = 0; i < T * D; ++i) x[i] += mlp[i];
  }

  pass.x_final = x;
  pass.lnf_mean.resize(T);
  pass.lnf_rstd.resize(T);
  pass.hidden = Matrix(T, D);
  detail::layernorm(x.data(), T, D, w + L.lnf_g, w + L.lnf_b, pass.hidden.data.data(), pass.lnf_mean.data(),
                    pass.lnf_rstd.data());
  pass.logits = Matrix(T, V);
  detail::linear(pass.hidden.data.data(), T, D, w + L.head_w, w + L.head_b, V, pass.logits.data.data());
  return pass;
}

/// Accumulates parameter gradients for upstream gradients on the logits
/// and/or the final hidden states. Either span may be empty.
inline void backward(const ModelParams& params, const ForwardPass& pass, std::span<const double> dlogits,
                     std::span<const double> dhidden, Gradients& grads) {
  const auto& cfg = params.config;
  const ParamLayout L(cfg);
  const double* w = params.values.data();
  double* g = grads.values.data();
  const std::size_t T = pass.length();
  const auto D = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto F = static_cast<std::size_t>(cfg.mlp_width());
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  if (grads.values.size() != params.values.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "gradient buffer does not match parameters");
  }
  if ((!dlogits.empty() && dlogits.size() != T * V) || (!dhidden.empty() && dhidden.size() != T * D)) {
    throw Error(ErrorCode::kDimensionMismatch, "upstream gradient shape does not match forward pass");
  }
  if (T == 0) return;

  std::vector<double> dh(T * D, 0.0);
  if (!dhidden.empty()) std::copy(dhidden.begin(), dhidden.end(), dh.begin());
  if (!dlogits.empty()) {
    detail::linear_backward(pass.hidden.data.data(), T, D, w + L.head_w, V, dlogits.data(), dh.data(), g + L.head_w,
                            g + L.head_b);
  }
  std::vector<double> dx(T * D, 0.0);
  detail::layernorm_backward(pass.x_final.data(), T, D, w + L.lnf_g, pass.lnf_mean.data(), pass.lnf_rstd.data(),
                             dh.data(), dx.data(), g + L.lnf_g, g + L.lnf_b);

  for (std::size_t l = L.blocks.size(); l-- > 0;) {
    const auto& B = L.blocks[l];
    const auto& c = pass.layers[l];
    // mlp branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
    std::vector<double> dact(T * F, 0.0);
    detail::linear_backward(c.fc_act.data(), T, F, w + B.out_w, D, dx.data(), dact.data(), g + B.out_w,
                            g + B.out_b);
    for (std::size_t i = 0; i < T * F; ++i) dact[i] *= detail::gelu_grad(c.fc_pre[i]);
    std::vector<double> dln2(T * D, 0.0);
    detail::linear_backward(c.ln2.data(), T, D, w + B.fc_w, F, dact.data(), dln2.data(), g + B.fc_w, g + B.fc_b);
    detail::layernorm_backward(c.x_mid.data(), T, D, w + B.ln2_g, c.ln2_mean.data(), c.ln2_rstd.data(), dln2.data(),
                               dx.data(), g + B.ln2_g, g + B.ln2_b);
    // attention branch: x_mid = x_in + proj(attn(qkv(ln1(x_in))))
    std::vector<double> datt(T * D, 0.0);
    detail::linear_backward(c.att.data(), T, D, w + B.proj_w, D, dx.data(), datt.data(), g + B.proj_w,
                            g + B.proj_b);
    std::vector<double> dqkv(T * 3 * D, 0.0);
    detail::attention_backward(c.qkv.data(), c.probs.data(), datt.data(), T, D, H, dqkv.data());
    std::vector<double> dln1(T * D, 0.0);
    detail::linear_backward(c.ln1.data(), T, D, w + B.qkv_w, 3 * D, dqkv.data(), dln1.data(), g + B.qkv_w,
                            g + B.qkv_b);
    detail::layernorm_backward(c.x_in.data(), T, D, w + B.ln1_g, c.ln1_mean.data(), c.ln1_rstd.data(), dln1.data(),
                               dx.data(), g + B.ln1_g, g + B.ln1_b);
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* de = g + L.wte + static_cast<std::size_t>(pass.ids[t]) * D;
    double* dp = g + L.wpe + t * D;
    for (std::size_t i = 0; i < D; ++i) {
      de[i] += dx[t * D + i];
      dp[i] += dx[t * D + i];
    }
  }
}

/// Last-position logits for each row of a batch. Rows are left-padded to
/// the longest row, so a batch costs rows x longest length.
inline Matrix forward_last_logits(const ModelParams& params, const std::vector<TokenSequence>& batch) {
  const auto& cfg = params.config;
  const ParamLayout L(cfg);
  const double* w = params.values.data();
  const auto D = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto F = static_cast<std::size_t>(cfg.mlp_width());
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t B = batch.size();
  std::size_t T = 0;
  for (const auto& s : batch) {
    if (s.empty()) throw Error(ErrorCode::kInvalidArgument, "empty sequence in batch");
    detail::check_ids(cfg, s);
    T = std::max(T, s.size());
  }
  std::vector<std::size_t> pad(B);
  std::vector<double> x(B * T * D);
  for (std::size_t b = 0; b < B; ++b) {
    pad[b] = T - batch[b].size();
    for (std::size_t c = 0; c < T; ++c) {
      const bool padded = c < pad[b];
      const auto id = static_cast<std::size_t>(padded ? 0 : batch[b][c - pad[b]]);
      const std::size_t pos = padded ? 0 : c - pad[b];
      const double* e = w + L.wte + id * D;
      const double* p = w + L.wpe + pos * D;
      double* xr = x.data() + (b * T + c) * D;
      for (std::size_t i = 0; i < D; ++i) xr[i] = e[i] + p[i];
    }
  }
  const std::size_t R = B * T;
  std::vector<double> ln(R * D), qkv(R * 3 * D), att(R * D), proj(R * D), fc(R * F);
  for (const auto& blk : L.blocks) {
    detail::layernorm(x.data(), R, D, w + blk.ln1_g, w + blk.ln1_b, ln.data(), nullptr, nullptr);
    detail::linear(ln.data(), R, D, w + blk.qkv_w, w + blk.qkv_b, 3 * D, qkv.data());
    for (std::size_t b = 0; b < B; ++b) {
      detail::attention(qkv.data() + b * T * 3 * D, T, D, H, pad[b], att.data() + b * T * D, nullptr);
    }
    detail::linear(att.data(), R, D, w + blk.proj_w, w + blk.proj_b, D, proj.data());
    for (std::size_t i = 0; i < R * D; ++i) x[i] += proj[i];
    detail::layernorm(x.data(), R, D, w + blk.ln2_g, w + blk.ln2_b, ln.data(), nullptr, nullptr);
    detail::linear(ln.data(), R, D, w + blk.fc_w, w + blk.fc_b, F, fc.data());
    for (auto& v : fc) v = detail::gelu(v);
    detail::linear(fc.data(), R, F, w + blk.out_w, w + blk.out_b, D, proj.data());
    for (std::size_t i = 0; i < R * D; ++i) x[i] += proj[i];
  }
  Matrix logits(B, V);
  std::vector<double> h(D);
  for (std::size_t b = 0; b < B; ++b) {
    const double* xr = x.data() + (b * T + T - 1) * D;
    detail::layernorm(xr, 1, D, w + L.lnf_g, w + L.lnf_b, h.data(), nullptr, nullptr);
    detail::linear(h.data(), 1, D, w + L.head_w, w + L.head_b, V, logits.row(b).data());
  }
  return logits;
}

struct Decoding {
  enum class Mode { kGreedy, kSampled };
  Mode mode = Mode::kGreedy;
  std::uint64_t seed = 0;
  double temperature = 1.0;

  static Decoding greedy() { return {}; }
  static Decoding sampled(std::uint64_t seed, double temperature = 1.0) {
    return {Mode::kSampled, seed, temperature};
  }
};

namespace detail {

// Pad (id 0) is never emitted. Greedy ties resolve to the lowest id.
inline TokenId pick_token(std::span<const double> logits, const Decoding& decoding, Rng& rng) {
  if (decoding.mode == Decoding::Mode::kGreedy) {
    std::size_t best = 1;
    for (std::size_t v = 2; v < logits.size(); ++v) {
      if (logits[v] > logits[best]) best = v;
    }
    return static_cast<TokenId>(best);
  }
  const double temp = decoding.temperature > 0.0 ? decoding.temperature : 1.0;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 1; v < logits.size(); ++v) mx = std::max(mx, logits[v] / temp);
  std::vector<double> p(logits.size(), 0.0);
  double z = 0.0;
  for (std::size_t v = 1; v < logits.size(); ++v) {
    p[v] = std::exp(logits[v] / temp - mx);
    z += p[v];
  }
  double r = uniform_unit(rng) * z;
  for (std::size_t v = 1; v < logits.size(); ++v) {
    r -= p[v];
    if (r < 0.0) return static_cast<TokenId>(v);
  }
  return static_cast<TokenId>(logits.size() - 1);
}

}  // namespace detail

namespace detail {

// Incremental decoder for a left-padded batch. Prefill stores every layer's
// qkv rows; each step appends one token per row and attends over the cache.
class KvDecoder {
 public:
  KvDecoder(const ModelParams& params, const std::vector<TokenSequence>& prompts, std::size_t max_new)
      : params_(params), layout_(params.config) {
    const auto& cfg = params.config;
    D_ = static_cast<std::size_t>(cfg.d_model);
    H_ = static_cast<std::size_t>(cfg.n_heads);
    F_ = static_cast<std::size_t>(cfg.mlp_width());
    V_ = static_cast<std::size_t>(cfg.vocab_size);
    B_ = prompts.size();
    for (const auto& s : prompts) {
      if (s.empty()) throw Error(ErrorCode::kInvalidArgument, "empty sequence in batch");
      check_ids(cfg, s);
      T_ = std::max(T_, s.size());
    }
    cap_ = T_ + max_new;
    pad_.resize(B_);
    cache_.assign(layout_.blocks.size(), std::vector<double>(B_ * cap_ * 3 * D_, 0.0));
    prefill(prompts);
  }

  const Matrix& logits() const { return logits_; }

  void step(const std::vector<TokenId>& next) {
    const double* w = params_.values.data();
    const std::size_t slot = T_;
    std::vector<double> x(B_ * D_);
    for (std::size_t b = 0; b < B_; ++b) {
      const auto id = static_cast<std::size_t>(next[b]);
      if (next[b] < 0 || id >= V_) throw Error(ErrorCode::kInvalidArgument, "token id out of range");
      const double* e = w + layout_.wte + id * D_;
      const double* p = w + layout_.wpe + (slot - pad_[b]) * D_;
      for (std::size_t i = 0; i < D_; ++i) x[b * D_ + i] = e[i] + p[i];
    }
    ++T_;
    std::vector<double> ln(B_ * D_), qkv(B_ * 3 * D_), att(B_ * D_), proj(B_ * D_), fc(B_ * F_);
    for (std::size_t l = 0; l < layout_.blocks.size(); ++l) {
      const auto& blk = layout_.blocks[l];
      layernorm(x.data(), B_, D_, w + blk.ln1_g, w + blk.ln1_b, ln.data(), nullptr, nullptr);
      linear(ln.data(), B_, D_, w + blk.qkv_w, w + blk.qkv_b, 3 * D_, qkv.data());
      for (std::size_t b = 0; b < B_; ++b) {
        double* dst = cache_[l].data() + (b * cap_ + slot) * 3 * D_;
        std::copy(qkv.begin() + static_cast<std::ptrdiff_t>(b * 3 * D_),
                  qkv.begin() + static_cast<std::ptrdiff_t>((b + 1) * 3 * D_), dst);
        attend(cache_[l].data() + b * cap_ * 3 * D_, pad_[b], slot, att.data() + b * D_);
      }
      linear(att.data(), B_, D_, w + blk.proj_w, w + blk.proj_b, D_, proj.data());
      for (std::size_t i = 0; i < B_ * D_; ++i) x[i] += proj[i];
      layernorm(x.data(), B_, D_, w + blk.ln2_g, w + blk.ln2_b, ln.data(), nullptr, nullptr);
      linear(ln.data(), B_, D_, w + blk.fc_w, w + blk.fc_b, F_, fc.data());
      for (auto& v : fc) v = gelu(v);
      linear(fc.data(), B_, F_, w + blk.out_w, w + blk.out_b, D_, proj.data());
      for (std::size_t i = 0; i < B_ * D_; ++i) x[i] += proj[i];
    }
    head(x.data(), 1);
  }

 private:
  void prefill(const std::vector<TokenSequence>& prompts) {
    const double* w = params_.values.data();
    const std::size_t T = T_;
    std::vector<double> x(B_ * T * D_);
    for (std::size_t b = 0; b < B_; ++b) {
      pad_[b] = T - prompts[b].size();
      for (std::size_t c = 0; c < T; ++c) {
        const bool padded = c < pad_[b];
        const auto id = static_cast<std::size_t>(padded ? 0 : prompts[b][c - pad_[b]]);
        const std::size_t pos = padded ? 0 : c - pad_[b];
        const double* e = w + layout_.wte + id * D_;
        const double* p = w + layout_.wpe + pos * D_;
        double* xr = x.data() + (b * T + c) * D_;
        for (std::size_t i = 0; i < D_; ++i) xr[i] = e[i] + p[i];
      }
    }
    const std::size_t R = B_ * T;
    std::vector<double> ln(R * D_), qkv(R * 3 * D_), att(R * D_), proj(R * D_), fc(R * F_);
    for (std::size_t l = 0; l < layout_.blocks.size(); ++l) {
      const auto& blk = layout_.blocks[l];
      layernorm(x.data(), R, D_, w + blk.ln1_g, w + blk.ln1_b, ln.data(), nullptr, nullptr);
      linear(ln.data(), R, D_, w + blk.qkv_w, w + blk.qkv_b, 3 * D_, qkv.data());
      for (std::size_t b = 0; b < B_; ++b) {
        const double* src = qkv.data() + b * T * 3 * D_;
        std::copy(src, src + T * 3 * D_, cache_[l].data() + b * cap_ * 3 * D_);
        attention(src, T, D_, H_, pad_[b], att.data() + b * T * D_, nullptr);
      }
      linear(att.data(), R, D_, w + blk.proj_w, w + blk.proj_b, D_, proj.data());
      for (std::size_t i = 0; i < R * D_; ++i) x[i] += proj[i];
      layernorm(x.data(), R, D_, w + blk.ln2_g, w + blk.ln2_b, ln.data(), nullptr, nullptr);
      linear(ln.data(), R, D_, w + blk.fc_w, w + blk.fc_b, F_, fc.data());
      for (auto& v : fc) v = gelu(v);
      linear(fc.data(), R, F_, w + blk.out_w, w + blk.out_b, D_, proj.data());
      for (std::size_t i = 0; i < R * D_; ++i) x[i] += proj[i];
    }
    head(x.data(), T);
  }

  // Single query at `slot` against cached keys in [pad, slot].
  void attend(const double* rows, std::size_t pad, std::size_t slot, double* out) const {
    const std::size_t hd = D_ / H_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> s(slot + 1);
    for (std::size_t h = 0; h < H_; ++h) {
      const double* q = rows + slot * 3 * D_ + h * hd;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t u = pad; u <= slot; ++u) {
        const double* k = rows + u * 3 * D_ + D_ + h * hd;
        double acc = 0.0;
        for (std::size_t j = 0; j < hd; ++j) acc += q[j] * k[j];
        s[u] = acc * scale;
        mx = std::max(mx, s[u]);
      }
      double z = 0.0;
      for (std::size_t u = pad; u <= slot; ++u) {
        s[u] = std::exp(s[u] - mx);
        z += s[u];
      }
      double* o = out + h * hd;
      for (std::size_t j = 0; j < hd; ++j) o[j] = 0.0;
      for (std::size_t u = pad; u <= slot; ++u) {
        const double p = s[u] / z;
        const double* v = rows + u * 3 * D_ + 2 * D_ + h * hd;
        for (std::size_t j = 0; j < hd; ++j) o[j] += p * v[j];
      }
    }
  }

  // Logits from the last of `rows_per_seq` rows of every sequence.
  void head(const double* x, std::size_t rows_per_seq) {
    const double* w = params_.values.data();
    logits_ = Matrix(B_, V_);
    std::vector<double> h(D_);
    for (std::size_t b = 0; b < B_; ++b) {
      const double* xr = x + (b * rows_per_seq + rows_per_seq - 1) * D_;
      layernorm(xr, 1, D_, w + layout_.lnf_g, w + layout_.lnf_b, h.data(), nullptr, nullptr);
      linear(h.data(), 1, D_, w + layout_.head_w, w + layout_.head_b, V_, logits_.row(b).data());
    }
  }

  const ModelParams& params_;
  ParamLayout layout_;
  std::size_t D_ = 0, H_ = 0, F_ = 0, V_ = 0, B_ = 0, T_ = 0, cap_ = 0;
  std::vector<std::size_t> pad_;
  std::vector<std::vector<double>> cache_;
  Matrix logits_;
};

}  // namespace detail

struct GenerateOptions {
  Decoding decoding;
  TokenId eos_id = 2;
  bool stop_at_eos = true;
};

/// Decodes up to max_new tokens for every prompt as one left-padded batch.
/// Returns only the new tokens; eos is not included. Finished rows keep
/// their batch slot until every row is done.
inline std::vector<TokenSequence> generate_batch(const ModelParams& params, const std::vector<TokenSequence>& prompts,
                                                 std::size_t max_new, const GenerateOptions& options) {
  std::size_t longest = 0;
  for (const auto& p : prompts) longest = std::max(longest, p.size());
  if (longest + max_new > static_cast<std::size_t>(params.config.context_window)) {
    throw Error(ErrorCode::kContextOverflow, "prompt of " + std::to_string(longest) + " tokens plus " +
                                                 std::to_string(max_new) + " new tokens exceeds context window " +
                                                 std::to_string(params.config.context_window));
  }
  std::vector<TokenSequence> out(prompts.size());
  if (prompts.empty() || max_new == 0) return out;
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    rngs.emplace_back(derive_seed(options.decoding.seed, "decode", i));
  }
  detail::KvDecoder decoder(params, prompts, max_new);
  std::vector<bool> done(prompts.size(), false);
  std::vector<TokenId> next(prompts.size(), options.eos_id);
  std::size_t remaining = prompts.size();
  for (std::size_t step = 0; step < max_new && remaining > 0; ++step) {
    const Matrix& logits = decoder.logits();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      if (done[i]) continue;
      next[i] = detail::pick_token(logits.row(i), options.decoding, rngs[i]);
      if (options.stop_at_eos && next[i] == options.eos_id) {
        done[i] = true;
        --remaining;
        continue;
      }
      out[i].push_back(next[i]);
    }
    if (step + 1 < max_new && remaining > 0) decoder.step(next);
  }
  return out;
}

/// Returns only newly generated tokens, stopping at eos or max_new.
inline TokenSequence generate(const ModelParams& params, std::span<const TokenId> prompt, std::size_t max_new,
                              const Decoding& decoding, TokenId eos_id = 2) {
  if (prompt.empty()) throw Error(ErrorCode::kInvalidArgument, "generation needs a nonempty prompt");
  GenerateOptions options;
  options.decoding = decoding;
  options.eos_id = eos_id;
  return generate_batch(params, {TokenSequence(prompt.begin(), prompt.end())}, max_new, options).front();
}

namespace detail {

// Mean next-token NLL over targets ids[first_target..T-1]; fills dlogits
// (scaled) when requested.
inline double next_token_nll(const ForwardPass& pass, std::size_t first_target, double scale,
                             std::vector<double>* dlogits) {
  const std::size_t T = pass.length();
  const std::size_t V = pass.logits.cols;
  const std::size_t n = T - first_target;
  if (dlogits != nullptr) dlogits->assign(T * V, 0.0);
  double total = 0.0;
  for (std::size_t t = first_target - 1; t + 1 < T; ++t) {
    const auto row = pass.logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    const auto target = static_cast<std::size_t>(pass.ids[t + 1]);
    total += log_z - row[target];
    if (dlogits != nullptr) {
      double* d = dlogits->data() + t * V;
      const double k = scale / static_cast<double>(n);
      for (std::size_t v = 0; v < V; ++v) d[v] = k * std::exp(row[v] - log_z);
      d[target] -= k;
    }
  }
  return total / static_cast<double>(n);
}

inline void check_loss_args(std::span<const TokenId> seq, std::size_t first_target) {
  if (seq.size() < 2) throw Error(ErrorCode::kSequenceTooShort, "language-model loss needs at least 2 tokens");
  if (first_target < 1 || first_target >= seq.size()) {
    throw Error(ErrorCode::kInvalidArgument, "first target position out of range");
  }
}

}  // namespace detail

/// Mean next-token negative log-likelihood. Targets start at position
/// first_target (1 = every next-token prediction).
inline double lm_loss(const ModelParams& params, std::span<const TokenId> seq, std::size_t first_target = 1) {
  detail::check_loss_args(seq, first_target);
  const auto pass = forward(params, seq);
  return detail::next_token_nll(pass, first_target, 1.0, nullptr);
}

inline double lm_loss_and_grad(const ModelParams& params, std::span<const TokenId> seq, Gradients& grads,
                               double scale = 1.0, std::size_t first_target = 1) {
  detail::check_loss_args(seq, first_target);
  const auto pass = forward(params, seq);
  std::vector<double> dlogits;
  const double loss = detail::next_token_nll(pass, first_target, scale, &dlogits);
  backward(params, pass, dlogits, {}, grads);
  return loss;
}

/// Half-open position range [begin, end).
struct PositionSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end > begin ? end - begin : 0; }
};

enum class PoolMethod { kMean, kLast };

inline void check_span(const Matrix& hidden, PositionSpan span) {
  if (span.size() == 0) throw Error(ErrorCode::kEmptySpan, "pooling span is empty");
  if (span.end > hidden.rows) throw Error(ErrorCode::kEmptySpan, "pooling span exceeds sequence length");
}

inline EmbeddingVector pool_embedding(const Matrix& hidden, PositionSpan span, PoolMethod method) {
  check_span(hidden, span);
  EmbeddingVector e;
  if (method == PoolMethod::kLast) {
    const auto r = hidden.row(span.end - 1);
    e.values.assign(r.begin(), r.end());
    return e;
  }
  e.values.assign(hidden.cols, 0.0);
  for (std::size_t t = span.begin; t < span.end; ++t) {
    const auto r = hidden.row(t);
    for (std::size_t i = 0; i < hidden.cols; ++i) e.values[i] += r[i];
  }
  const double inv = 1.0 / static_cast<double>(span.size());
  for (double& v : e.values) v *= inv;
  return e;
}

/// Scatters an embedding gradient back onto the hidden-state rows it
/// was pooled from.
inline void pool_embedding_backward(std::span<const double> d_embedding, PositionSpan span, PoolMethod method,
                                    Matrix& d_hidden) {
  check_span(d_hidden, span);
  if (method == PoolMethod::kLast) {
    auto r = d_hidden.row(span.end - 1);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += d_embedding[i];
    return;
  }
  const double inv = 1.0 / static_cast<double>(span.size());
  for (std::size_t t = span.begin; t < span.end; ++t) {
    auto r = d_hidden.row(t);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += d_embedding[i] * inv;
  }
}

}  // namespace nanocap
