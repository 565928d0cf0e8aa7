#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "clarga/encoders.hpp"
#include "clarga/errors.hpp"
#include "clarga/ops.hpp"
#include "clarga/rng.hpp"
#include "clarga/tensor.hpp"

namespace clarga {

struct FusionConfig {
  std::size_t M = 3;     // modality count
  std::size_t d = 256;   // shared latent width
  std::size_t d_k = 128; // query/key width per head
  std::size_t H = 4;     // attention heads
  std::size_t D = 3;     // residual GAT layers
  double dropout_p = 0.1;
  double leaky_slope = 0.01;
  double layer_norm_eps = 1e-5;
  // Ablations; at most one is set.
  bool uniform_attention = false;
  bool use_residual = true;
  bool early_fusion_mean = false;
  // Recompute attention from the current states at every layer; false reuses
  // the layer-0 coefficients throughout.
  bool recompute_alpha = true;
  // A destination with no eligible source (its own modality is the only one
  // present) gets an all-zero attention row, i.e. no incoming message. When
  // set, such rows raise DegenerateSoftmaxError instead.
  bool strict_degenerate_rows = false;

  static FusionConfig desk_preset() {
    FusionConfig c;
    c.d = 32;
    c.d_k = 16;
    return c;
  }

  std::size_t active_ablations() const {
    return static_cast<std::size_t>(uniform_attention) +
           static_cast<std::size_t>(!use_residual) +
           static_cast<std::size_t>(early_fusion_mean);
  }

  void validate() const {
    if (M == 0 || d == 0 || d_k == 0 || H == 0) {
      throw ConfigError("fusion: M, d, d_k and H must be positive");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
      throw ConfigError("fusion: dropout_p must lie in [0, 1)");
    }
    if (!(layer_norm_eps >= 0.0)) {
      throw ConfigError("fusion: layer_norm_eps must be non-negative");
    }
    if (active_ablations() > 1) {
      throw ConfigError("fusion: more than one ablation flag is set");
    }
  }
};

struct FusionParams {
  Tensor W_q;  // [H x d_k x d]
  Tensor W_k;  // [H x d_k x d]
  Tensor W_g;  // [d x 2d]
  Tensor q_F;  // [d_k]

  static FusionParams create(const FusionConfig& cfg, Rng& rng) {
    cfg.validate();
    auto heads = [&] {
      const double a = std::sqrt(6.0 / static_cast<double>(cfg.d + cfg.d_k));
      std::vector<double> w(cfg.H * cfg.d_k * cfg.d);
      for (auto& v : w) v = rng.uniform(-a, a);
      return Tensor::parameter({cfg.H, cfg.d_k, cfg.d}, std::move(w));
    };
    FusionParams p;
    p.W_q = heads();
    p.W_k = heads();
    p.W_g = xavier_uniform(cfg.d, 2 * cfg.d, rng);
    std::vector<double> q(cfg.d_k);
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_k));
    for (auto& v : q) v = rng.normal(0.0, sd);
    p.q_F = Tensor::parameter({cfg.d_k}, std::move(q));
    return p;
  }
};

// Attention coefficients and readout weights captured during forward().
// Tensors are detached value copies.
struct AttentionTrace {
  std::size_t B = 0, M = 0, H = 0;
  Mask presence;                       // [B x M], 1 = missing
  std::vector<Tensor> alpha_layers;    // per layer, [B x H x M x M]
  Tensor beta;                         // [B x M]
  std::vector<Tensor> prenorm_states;  // per layer, [B x M x d] before LayerNorm
  std::vector<Tensor> layer_states;    // per layer, [B x M x d] outputs

  bool empty() const { return alpha_layers.empty() && !beta.defined(); }
  const Tensor& alpha() const { return alpha_layers.front(); }
};

// Coefficients supplied from an earlier pass and treated as constants.
struct FixedAttention {
  std::vector<Tensor> alpha_layers;  // one per layer, [B x H x M x M]
  Tensor beta;                       // [B x M]
};

struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;                   // required when train && dropout_p > 0
  const FixedAttention* fixed = nullptr;
  bool record_states = false;
};

namespace detail {

inline void check_nodes(const Tensor& nodes, const Mask& presence,
                        const FusionConfig& cfg) {
  if (nodes.rank() != 3 || nodes.dim(1) != cfg.M || nodes.dim(2) != cfg.d) {
    throw ShapeError("fusion: node features " + shape_str(nodes.shape()) +
                     " are not [B x " + std::to_string(cfg.M) + " x " +
                     std::to_string(cfg.d) + "]");
  }
  if (presence.size() != nodes.dim(0) * cfg.M) {
    throw ShapeError("fusion: presence mask has " +
                     std::to_string(presence.size()) + " entries, expected " +
                     std::to_string(nodes.dim(0) * cfg.M));
  }
}

// mask[b,h,i,j] = 1 when j == i or source j is missing.
inline Mask attention_mask(const Mask& presence, std::size_t B, std::size_t H,
                           std::size_t M) {
  Mask mask(B * H * M * M, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < M; ++j)
          mask[((b * H + h) * M + i) * M + j] =
              (i == j || presence[b * M + j]) ? 1 : 0;
  return mask;
}

inline Rng& require_rng(const ForwardOptions& opt, double p) {
  static Rng unused(0);
  if (!opt.train || p == 0.0) return unused;
  if (opt.rng == nullptr) throw ContractError("train-mode forward needs an Rng");
  return *opt.rng;
}

}  // namespace detail

// alpha[b,h,i,:] = masked softmax over sources j of LeakyReLU(q_i^h . k_j^h),
// excluding j == i and missing sources.
inline Tensor attention_coefficients(const Tensor& nodes, const Mask& presence,
                                     const FusionParams& params,
                                     const FusionConfig& cfg) {
  detail::check_nodes(nodes, presence, cfg);
  const std::size_t B = nodes.dim(0), M = cfg.M, H = cfg.H, dk = cfg.d_k;
  const Mask mask = detail::attention_mask(presence, B, H, M);
  const auto policy = cfg.strict_degenerate_rows ? DegenerateRows::kError
                                                 : DegenerateRows::kZeroRow;
  if (cfg.uniform_attention) {
    std::vector<double> a(B * H * M * M, 0.0);
    for (std::size_t row = 0; row < B * H * M; ++row) {
      std::size_t eligible = 0;
      for (std::size_t j = 0; j < M; ++j) eligible += mask[row * M + j] ? 0 : 1;
      if (eligible == 0) {
        if (policy == DegenerateRows::kError) {
          throw DegenerateSoftmaxError("attention: destination row " +
                                       std::to_string(row) +
                                       " has no eligible source");
        }
        continue;
      }
      for (std::size_t j = 0; j < M; ++j)
        if (!mask[row * M + j]) a[row * M + j] = 1.0 / static_cast<double>(eligible);
    }
    return Tensor::from({B, H, M, M}, std::move(a));
  }
  const Tensor flat = reshape(nodes, {B * M, cfg.d});
  auto project = [&](const Tensor& w) {
    // [B*M x H*dk] -> [B x M x H x dk] -> [B x H x M x dk]
    Tensor p = matmul_nt(flat, reshape(w, {H * dk, cfg.d}));
    p = permute(reshape(p, {B, M, H, dk}), {0, 2, 1, 3});
    return reshape(p, {B * H, M, dk});
  };
  const Tensor q = project(params.W_q);
  const Tensor k = project(params.W_k);
  const Tensor scores = leaky_relu(bmm(q, transpose(k)), cfg.leaky_slope);
  return reshape(softmax_masked(scores, mask, policy), {B, H, M, M});
}

// One residual GAT layer:
//   m_i = (1/H) sum_h sum_j alpha_ij^h h_j
//   h_i' = LayerNorm(h_i + Dropout(W_g [h_i || m_i]))
// or, without the residual path, h_i' = LeakyReLU(W_g [0 || m_i]).
inline Tensor gat_layer(const Tensor& states, const Tensor& alpha,
                        const FusionParams& params, const FusionConfig& cfg,
                        const ForwardOptions& opt, Tensor* prenorm = nullptr) {
  const std::size_t B = states.dim(0), M = cfg.M, d = cfg.d;
  if (alpha.shape() != Shape{B, cfg.H, M, M}) {
    throw ShapeError("gat_layer: alpha " + shape_str(alpha.shape()) +
                     " does not match states " + shape_str(states.shape()));
  }
  const Tensor alpha_mean =
      scale(sum_axis(alpha, 1), 1.0 / static_cast<double>(cfg.H));
  const Tensor messages = bmm(alpha_mean, states);  // [B x M x d]
  if (!cfg.use_residual) {
    const Tensor zeros = Tensor::zeros({B * M, d});
    Tensor upd = matmul_nt(concat({zeros, reshape(messages, {B * M, d})}), params.W_g);
    upd = reshape(leaky_relu(upd, cfg.leaky_slope), {B, M, d});
    if (prenorm) *prenorm = upd.detach();
    return upd;
  }
  const Tensor joined = reshape(concat({states, messages}), {B * M, 2 * d});
  Tensor update = matmul_nt(joined, params.W_g);
  update = dropout(update, cfg.dropout_p, opt.train,
                   detail::require_rng(opt, cfg.dropout_p));
  const Tensor pre = add(states, reshape(update, {B, M, d}));
  if (prenorm) *prenorm = pre.detach();
  return layer_norm(pre, cfg.layer_norm_eps);
}

struct ReadoutResult {
  Tensor z;     // [B x d]
  Tensor beta;  // [B x M]
};

// s_i = q_F . (W_k h_i) with W_k averaged over heads; beta = softmax over
// present modalities; z = sum_i beta_i h_i, followed by dropout.
inline ReadoutResult fusion_readout(const Tensor& states, const Mask& presence,
                                    const FusionParams& params,
                                    const FusionConfig& cfg,
                                    const ForwardOptions& opt,
                                    const Tensor* fixed_beta = nullptr) {
  detail::check_nodes(states, presence, cfg);
  const std::size_t B = states.dim(0), M = cfg.M, d = cfg.d;
  Tensor beta;
  if (fixed_beta != nullptr) {
    if (fixed_beta->shape() != Shape{B, M}) {
      throw ShapeError("fusion_readout: fixed beta has shape " +
                       shape_str(fixed_beta->shape()));
    }
    beta = fixed_beta->detach();
  } else {
    const Tensor Wk_mean =
        scale(sum_axis(params.W_k, 0), 1.0 / static_cast<double>(cfg.H));
    const Tensor key_query =
        matmul(transpose(Wk_mean), reshape(params.q_F, {cfg.d_k, 1}));  // [d x 1]
    const Tensor scores =
        reshape(matmul(reshape(states, {B * M, d}), key_query), {B, M});
    beta = softmax_masked(scores, presence, DegenerateRows::kError);
  }
  Tensor z = reshape(bmm(reshape(beta, {B, 1, M}), states), {B, d});
  z = dropout(z, cfg.dropout_p, opt.train, detail::require_rng(opt, cfg.dropout_p));
  return {std::move(z), std::move(beta)};
}

struct FusionOutput {
  Tensor z;             // [B x d]
  Tensor final_states;  // [B x M x d]
  AttentionTrace trace;
};

inline FusionOutput fusion_forward(const Tensor& nodes, const Mask& presence,
                                   const FusionParams& params,
                                   const FusionConfig& cfg,
                                   const ForwardOptions& opt = {}) {
  cfg.validate();
  detail::check_nodes(nodes, presence, cfg);
  const std::size_t B = nodes.dim(0), M = cfg.M, d = cfg.d;
  FusionOutput out;
  out.trace.B = B;
  out.trace.M = M;
  out.trace.H = cfg.H;
  out.trace.presence = presence;

  if (cfg.early_fusion_mean) {
    // Mean of the initial present-node embeddings; no graph, empty trace.
    std::vector<double> w(B * M, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t n = 0;
      for (std::size_t m = 0; m < M; ++m) n += presence[b * M + m] ? 0 : 1;
      if (n == 0) throw DataError("early-fusion mean: sample with no modality");
      for (std::size_t m = 0; m < M; ++m)
        if (!presence[b * M + m]) w[b * M + m] = 1.0 / static_cast<double>(n);
    }
    Tensor z = reshape(bmm(Tensor::from({B, 1, M}, std::move(w)), nodes), {B, d});
    out.z = dropout(z, cfg.dropout_p, opt.train,
                    detail::require_rng(opt, cfg.dropout_p));
    out.final_states = nodes;
    return out;
  }

  if (opt.fixed != nullptr && opt.fixed->alpha_layers.size() != cfg.D) {
    throw ShapeError("fusion: fixed attention has " +
                     std::to_string(opt.fixed->alpha_layers.size()) +
                     " layers, config has " + std::to_string(cfg.D));
  }
  Tensor states = nodes;
  Tensor alpha;
  for (std::size_t layer = 0; layer < cfg.D; ++layer) {
    if (opt.fixed != nullptr) {
      alpha = opt.fixed->alpha_layers[layer].detach();
    } else if (layer == 0 || cfg.recompute_alpha) {
      alpha = attention_coefficients(states, presence, params, cfg);
    }
    out.trace.alpha_layers.push_back(alpha.detach());
    Tensor pre;
    states = gat_layer(states, alpha, params, cfg, opt,
                       opt.record_states ? &pre : nullptr);
    if (opt.record_states) {
      out.trace.prenorm_states.push_back(std::move(pre));
      out.trace.layer_states.push_back(states.detach());
    }
  }
  auto readout = fusion_readout(states, presence, params, cfg, opt,
                                opt.fixed ? &opt.fixed->beta : nullptr);
  out.trace.beta = readout.beta.detach();
  out.z = std::move(readout.z);
  out.final_states = std::move(states);
  return out;
}

}  // namespace clarga
