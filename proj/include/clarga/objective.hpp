#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "clarga/errors.hpp"
#include "clarga/ops.hpp"
#include "clarga/tensor.hpp"

namespace clarga {

enum class TaskKind { kClassification, kRegression };

struct Targets {
  TaskKind kind = TaskKind::kClassification;
  std::vector<std::size_t> classes;  // classification
  std::vector<double> values;        // regression

  std::size_t size() const {
    return kind == TaskKind::kClassification ? classes.size() : values.size();
  }
};

// Mean cross-entropy (log-sum-exp stabilized) for logits[B x p], or mean
// squared error for predictions[B x 1].
inline Tensor supervised_loss(const Tensor& output, const Targets& targets) {
  if (output.rank() != 2 || output.dim(0) != targets.size()) {
    throw ShapeError("supervised_loss: output " + shape_str(output.shape()) +
                     " vs " + std::to_string(targets.size()) + " targets");
  }
  if (targets.kind == TaskKind::kClassification) {
    return nll_loss(log_softmax(output), targets.classes);
  }
  if (output.dim(1) != 1) {
    throw ShapeError("supervised_loss: regression output must be [B x 1]");
  }
  const Tensor diff =
      sub(output, Tensor::from(output.shape(), targets.values));
  return mean(mul(diff, diff));
}

namespace detail {

inline Tensor infonce_scores_to_loss(const Tensor& scores,
                                     const std::vector<std::size_t>& positive) {
  return nll_loss(log_softmax(scores), positive);
}

// Rows of unimodal[B x M x d] for present (b, m) pairs, and each row's sample.
inline std::pair<Tensor, std::vector<std::size_t>> present_anchors(
    const Tensor& unimodal, const Tensor& fused, const Mask& presence) {
  if (unimodal.rank() != 3 || fused.rank() != 2 ||
      unimodal.dim(0) != fused.dim(0) || unimodal.dim(2) != fused.dim(1)) {
    throw ShapeError("infonce_loss: unimodal " + shape_str(unimodal.shape()) +
                     " and fused " + shape_str(fused.shape()) +
                     " are incompatible");
  }
  const std::size_t B = unimodal.dim(0), M = unimodal.dim(1),
                    d = unimodal.dim(2);
  if (presence.size() != B * M) {
    throw ShapeError("infonce_loss: presence mask size mismatch");
  }
  if (B < 2) {
    throw ContractError("infonce_loss: batch negatives need B >= 2, got B = " +
                        std::to_string(B));
  }
  std::vector<std::pair<std::size_t, std::size_t>> index;
  std::vector<std::size_t> positive;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m)
      if (!presence[b * M + m]) {
        index.emplace_back(0, b * M + m);
        positive.push_back(b);
      }
  if (index.empty()) throw ContractError("infonce_loss: no present modality");
  Tensor anchors = gather_rows({reshape(unimodal, {B * M, d})}, index);
  return {std::move(anchors), std::move(positive)};
}

}  // namespace detail

// Mean over present (b, m) of -log softmax_b'(cos(h_bm, z_b') / tau)[b].
// Missing modalities contribute nothing.
inline Tensor infonce_loss(const Tensor& unimodal, const Tensor& fused,
                           const Mask& presence, double tau) {
  if (!(tau > 0.0)) throw ContractError("infonce_loss: tau must be positive");
  auto [anchors, positive] = detail::present_anchors(unimodal, fused, presence);
  const Tensor scores = scale(cosine_similarity(anchors, fused), 1.0 / tau);
  return detail::infonce_scores_to_loss(scores, positive);
}

// Same loss with a learnable inverse temperature (one-element tensor).
inline Tensor infonce_loss(const Tensor& unimodal, const Tensor& fused,
                           const Mask& presence, const Tensor& inv_tau) {
  auto [anchors, positive] = detail::present_anchors(unimodal, fused, presence);
  const Tensor scores = scale_by(cosine_similarity(anchors, fused), inv_tau);
  return detail::infonce_scores_to_loss(scores, positive);
}

struct LossBreakdown {
  double sup_loss = 0.0;
  double nce_loss = 0.0;
  double total = 0.0;
  double lambda_c = 0.0;
  double tau = 0.0;
  std::size_t batch_size_K = 0;
};

struct HybridLoss {
  Tensor total;
  LossBreakdown breakdown;
};

// total = sup + lambda_c * nce. With lambda_c == 0 the total is the
// supervised tensor itself and nce only feeds the report.
inline HybridLoss hybrid_loss(const Tensor& sup, const Tensor& nce,
                              double lambda_c, double tau, std::size_t K) {
  HybridLoss out;
  out.breakdown.sup_loss = sup.item();
  out.breakdown.nce_loss = nce.defined() ? nce.item() : 0.0;
  out.breakdown.lambda_c = lambda_c;
  out.breakdown.tau = tau;
  out.breakdown.batch_size_K = K;
  if (lambda_c == 0.0 || !nce.defined()) {
    out.total = sup;
  } else {
    out.total = add(sup, scale(nce, lambda_c));
  }
  out.breakdown.total = out.total.item();
  if (!std::isfinite(out.breakdown.total) ||
      !std::isfinite(out.breakdown.sup_loss) ||
      !std::isfinite(out.breakdown.nce_loss)) {
    throw NumericalError("hybrid_loss: non-finite loss (sup=" +
                         std::to_string(out.breakdown.sup_loss) + ", nce=" +
                         std::to_string(out.breakdown.nce_loss) + ")");
  }
  return out;
}

// log K - L_NCE; negative values are returned as-is (vacuous bound).
inline double mi_lower_bound(double nce_loss, std::size_t K) {
  if (K < 2) throw ContractError("mi_lower_bound: K must be at least 2");
  return std::log(static_cast<double>(K)) - nce_loss;
}

}  // namespace clarga
