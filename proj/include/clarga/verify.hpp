#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "clarga/config.hpp"
#include "clarga/datagen.hpp"
#include "clarga/diagnostics.hpp"
#include "clarga/graph_fusion.hpp"
#include "clarga/model.hpp"
#include "clarga/objective.hpp"
#include "clarga/spectral.hpp"
#include "clarga/trainer.hpp"

namespace clarga {

using nlohmann::json;

struct CertificationReport {
  std::string proposition;
  std::size_t trials = 0;
  double max_violation = 0.0;  // largest observed (lhs - rhs), may be negative
  double tolerance = 0.0;
  std::size_t violations = 0;  // trials with (lhs - rhs) > tolerance
  bool asserted = true;        // false: reported only, never fails
  bool passed = false;
  std::vector<double> bounds;  // bound value per trial, when meaningful
  json config = json::object();
  json details = json::object();

  void finalize() { passed = !asserted || max_violation <= tolerance; }
};

inline json report_to_json(const CertificationReport& r) {
  return json{{"version", 1},
              {"proposition", r.proposition},
              {"trials", r.trials},
              {"max_violation", r.max_violation},
              {"tolerance", r.tolerance},
              {"violations", r.violations},
              {"asserted", r.asserted},
              {"passed", r.passed},
              {"bounds", r.bounds},
              {"config", r.config},
              {"details", r.details}};
}

namespace detail {

inline void observe(CertificationReport& rep, double violation) {
  if (rep.trials == 0 || violation > rep.max_violation) rep.max_violation = violation;
  if (violation > rep.tolerance) ++rep.violations;
  ++rep.trials;
}

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Mat to_mat(const Tensor& t) {
  return Eigen::Map<const Mat>(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                               static_cast<Eigen::Index>(t.dim(1)));
}

// Affine-free LayerNorm on an Eigen vector, written out independently of ops.
inline Eigen::VectorXd ln(const Eigen::VectorXd& v, double eps) {
  const double mu = v.mean();
  const double var = (v.array() - mu).square().mean();
  if (var + eps <= 0.0) return Eigen::VectorXd::Zero(v.size());
  return (v.array() - mu) / std::sqrt(var + eps);
}

inline Eigen::VectorXd mlp_eval(const Mlp& net, const std::vector<double>& x) {
  Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& layer = net.layers()[l];
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(
        layer.bias.data().data(), static_cast<Eigen::Index>(layer.bias.numel()));
    h = to_mat(layer.weight) * h + b;
    if (l + 1 < net.layers().size())
      h = h.unaryExpr([s = net.slope()](double v) { return v > 0.0 ? v : s * v; });
  }
  return h;
}

inline ModalityBatch single_batch(std::size_t M, std::vector<std::vector<double>> xs) {
  ModalityBatch b;
  b.num_modalities = M;
  Sample s;
  s.missing.assign(M, 0);
  for (auto& x : xs) s.inputs.emplace_back(std::move(x));
  b.samples.push_back(std::move(s));
  return b;
}

inline double l2(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

// ------------------------------------------------------------ Deep Sets step

struct DeepSetsCertConfig {
  std::vector<std::size_t> modality_counts = {2, 3, 4, 5};
  std::size_t probes = 100;
  std::size_t input_dim = 6;
  std::size_t d = 8;
  std::size_t D = 3;
  std::size_t H = 2;
  std::uint64_t seed = 7;
  double permutation_tol = 1e-10;
  double alpha_tol = 0.0;  // uniform coefficients are asserted exactly
  double construction_tol = 1e-8;
};

// (i) zero projections give alpha_ij = 1/(M-1) off the diagonal;
// (ii) z is invariant under every permutation of the inputs, both for the
//      zero-projection block and for random projections;
// (iii) with W_g = [-I + W/(M-1) || W] the block computes
//      rho(S) = LN(C ... LN(C LN(W S/(M-1)))) with C = W M/(M-1) and
//      S = sum_i phi(x_i), phi a shared encoder.
inline CertificationReport certify_deepsets_recovery(const DeepSetsCertConfig& cfg) {
  CertificationReport rep;
  rep.proposition = "deepsets_recovery";
  rep.tolerance = 0.0;
  rep.config = {{"modality_counts", cfg.modality_counts}, {"probes", cfg.probes},
                {"input_dim", cfg.input_dim}, {"d", cfg.d}, {"D", cfg.D},
                {"H", cfg.H}, {"seed", cfg.seed}};
  double max_alpha = 0.0, max_perm = 0.0, max_perm_learned = 0.0, max_construct = 0.0;
  Rng rng(cfg.seed);
  for (std::size_t M : cfg.modality_counts) {
    if (M < 2) throw ConfigError("deepsets certification needs M >= 2");
    FusionConfig fc;
    fc.M = M;
    fc.d = cfg.d;
    fc.d_k = cfg.d;
    fc.H = cfg.H;
    fc.D = cfg.D;
    fc.dropout_p = 0.0;
    // Shared encoder, copied into every modality slot.
    Encoder shared = Encoder::create({0, cfg.input_dim, {cfg.d}, cfg.d}, fc.leaky_slope, rng);
    std::vector<Encoder> encoders(M, shared);
    for (std::size_t m = 0; m < M; ++m) encoders[m].spec.modality_id = m;
    MaskEmbedding mask = MaskEmbedding::create(cfg.d, 0.1, rng);

    FusionParams zero = FusionParams::create(fc, rng);
    for (Tensor* t : {&zero.W_q, &zero.W_k, &zero.q_F})
      for (auto& v : t->mutable_data()) v = 0.0;
    // W_g = [-I + W/(M-1) || W]
    const std::size_t d = cfg.d;
    detail::Mat W(d, d);
    for (std::size_t i = 0; i < d * d; ++i) W.data()[i] = rng.normal(0.0, 1.0 / std::sqrt(double(d)));
    const double inv = 1.0 / static_cast<double>(M - 1);
    {
      auto g = zero.W_g.mutable_data();
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) {
          g[r * 2 * d + c] = (r == c ? -1.0 : 0.0) + W(r, c) * inv;
          g[r * 2 * d + d + c] = W(r, c);
        }
    }
    FusionParams learned = FusionParams::create(fc, rng);

    std::vector<std::size_t> perm(M);
    for (std::size_t probe = 0; probe < cfg.probes; ++probe) {
      std::vector<std::vector<double>> xs(M, std::vector<double>(cfg.input_dim));
      for (auto& x : xs)
        for (auto& v : x) v = rng.normal();
      const auto enc = encode_batch(detail::single_batch(M, xs), encoders, mask);

      // (i)
      const Tensor alpha = attention_coefficients(enc.nodes, enc.presence, zero, fc);
      for (std::size_t h = 0; h < fc.H; ++h)
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < M; ++j) {
            const double want = i == j ? 0.0 : inv;
            max_alpha = std::max(max_alpha, std::abs(alpha[(h * M + i) * M + j] - want));
          }

      // (iii)
      const Tensor z = fusion_forward(enc.nodes, enc.presence, zero, fc).z;
      Eigen::VectorXd S = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
      for (std::size_t m = 0; m < M; ++m) S += detail::mlp_eval(shared.net, xs[m]);
      Eigen::VectorXd v = W * S * inv;
      const detail::Mat C = W * (static_cast<double>(M) * inv);
      if (cfg.D > 0) {
        v = detail::ln(v, fc.layer_norm_eps);
        for (std::size_t l = 1; l < cfg.D; ++l) v = detail::ln(C * v, fc.layer_norm_eps);
      } else {
        v = S / static_cast<double>(M);
      }
      for (std::size_t c = 0; c < d; ++c)
        max_construct = std::max(max_construct, std::abs(z[c] - v(static_cast<Eigen::Index>(c))));

      // (ii) every permutation of the raw inputs
      const Tensor z_learned = fusion_forward(enc.nodes, enc.presence, learned, fc).z;
      std::iota(perm.begin(), perm.end(), 0);
      while (std::next_permutation(perm.begin(), perm.end())) {
        std::vector<std::vector<double>> px(M);
        for (std::size_t m = 0; m < M; ++m) px[m] = xs[perm[m]];
        const auto penc = encode_batch(detail::single_batch(M, px), encoders, mask);
        const Tensor zp = fusion_forward(penc.nodes, penc.presence, zero, fc).z;
        const Tensor zl = fusion_forward(penc.nodes, penc.presence, learned, fc).z;
        for (std::size_t c = 0; c < d; ++c) {
          max_perm = std::max(max_perm, std::abs(zp[c] - z[c]));
          max_perm_learned = std::max(max_perm_learned, std::abs(zl[c] - z_learned[c]));
        }
      }
      rep.trials += 1;
    }
  }
  // Normalized violation: each part against its own tolerance.
  const double v_alpha = max_alpha - cfg.alpha_tol;
  const double v_perm = std::max(max_perm, max_perm_learned) - cfg.permutation_tol;
  const double v_con = max_construct - cfg.construction_tol;
  rep.max_violation = std::max({v_alpha, v_perm, v_con});
  rep.violations = (v_alpha > 0) + (v_perm > 0) + (v_con > 0);
  rep.details = {{"max_alpha_deviation", max_alpha},
                 {"max_permutation_deviation_uniform", max_perm},
                 {"max_permutation_deviation_learned", max_perm_learned},
                 {"max_construction_deviation", max_construct}};
  rep.finalize();
  return rep;
}

// ---------------------------------------------------- missing-modality bound

struct LipschitzCertConfig {
  std::size_t trials = 1000;
  std::uint64_t seed = 11;
  bool certification_mode = true;  // false: trained weights as-is, report only
  double tolerance = 1e-9;
};

// Fixed-attention forward of a one-sample batch with node embeddings given.
namespace detail {

struct PassResult {
  Tensor z, logits;
  FixedAttention attention;
};

inline PassResult run_pass(const Model& model, const FusionParams& params,
                           const FusionConfig& fc, const Tensor& nodes, const Mask& presence,
                           const FixedAttention* fixed) {
  ForwardOptions opt;
  opt.fixed = fixed;
  FusionOutput out = fusion_forward(nodes, presence, params, fc, opt);
  PassResult r;
  r.z = out.z;
  r.logits = model.heads()[0].forward(out.z);
  r.attention.alpha_layers = out.trace.alpha_layers;
  r.attention.beta = out.trace.beta;
  return r;
}

}  // namespace detail

// For each trial: a sample and one of its present modalities k. The full pass
// uses f_k(x_k) at node k; the masked pass substitutes h_mask. In
// certification mode h_mask = f_k(0), W_g is rescaled to spectral norm <= 1
// and both passes share the full pass's alpha and beta. Checks
//   ||z_full - z_masked||       <= L beta_k ||x_k||   (+ tolerance)
//   ||g(z_full) - g(z_masked)|| <= K L beta_k ||x_k|| (+ tolerance)
// with L, K products of layer spectral norms.
inline CertificationReport certify_lipschitz_missing_modality(const Model& model,
                                                              const Dataset& data,
                                                              const LipschitzCertConfig& cfg) {
  if (model.config().arch != Architecture::kClarga) {
    throw ConfigError("lipschitz certification needs the clarga architecture");
  }
  FusionConfig fc = model.config().fusion;
  if (fc.early_fusion_mean) throw ConfigError("lipschitz certification needs graph fusion");
  fc.dropout_p = 0.0;
  FusionParams params = model.fusion_params();
  params.W_g = params.W_g.detach();
  double wg_scale = 1.0;
  if (cfg.certification_mode) {
    const double s = spectral_norm(params.W_g);
    if (s > 1.0) wg_scale = spectral_rescale(params.W_g, 1.0);
    if (spectral_norm(params.W_g) > 1.0 + 1e-12) {
      throw ConfigError("certification mode: W_g spectral norm still exceeds 1");
    }
  }
  CertificationReport rep;
  rep.proposition = cfg.certification_mode ? "lipschitz_missing_modality"
                                           : "lipschitz_missing_modality_trained";
  rep.tolerance = cfg.tolerance;
  rep.asserted = cfg.certification_mode;
  const double K = model.heads()[0].lipschitz_upper_bound();
  rep.config = {{"trials", cfg.trials}, {"seed", cfg.seed},
                {"certification_mode", cfg.certification_mode},
                {"W_g_rescale_factor", wg_scale}, {"head_lipschitz_K", K},
                {"fusion", fusion_to_json(fc)}};
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.samples[i].present_count() >= 1) eligible.push_back(i);
  if (eligible.empty()) throw DataError("lipschitz certification: empty dataset");

  Rng rng(cfg.seed);
  const std::size_t M = fc.M;
  double max_head = -std::numeric_limits<double>::infinity();
  double max_ratio = 0.0;
  std::size_t head_violations = 0;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    const Sample& s = data.samples[eligible[rng.below(eligible.size())]];
    std::vector<std::size_t> present;
    for (std::size_t m = 0; m < M; ++m)
      if (!s.missing[m]) present.push_back(m);
    const std::size_t k = present[rng.below(present.size())];
    const Encoder& enc_k = model.encoders()[k];
    const double L = enc_k.net.lipschitz_upper_bound();

    MaskEmbedding mask = model.mask();
    if (cfg.certification_mode) {
      mask.vector = encoder_forward(std::vector<double>(enc_k.spec.input_dim, 0.0), enc_k).detach();
    }
    ModalityBatch full{M, {s}};
    ModalityBatch masked = drop_modality(full, k);
    const auto enc_full = encode_batch(full, model.encoders(), mask);
    const auto full_pass =
        detail::run_pass(model, params, fc, enc_full.nodes, enc_full.presence, nullptr);

    Tensor masked_nodes;
    Mask masked_presence;
    if (masked.size() == 1) {
      const auto e = encode_batch(masked, model.encoders(), mask);
      masked_nodes = e.nodes;
      masked_presence = e.presence;
    } else {
      // k was the only modality: every node is the mask vector.
      std::vector<double> v;
      for (std::size_t m = 0; m < M; ++m) {
        const auto src = enc_full.nodes.data().subspan(m * fc.d, fc.d);
        if (m == k) v.insert(v.end(), mask.vector.data().begin(), mask.vector.data().end());
        else v.insert(v.end(), src.begin(), src.end());
      }
      masked_nodes = Tensor::from({1, M, fc.d}, std::move(v));
      masked_presence = enc_full.presence;  // no present node left to mark
    }
    const auto masked_pass = detail::run_pass(
        model, params, fc, masked_nodes,
        cfg.certification_mode ? enc_full.presence : masked_presence,
        cfg.certification_mode ? &full_pass.attention : nullptr);

    double xnorm = 0.0;
    for (double v : *s.inputs[k]) xnorm += v * v;
    xnorm = std::sqrt(xnorm);
    const double beta_k = full_pass.attention.beta[k];
    const double bound = L * beta_k * xnorm;
    const double dz = detail::l2(full_pass.z, masked_pass.z);
    const double dg = detail::l2(full_pass.logits, masked_pass.logits);
    rep.bounds.push_back(bound);
    detail::observe(rep, dz - bound);
    max_head = std::max(max_head, dg - K * bound);
    if (dg - K * bound > cfg.tolerance) ++head_violations;
    if (bound > 0.0) max_ratio = std::max(max_ratio, dz / bound);
  }
  rep.violations += head_violations;
  rep.max_violation = std::max(rep.max_violation, max_head);
  rep.details = {{"head_bound_max_violation", max_head},
                 {"head_bound_violations", head_violations},
                 {"max_ratio_observed_to_bound", max_ratio}};
  rep.finalize();
  return rep;
}

// --------------------------------------------------- LayerNorm non-collapse

struct LayerNormCertConfig {
  std::size_t batches = 100;
  std::size_t batch_size = 16;
  std::uint64_t seed = 13;
  double tolerance = 1e-9;
};

// For every layer and node: the post-norm vector has zero mean and mean
// square sigma^2 / (sigma^2 + eps), sigma^2 the pre-norm variance; and the
// mean square lies in (0, 1) whenever sigma^2 > 1e-12.
inline CertificationReport certify_layernorm_noncollapse(const Model& model, const Dataset& data,
                                                         const LayerNormCertConfig& cfg) {
  const FusionConfig& fc = model.config().fusion;
  if (model.config().arch != Architecture::kClarga || !fc.use_residual || fc.early_fusion_mean) {
    throw ConfigError("layernorm certification needs residual graph layers");
  }
  CertificationReport rep;
  rep.proposition = "layernorm_noncollapse";
  rep.tolerance = cfg.tolerance;
  rep.config = {{"batches", cfg.batches}, {"batch_size", cfg.batch_size},
                {"seed", cfg.seed}, {"D", fc.D}, {"eps", fc.layer_norm_eps}};
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t d = fc.d;
  std::size_t range_failures = 0, nodes = 0;
  double max_mean = 0.0, max_ms = 0.0;
  for (std::size_t b = 0; b < cfg.batches; ++b) {
    rng.shuffle(order);
    const ModalityBatch batch = data.batch(order, 0, std::min(cfg.batch_size, order.size()));
    ForwardOptions opt;
    opt.record_states = true;
    const auto out = model.forward(batch, opt);
    const auto& tr = out.fusion.trace;
    for (std::size_t l = 0; l < tr.layer_states.size(); ++l) {
      const Tensor& pre = tr.prenorm_states[l];
      const Tensor& post = tr.layer_states[l];
      for (std::size_t node = 0; node < pre.numel() / d; ++node) {
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += pre[node * d + c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (pre[node * d + c] - mu) * (pre[node * d + c] - mu);
        var /= static_cast<double>(d);
        double pm = 0.0, ms = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          pm += post[node * d + c];
          ms += post[node * d + c] * post[node * d + c];
        }
        pm /= static_cast<double>(d);
        ms /= static_cast<double>(d);
        const double want = var / (var + fc.layer_norm_eps);
        max_mean = std::max(max_mean, std::abs(pm));
        max_ms = std::max(max_ms, std::abs(ms - want));
        detail::observe(rep, std::max(std::abs(pm), std::abs(ms - want)));
        if (var > 1e-12 && !(ms > 0.0 && ms < 1.0)) ++range_failures;
        ++nodes;
      }
    }
  }
  rep.violations += range_failures;
  if (range_failures > 0) rep.max_violation = std::max(rep.max_violation, 1.0);
  rep.details = {{"nodes_checked", nodes}, {"max_abs_mean", max_mean},
                 {"max_mean_square_error", max_ms}, {"range_failures", range_failures}};
  rep.finalize();
  return rep;
}

// ------------------------------------------------------------ InfoNCE vs MI

struct MiCertConfig {
  std::vector<double> correlations = {0.0, 0.5, 0.9};
  std::vector<std::size_t> batch_sizes = {2, 8, 32};
  std::size_t dim = 1;
  std::size_t seeds = 5;
  std::uint64_t base_seed = 17;
  std::size_t train_steps = 400;
  std::size_t eval_batches = 400;
  double learning_rate = 0.05;
  double tolerance = 0.1;        // nat above the true MI
  double monotone_slack = 0.05;  // nat, on the seed-averaged bound
};

struct MiCell {
  double r = 0.0;
  std::size_t K = 0;
  double true_mi = 0.0;
  std::vector<double> bounds;  // per seed
  double mean_bound = 0.0;
  double inv_tau = 0.0;        // learned, first seed
};

// Projection-free cosine critic with a learned inverse temperature,
// trained on fresh batches of K pairs and evaluated on held-out batches.
inline MiCell estimate_infonce_bound(double r, std::size_t K, std::size_t dim,
                                     std::uint64_t seed, const MiCertConfig& cfg) {
  MiCell cell;
  cell.r = r;
  cell.K = K;
  GaussianPairSpec gs{dim, r, seed};
  cell.true_mi = gs.true_mi();
  Tensor inv_tau = Tensor::parameter({1}, {1.0});
  Optimizer opt({inv_tau}, OptimizerKind::kAdam, cfg.learning_rate);
  const Mask presence(K, 0);
  auto batch_loss = [&](const GaussianPairs& g, std::size_t i) {
    const std::size_t off = i * K * dim;
    std::vector<double> h(g.h.begin() + off, g.h.begin() + off + K * dim);
    std::vector<double> z(g.z.begin() + off, g.z.begin() + off + K * dim);
    return infonce_loss(Tensor::from({K, 1, dim}, std::move(h)),
                        Tensor::from({K, dim}, std::move(z)), presence, inv_tau);
  };
  const GaussianPairs train = generate_gaussian_pairs(gs, cfg.train_steps * K);
  for (std::size_t step = 0; step < cfg.train_steps; ++step) {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(batch_loss(train, step));
    opt.step(0.0);
    opt.zero_grad();
  }
  GaussianPairSpec held = gs;
  held.seed = seed ^ 0x5bd1e995ULL;
  const GaussianPairs eval = generate_gaussian_pairs(held, cfg.eval_batches * K);
  double loss = 0.0;
  for (std::size_t i = 0; i < cfg.eval_batches; ++i) loss += batch_loss(eval, i).item();
  loss /= static_cast<double>(cfg.eval_batches);
  cell.bounds.push_back(mi_lower_bound(loss, K));
  cell.mean_bound = cell.bounds.back();
  cell.inv_tau = inv_tau[0];
  return cell;
}

inline CertificationReport certify_infonce_mi_bound(const MiCertConfig& cfg,
                                                    std::vector<MiCell>* cells_out = nullptr) {
  CertificationReport rep;
  rep.proposition = "infonce_mi_bound";
  rep.tolerance = 0.0;
  rep.config = {{"correlations", cfg.correlations}, {"batch_sizes", cfg.batch_sizes},
                {"dim", cfg.dim}, {"seeds", cfg.seeds}, {"base_seed", cfg.base_seed},
                {"train_steps", cfg.train_steps}, {"eval_batches", cfg.eval_batches},
                {"tolerance_nat", cfg.tolerance}, {"monotone_slack_nat", cfg.monotone_slack}};
  std::vector<MiCell> cells;
  json grid = json::array();
  double worst_upper = -std::numeric_limits<double>::infinity();
  double worst_monotone = -std::numeric_limits<double>::infinity();
  for (double r : cfg.correlations) {
    std::vector<double> means;
    for (std::size_t K : cfg.batch_sizes) {
      MiCell cell;
      for (std::size_t s = 0; s < cfg.seeds; ++s) {
        const std::uint64_t seed = cfg.base_seed + 1000 * s + 7 * K;
        MiCell one = estimate_infonce_bound(r, K, cfg.dim, seed, cfg);
        if (s == 0) cell = one;
        else cell.bounds.push_back(one.bounds.front());
      }
      cell.mean_bound = std::accumulate(cell.bounds.begin(), cell.bounds.end(), 0.0) /
                        static_cast<double>(cell.bounds.size());
      for (double b : cell.bounds) {
        const double v = b - (cell.true_mi + cfg.tolerance);
        worst_upper = std::max(worst_upper, v);
        detail::observe(rep, v);
        rep.bounds.push_back(b);
      }
      grid.push_back({{"r", r}, {"K", cell.K}, {"true_mi", cell.true_mi},
                      {"bounds", cell.bounds}, {"mean_bound", cell.mean_bound},
                      {"learned_inv_tau", cell.inv_tau}});
      means.push_back(cell.mean_bound);
      cells.push_back(cell);
    }
    // Seed-averaged bound should not decrease with K (beyond the slack).
    for (std::size_t i = 1; i < means.size(); ++i) {
      const double v = (means[i - 1] - means[i]) - cfg.monotone_slack;
      worst_monotone = std::max(worst_monotone, v);
      if (v > 0.0) ++rep.violations;
    }
  }
  rep.max_violation = std::max(worst_upper, worst_monotone);
  rep.details = {{"grid", grid},
                 {"worst_upper_margin", worst_upper},
                 {"worst_monotone_margin", worst_monotone}};
  rep.finalize();
  if (cells_out) *cells_out = std::move(cells);
  return rep;
}

}  // namespace clarga
