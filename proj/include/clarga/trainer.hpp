#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clarga/config.hpp"
#include "clarga/datagen.hpp"
#include "clarga/diagnostics.hpp"
#include "clarga/errors.hpp"
#include "clarga/model.hpp"
#include "clarga/objective.hpp"

namespace clarga {

using nlohmann::json;

enum class OptimizerKind { kSgd, kAdam };
enum class Ablation { kNone, kUniformAttention, kNoResidual, kNoContrastive, kEarlyFusionMean };
enum class Baseline { kNone, kEarlyConcat, kLateAverage };

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kUniformAttention: return "uniform_attention";
    case Ablation::kNoResidual: return "no_residual";
    case Ablation::kNoContrastive: return "no_contrastive";
    case Ablation::kEarlyFusionMean: return "early_fusion_mean";
  }
  return "?";
}

inline const char* baseline_name(Baseline b) {
  switch (b) {
    case Baseline::kNone: return "none";
    case Baseline::kEarlyConcat: return "early_concat";
    case Baseline::kLateAverage: return "late_average";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  for (auto a : {Ablation::kNone, Ablation::kUniformAttention, Ablation::kNoResidual,
                 Ablation::kNoContrastive, Ablation::kEarlyFusionMean})
    if (s == ablation_name(a)) return a;
  throw ConfigError("unknown ablation '" + s + "'");
}

inline Baseline parse_baseline(const std::string& s) {
  for (auto b : {Baseline::kNone, Baseline::kEarlyConcat, Baseline::kLateAverage})
    if (s == baseline_name(b)) return b;
  throw ConfigError("unknown baseline '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double lambda_c = 0.5;
  double tau = 0.1;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::kNone;
  Baseline baseline = Baseline::kNone;
  double grad_clip = 5.0;          // global norm; 0 disables
  double train_drop_rate = 0.0;    // train-time modality dropping
  bool nce_on_encoder_outputs = false;

  void validate() const {
    if (ablation != Ablation::kNone && baseline != Baseline::kNone) {
      throw ConfigError("train: ablation and baseline cannot both be set");
    }
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
    if (!(learning_rate >= 0.0)) throw ConfigError("train: learning_rate must be >= 0");
    if (!(lambda_c >= 0.0)) throw ConfigError("train: lambda_c must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("train: tau must be positive");
    if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be >= 0");
    if (!(train_drop_rate >= 0.0 && train_drop_rate < 1.0)) {
      throw ConfigError("train: train_drop_rate must lie in [0, 1)");
    }
  }

  double effective_lambda() const {
    if (ablation == Ablation::kNoContrastive || baseline != Baseline::kNone) return 0.0;
    return lambda_c;
  }

  // Model configuration implied by the ablation/baseline selectors.
  ModelConfig apply(ModelConfig m) const {
    switch (ablation) {
      case Ablation::kUniformAttention: m.fusion.uniform_attention = true; break;
      case Ablation::kNoResidual: m.fusion.use_residual = false; break;
      case Ablation::kEarlyFusionMean: m.fusion.early_fusion_mean = true; break;
      default: break;
    }
    if (baseline == Baseline::kEarlyConcat) m.arch = Architecture::kEarlyConcat;
    if (baseline == Baseline::kLateAverage) m.arch = Architecture::kLateAverage;
    return m;
  }
};

inline json train_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"optimizer", c.optimizer == OptimizerKind::kAdam ? "adam" : "sgd"},
              {"lambda_c", c.lambda_c},
              {"tau", c.tau},
              {"seed", c.seed},
              {"ablation", ablation_name(c.ablation)},
              {"baseline", baseline_name(c.baseline)},
              {"grad_clip", c.grad_clip},
              {"train_drop_rate", c.train_drop_rate},
              {"nce_on_encoder_outputs", c.nce_on_encoder_outputs}};
}

inline TrainConfig parse_train(const json& j, TrainConfig c = {}) {
  ObjectReader r(j, "train");
  std::string opt = c.optimizer == OptimizerKind::kAdam ? "adam" : "sgd";
  std::string abl = ablation_name(c.ablation), base = baseline_name(c.baseline);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("optimizer", opt);
  r.get("lambda_c", c.lambda_c);
  r.get("tau", c.tau);
  r.get("seed", c.seed);
  r.get("ablation", abl);
  r.get("baseline", base);
  r.get("grad_clip", c.grad_clip);
  r.get("train_drop_rate", c.train_drop_rate);
  r.get("nce_on_encoder_outputs", c.nce_on_encoder_outputs);
  r.finish();
  if (opt != "adam" && opt != "sgd") throw ConfigError("train.optimizer must be adam or sgd");
  c.optimizer = opt == "adam" ? OptimizerKind::kAdam : OptimizerKind::kSgd;
  c.ablation = parse_ablation(abl);
  c.baseline = parse_baseline(base);
  c.validate();
  return c;
}

// Plain SGD or Adam over a fixed parameter list, with optional global-norm
// gradient clipping.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerKind kind, double lr)
      : params_(std::move(params)), kind_(kind), lr_(lr) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (double g : p.grad()) s += g * g;
    return std::sqrt(s);
  }

  // Returns the pre-clipping gradient norm.
  double step(double clip) {
    const double norm = grad_norm();
    if (!std::isfinite(norm)) throw NumericalError("optimizer: non-finite gradient norm");
    const double factor = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      const auto g = p.grad();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k] * factor;
        if (kind_ == OptimizerKind::kSgd) {
          w[k] -= lr_ * gk;
          continue;
        }
        m_[i][k] = b1 * m_[i][k] + (1.0 - b1) * gk;
        v_[i][k] = b2 * v_[i][k] + (1.0 - b2) * gk * gk;
        w[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps);
      }
    }
    return norm;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor> params_;
  OptimizerKind kind_;
  double lr_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct EvalResult {
  double accuracy = 0.0;  // rounded-class accuracy for regression
  double mae = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // samples left with no modality
};

// Copy of `batch` with modality k marked missing for every sample; samples
// whose only modality was k are dropped.
inline ModalityBatch drop_modality(const ModalityBatch& batch, std::size_t k,
                                   std::size_t* skipped = nullptr) {
  ModalityBatch out;
  out.num_modalities = batch.num_modalities;
  std::size_t skip = 0;
  for (Sample s : batch.samples) {
    s.missing[k] = 1;
    s.inputs[k].reset();
    if (s.present_count() == 0) {
      ++skip;
      continue;
    }
    out.samples.push_back(std::move(s));
  }
  if (skipped) *skipped = skip;
  return out;
}

inline constexpr std::size_t kEvalChunk = 512;

inline EvalResult evaluate(const Model& model, const Dataset& data,
                           std::optional<std::size_t> drop = std::nullopt) {
  ModalityBatch all = data.all();
  EvalResult r;
  if (drop) all = drop_modality(all, *drop, &r.skipped);
  std::size_t hit = 0;
  double abs_err = 0.0;
  for (std::size_t begin = 0; begin < all.size(); begin += kEvalChunk) {
    ModalityBatch chunk;
    chunk.num_modalities = all.num_modalities;
    const std::size_t end = std::min(all.size(), begin + kEvalChunk);
    chunk.samples.assign(all.samples.begin() + begin, all.samples.begin() + end);
    const auto out = model.forward(chunk);
    const auto pred = model.predict(out);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const Sample& s = chunk.samples[i];
      if (model.config().task == TaskKind::kClassification) {
        hit += static_cast<std::size_t>(pred[i]) == s.label ? 1 : 0;
        abs_err += std::abs(pred[i] - static_cast<double>(s.label));
      } else {
        hit += std::llround(pred[i]) == static_cast<long long>(s.label) ? 1 : 0;
        abs_err += std::abs(pred[i] - s.target);
      }
    }
  }
  r.evaluated = all.size();
  if (r.evaluated > 0) {
    r.accuracy = static_cast<double>(hit) / static_cast<double>(r.evaluated);
    r.mae = abs_err / static_cast<double>(r.evaluated);
  }
  return r;
}

// Eval-mode head-input features over a whole split, [n x F].
inline Tensor collect_features(const Model& model, const Dataset& data) {
  std::vector<double> rows;
  std::size_t F = 0;
  const ModalityBatch all = data.all();
  for (std::size_t begin = 0; begin < all.size(); begin += kEvalChunk) {
    ModalityBatch chunk;
    chunk.num_modalities = all.num_modalities;
    chunk.samples.assign(all.samples.begin() + begin,
                         all.samples.begin() + std::min(all.size(), begin + kEvalChunk));
    const Tensor f = model.forward(chunk).features;
    F = f.dim(1);
    rows.insert(rows.end(), f.data().begin(), f.data().end());
  }
  return Tensor::from({all.size(), F}, std::move(rows));
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double sup_loss = 0.0;  // means over the epoch's steps
  double nce_loss = 0.0;
  double total = 0.0;
  double d_eff = 0.0;
  double val_accuracy = 0.0;
  double val_mae = 0.0;
};

struct RunReport {
  std::vector<EpochMetrics> epochs;
  double val_accuracy = 0.0;
  double val_mae = 0.0;
  double test_accuracy = 0.0;
  double test_mae = 0.0;
  std::string checkpoint_path;
  json config;
};

inline json report_to_json(const RunReport& r) {
  json ep = json::array();
  for (const auto& e : r.epochs)
    ep.push_back({{"epoch", e.epoch},
                  {"sup_loss", e.sup_loss},
                  {"nce_loss", e.nce_loss},
                  {"total", e.total},
                  {"d_eff", e.d_eff},
                  {"val_accuracy", e.val_accuracy},
                  {"val_mae", e.val_mae}});
  return json{{"epochs", ep},
              {"val_accuracy", r.val_accuracy},
              {"val_mae", r.val_mae},
              {"test_accuracy", r.test_accuracy},
              {"test_mae", r.test_mae},
              {"checkpoint", r.checkpoint_path},
              {"config", r.config},
              {"defaults_note",
               "epochs, batch size, learning rate, optimizer, lambda_c and tau are "
               "implementation defaults; the method description does not fix them"}};
}

struct EpochEnd {
  std::size_t epoch = 0;
  const Model* model = nullptr;
  const Tensor* val_features = nullptr;  // [n x F], eval mode
  double d_eff = 0.0;                    // streaming value
};

struct TrainHooks {
  std::ostream* metrics = nullptr;  // JSON lines
  std::function<void(const EpochEnd&)> on_epoch_end;
  std::function<void(const Model&, const ModelOutput&, const ModalityBatch&)> on_step;
};

struct TrainResult {
  Model model;
  RunReport report;
};

// InfoNCE over the rows it is defined on. Under the no-residual ablation a
// node with no eligible source comes out exactly zero, and so can the fused
// vector of a sample with one present modality; cosine scores are undefined
// there, so such anchors and samples sit out this step's contrastive term.
// Returns an undefined tensor when fewer than two samples remain.
inline Tensor contrastive_term(const Tensor& anchors, const Tensor& z, const Mask& presence,
                               double tau) {
  const std::size_t B = anchors.dim(0), M = anchors.dim(1), d = anchors.dim(2);
  auto zero_row = [](const Tensor& t, std::size_t row, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
      if (t[row * n + i] != 0.0) return false;
    return true;
  };
  std::vector<std::size_t> keep;
  Mask pres;
  for (std::size_t b = 0; b < B; ++b) {
    if (zero_row(z, b, d)) continue;
    keep.push_back(b);
    for (std::size_t m = 0; m < M; ++m)
      pres.push_back(presence[b * M + m] || zero_row(anchors, b * M + m, d) ? 1 : 0);
  }
  if (keep.size() < 2 || std::find(pres.begin(), pres.end(), 0) == pres.end()) return {};
  if (keep.size() == B) return infonce_loss(anchors, z, pres, tau);
  std::vector<std::pair<std::size_t, std::size_t>> rows;
  for (auto b : keep) rows.emplace_back(0, b);
  const Tensor flat = reshape(anchors, {B, M * d});
  return infonce_loss(reshape(gather_rows({flat}, rows), {keep.size(), M, d}),
                      gather_rows({z}, rows), pres, tau);
}

// Randomly marks present modalities missing at `rate`, keeping at least one.
inline void apply_train_drop(ModalityBatch& batch, double rate, Rng& rng) {
  for (auto& s : batch.samples)
    for (std::size_t m = 0; m < batch.num_modalities; ++m) {
      if (s.missing[m] || s.present_count() <= 1) continue;
      if (rng.bernoulli(rate)) {
        s.missing[m] = 1;
        s.inputs[m].reset();
      }
    }
}

inline TrainResult train(const ModelConfig& base_model, const Dataset& train_data,
                         const Dataset& val_data, const Dataset* test_data,
                         const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_data.size() < 2 || val_data.size() == 0) {
    throw DataError("train: need at least 2 training samples and a nonempty val split");
  }
  const ModelConfig mcfg = cfg.apply(base_model);
  Rng root(cfg.seed);
  Rng init_rng = root.fork();
  Rng order_rng = root.fork();
  Rng dropout_rng = root.fork();
  Rng drop_rng = root.fork();
  TrainResult result{Model::create(mcfg, init_rng), {}};
  Model& model = result.model;
  RunReport& report = result.report;
  report.config = {{"model", model_to_json(mcfg)}, {"train", train_to_json(cfg)}};
  Optimizer opt(model.parameters(), cfg.optimizer, cfg.learning_rate);
  const double lambda = cfg.effective_lambda();
  const bool use_nce = lambda > 0.0 && mcfg.arch == Architecture::kClarga;

  std::vector<std::size_t> order(train_data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    EpochMetrics em;
    em.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      if (end - begin < 2) continue;  // batch negatives need two samples
      ModalityBatch batch = train_data.batch(order, begin, end);
      if (cfg.train_drop_rate > 0.0) apply_train_drop(batch, cfg.train_drop_rate, drop_rng);
      const Targets targets = targets_of(batch, mcfg.task);

      Tape tape;
      Tape::Scope scope(tape);
      ForwardOptions fo;
      fo.train = true;
      fo.rng = &dropout_rng;
      const ModelOutput out = model.forward(batch, fo);
      const Tensor sup = model_supervised_loss(model, out, batch, targets);
      Tensor nce;
      if (use_nce) {
        const Tensor& anchors =
            cfg.nce_on_encoder_outputs ? out.encoded.nodes : out.fusion.final_states;
        nce = contrastive_term(anchors, out.fusion.z, out.encoded.presence, cfg.tau);
      }
      const HybridLoss loss = hybrid_loss(sup, nce, lambda, cfg.tau, batch.size());
      tape.backward(loss.total);
      if (hooks.on_step) hooks.on_step(model, out, batch);
      opt.step(cfg.grad_clip);
      opt.zero_grad();

      ++step;
      ++steps;
      em.sup_loss += loss.breakdown.sup_loss;
      em.nce_loss += loss.breakdown.nce_loss;
      em.total += loss.breakdown.total;
      if (hooks.metrics) {
        *hooks.metrics << json{{"epoch", epoch},
                               {"step", step},
                               {"sup_loss", loss.breakdown.sup_loss},
                               {"nce_loss", loss.breakdown.nce_loss},
                               {"total", loss.breakdown.total}}
                              .dump()
                       << "\n";
      }
    }
    if (steps > 0) {
      em.sup_loss /= static_cast<double>(steps);
      em.nce_loss /= static_cast<double>(steps);
      em.total /= static_cast<double>(steps);
    }
    const Tensor features = collect_features(model, val_data);
    EffectiveDimensionAccumulator acc;
    for (std::size_t begin = 0; begin < features.dim(0); begin += kEvalChunk) {
      const std::size_t end = std::min(features.dim(0), begin + kEvalChunk);
      const std::size_t F = features.dim(1);
      acc.add(Tensor::from({end - begin, F},
                           std::vector<double>(features.data().begin() + begin * F,
                                               features.data().begin() + end * F)));
    }
    em.d_eff = acc.value();
    const EvalResult val = evaluate(model, val_data);
    em.val_accuracy = val.accuracy;
    em.val_mae = val.mae;
    report.epochs.push_back(em);
    if (hooks.metrics) {
      *hooks.metrics << json{{"epoch", epoch},
                             {"step", step},
                             {"sup_loss", em.sup_loss},
                             {"nce_loss", em.nce_loss},
                             {"total", em.total},
                             {"d_eff", em.d_eff},
                             {"val_accuracy", em.val_accuracy}}
                            .dump()
                     << "\n";
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end({epoch, &model, &features, em.d_eff});
  }
  report.val_accuracy = report.epochs.back().val_accuracy;
  report.val_mae = report.epochs.back().val_mae;
  if (test_data != nullptr && test_data->size() > 0) {
    const EvalResult t = evaluate(model, *test_data);
    report.test_accuracy = t.accuracy;
    report.test_mae = t.mae;
  }
  return result;
}

// ------------------------------------------------------------------ ablations

struct Variant {
  std::string label;  // row name in the comparison table
  Ablation ablation = Ablation::kNone;
  Baseline baseline = Baseline::kNone;
};

inline std::vector<Variant> ablation_variants() {
  return {{"Early Fusion", Ablation::kNone, Baseline::kEarlyConcat},
          {"Late Fusion", Ablation::kNone, Baseline::kLateAverage},
          {"Uniform Attention", Ablation::kUniformAttention, Baseline::kNone},
          {"No Residual Connection", Ablation::kNoResidual, Baseline::kNone},
          {"No Contrastive Alignment", Ablation::kNoContrastive, Baseline::kNone},
          {"Early Fusion (Mean)", Ablation::kEarlyFusionMean, Baseline::kNone},
          {"CLARGA", Ablation::kNone, Baseline::kNone}};
}

struct AblationRow {
  std::string label;
  std::vector<double> val_accuracy;  // per seed
  std::vector<double> val_mae;
  double mean_accuracy = 0.0;
  double mean_mae = 0.0;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  const AblationRow& row(const std::string& label) const {
    for (const auto& r : rows)
      if (r.label == label) return r;
    throw ContractError("no ablation row '" + label + "'");
  }
};

// Trains every variant under each seed on the same data. The seed replaces
// base_cfg.seed, so all variants of one seed share initial RNG streams.
inline AblationTable run_ablation_suite(const ModelConfig& model_cfg, const SynthTask& task,
                                        TrainConfig base_cfg,
                                        const std::vector<std::uint64_t>& seeds,
                                        const std::vector<Variant>& variants = ablation_variants()) {
  AblationTable table;
  table.seeds = seeds;
  for (const auto& v : variants) {
    AblationRow row;
    row.label = v.label;
    for (auto seed : seeds) {
      TrainConfig c = base_cfg;
      c.seed = seed;
      c.ablation = v.ablation;
      c.baseline = v.baseline;
      const auto r = train(model_cfg, task.train, task.val, nullptr, c);
      row.val_accuracy.push_back(r.report.val_accuracy);
      row.val_mae.push_back(r.report.val_mae);
    }
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      row.mean_accuracy += row.val_accuracy[i] / static_cast<double>(seeds.size());
      row.mean_mae += row.val_mae[i] / static_cast<double>(seeds.size());
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ----------------------------------------------------------------- robustness

struct RobustnessRow {
  std::string model;
  std::string scenario;  // "all" or "drop modality k"
  std::optional<std::size_t> dropped;
  double accuracy = 0.0;
  double drop_pp = 0.0;  // accuracy change vs "all", in percentage points
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

// Scenario "all" then one scenario per dropped modality: 1 + M rows.
inline std::vector<RobustnessRow> run_robustness(const std::string& label, const Model& model,
                                                 const Dataset& data) {
  std::vector<RobustnessRow> rows;
  const EvalResult full = evaluate(model, data);
  rows.push_back({label, "all", std::nullopt, full.accuracy, 0.0, full.evaluated, 0});
  for (std::size_t k = 0; k < data.M(); ++k) {
    const EvalResult r = evaluate(model, data, k);
    rows.push_back({label, "drop modality " + std::to_string(k), k, r.accuracy,
                    100.0 * (r.accuracy - full.accuracy), r.evaluated, r.skipped});
  }
  return rows;
}

}  // namespace clarga
