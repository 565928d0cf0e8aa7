#include <gtest/gtest.h>

#include <cmath>

#include "clarga/datagen.hpp"
#include "clarga/diagnostics.hpp"
#include "clarga/experiment.hpp"
#include "clarga/verify.hpp"

namespace clarga {
namespace {

const SynthTask& task() {
  static const SynthTask t = [] {
    SynthTaskSpec s;
    s.N = 200;
    s.input_dims = {4, 3, 5};
    s.latent_dim = 4;
    s.missing_rate = {0.3, 0.3, 0.3};
    s.seed = 31;
    return generate_classification(s);
  }();
  return t;
}

ModelConfig small_model(std::size_t D = 2) {
  ModelConfig m;
  m.fusion.d = 8;
  m.fusion.d_k = 4;
  m.fusion.H = 2;
  m.fusion.D = D;
  m.encoder_hidden = {8};
  m.head_hidden = {8};
  return model_for_data(m, task().train);
}

TEST(DeepSets, RecoveryPropertiesHold) {
  DeepSetsCertConfig c;
  c.modality_counts = {2, 3, 4};
  c.probes = 10;
  const auto rep = certify_deepsets_recovery(c);
  EXPECT_TRUE(rep.passed) << report_to_json(rep).dump(2);
  EXPECT_EQ(rep.violations, 0u);
  EXPECT_EQ(report_to_json(rep)["version"], 1);
}

TEST(Lipschitz, ZeroInputsGiveExactEquality) {
  Dataset zeros = task().test;
  for (auto& s : zeros.samples)
    for (auto& x : s.inputs)
      if (x) std::fill(x->begin(), x->end(), 0.0);
  Rng rng(1);
  const Model m = Model::create(small_model(), rng);
  LipschitzCertConfig c;
  c.trials = 100;
  const auto rep = certify_lipschitz_missing_modality(m, zeros, c);
  // masked node equals f_k(0) = f_k(x_k), both sides are zero
  EXPECT_EQ(rep.max_violation, 0.0);
  EXPECT_TRUE(rep.passed);
  for (double b : rep.bounds) EXPECT_EQ(b, 0.0);
}

TEST(Lipschitz, HoldsWithoutMessagePassing) {
  Rng rng(2);
  const Model m = Model::create(small_model(0), rng);
  LipschitzCertConfig c;
  c.trials = 300;
  const auto rep = certify_lipschitz_missing_modality(m, task().test, c);
  EXPECT_TRUE(rep.passed) << report_to_json(rep).dump(2);
  EXPECT_EQ(rep.violations, 0u);
}

TEST(Lipschitz, TrainedModeIsReportOnly) {
  Rng rng(3);
  const Model m = Model::create(small_model(), rng);
  LipschitzCertConfig c;
  c.trials = 50;
  c.certification_mode = false;
  const auto rep = certify_lipschitz_missing_modality(m, task().test, c);
  EXPECT_FALSE(rep.asserted);
  EXPECT_TRUE(rep.passed);
  EXPECT_EQ(rep.proposition, "lipschitz_missing_modality_trained");
  EXPECT_EQ(rep.bounds.size(), 50u);
}

TEST(Lipschitz, EarlyFusionMeanRejected) {
  ModelConfig cfg = small_model();
  cfg.fusion.early_fusion_mean = true;
  Rng rng(4);
  const Model m = Model::create(cfg, rng);
  EXPECT_THROW(certify_lipschitz_missing_modality(m, task().test, {}), ConfigError);
}

TEST(LayerNormIdentities, HoldAtDepthThree) {
  Rng rng(5);
  const Model m = Model::create(small_model(3), rng);
  LayerNormCertConfig c;
  c.batches = 20;
  const auto rep = certify_layernorm_noncollapse(m, task().train, c);
  EXPECT_TRUE(rep.passed) << report_to_json(rep).dump(2);
  EXPECT_LE(rep.max_violation, 1e-9);
}

TEST(LayerNormIdentities, NoResidualRejected) {
  ModelConfig cfg = small_model();
  cfg.fusion.use_residual = false;
  Rng rng(6);
  const Model m = Model::create(cfg, rng);
  EXPECT_THROW(certify_layernorm_noncollapse(m, task().train, {}), ConfigError);
}

TEST(MiBound, IndependentPairsGiveNoInformation) {
  MiCertConfig c;
  const MiCell cell = estimate_infonce_bound(0.0, 8, 1, 41, c);
  EXPECT_EQ(cell.true_mi, 0.0);
  EXPECT_LE(cell.bounds.front(), 0.05);
}

TEST(MiBound, StronglyCorrelatedPairsStayBelowTruth) {
  MiCertConfig c;
  const MiCell cell = estimate_infonce_bound(0.9, 32, 1, 42, c);
  EXPECT_NEAR(cell.true_mi, 0.830, 5e-4);
  EXPECT_LE(cell.bounds.front(), 0.93);
  EXPECT_GT(cell.bounds.front(), 0.0);
}

TEST(MiBound, SmallGridCertifies) {
  MiCertConfig c;
  c.correlations = {0.5};
  c.batch_sizes = {2, 8};
  c.seeds = 2;
  c.train_steps = 200;
  c.eval_batches = 200;
  std::vector<MiCell> cells;
  const auto rep = certify_infonce_mi_bound(c, &cells);
  EXPECT_EQ(cells.size(), 2u);
  EXPECT_TRUE(rep.passed) << report_to_json(rep).dump(2);
}

TEST(EffectiveDimension, ZeroFeatures) {
  const auto e = compute_effective_dimension(Tensor::zeros({5, 3}));
  EXPECT_EQ(e.mean_square_norm, 0.0);
  EXPECT_EQ(e.trace, 0.0);
}

TEST(EffectiveDimension, OneHotRowsGiveOne) {
  std::vector<double> v(6 * 4, 0.0);
  for (std::size_t i = 0; i < 6; ++i) v[i * 4 + i % 4] = 1.0;
  const auto e = compute_effective_dimension(Tensor::from({6, 4}, v));
  EXPECT_EQ(e.mean_square_norm, 1.0);
  EXPECT_NEAR(e.trace, 1.0, 1e-15);
}

TEST(EffectiveDimension, StreamingEqualsTraceOnRandomFeatures) {
  Rng rng(7);
  std::vector<double> v(100 * 8);
  for (auto& x : v) x = rng.normal() * 3.0;
  const Tensor f = Tensor::from({100, 8}, v);
  const auto e = compute_effective_dimension(f);
  EXPECT_NEAR(e.mean_square_norm, e.trace, 1e-9);
  EffectiveDimensionAccumulator acc;
  acc.add(Tensor::from({30, 8}, std::vector<double>(v.begin(), v.begin() + 240)));
  acc.add(Tensor::from({70, 8}, std::vector<double>(v.begin() + 240, v.end())));
  EXPECT_NEAR(acc.value(), e.trace, 1e-9);
  EXPECT_EQ(acc.count(), 100u);
}

TEST(EffectiveDimension, EmptyAccumulatorIsContractError) {
  EffectiveDimensionAccumulator acc;
  EXPECT_THROW(acc.value(), ContractError);
}

TEST(Report, FinalizeRespectsAssertion) {
  CertificationReport r;
  r.max_violation = 1.0;
  r.tolerance = 0.5;
  r.finalize();
  EXPECT_FALSE(r.passed);
  r.asserted = false;
  r.finalize();
  EXPECT_TRUE(r.passed);
}

}  // namespace
}  // namespace clarga
