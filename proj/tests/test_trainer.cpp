#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "clarga/checkpoint.hpp"
#include "clarga/datagen.hpp"
#include "clarga/experiment.hpp"
#include "clarga/trainer.hpp"

namespace clarga {
namespace {

namespace fs = std::filesystem;

const SynthTask& task() {
  static const SynthTask t = [] {
    SynthTaskSpec s;
    s.N = 300;
    s.input_dims = {4, 3, 5};
    s.latent_dim = 4;
    s.missing_rate = {0.2, 0.2, 0.2};
    s.seed = 21;
    return generate_classification(s);
  }();
  return t;
}

ModelConfig small_model() {
  ModelConfig m;
  m.fusion.d = 8;
  m.fusion.d_k = 4;
  m.fusion.H = 2;
  m.fusion.D = 2;
  m.encoder_hidden = {8};
  m.head_hidden = {8};
  return model_for_data(m, task().train);
}

TrainConfig short_run(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.learning_rate = 1e-2;
  return c;
}

std::string temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "clarga_test_trainer";
  fs::create_directories(dir);
  return (dir / name).string();
}

std::vector<std::vector<double>> snapshot(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.named_parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

TEST(TrainConfig, RejectsConflictsAndBadValues) {
  TrainConfig c;
  c.ablation = Ablation::kNoResidual;
  c.baseline = Baseline::kEarlyConcat;
  EXPECT_THROW(c.validate(), ConfigError);
  TrainConfig d;
  d.batch_size = 1;
  EXPECT_THROW(d.validate(), ConfigError);
  TrainConfig e;
  e.tau = 0.0;
  EXPECT_THROW(e.validate(), ConfigError);
}

TEST(TrainConfig, UnknownKeyIsConfigError) {
  try {
    parse_train(json{{"epochz", 3}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochz"), std::string::npos);
  }
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = short_run(7);
  c.ablation = Ablation::kUniformAttention;
  c.tau = 0.3;
  const TrainConfig back = parse_train(train_to_json(c));
  EXPECT_EQ(train_to_json(back), train_to_json(c));
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  TrainConfig c = short_run(1);
  c.learning_rate = 0.0;
  Rng rng(c.seed);
  Rng init = rng.fork();
  const Model fresh = Model::create(c.apply(small_model()), init);
  std::ostringstream metrics;
  TrainHooks hooks;
  hooks.metrics = &metrics;
  const auto r = train(small_model(), task().train, task().val, nullptr, c, hooks);
  EXPECT_EQ(snapshot(r.model), snapshot(fresh));
  // 210 samples / 32 per batch = 7 steps, plus one epoch line
  std::size_t lines = 0;
  std::istringstream is(metrics.str());
  for (std::string line; std::getline(is, line);) {
    const json j = json::parse(line);
    EXPECT_TRUE(j.contains("total"));
    ++lines;
  }
  EXPECT_EQ(lines, 8u);
}

TEST(Train, SameSeedGivesIdenticalMetricStream) {
  auto run = [] {
    std::ostringstream os;
    TrainHooks hooks;
    hooks.metrics = &os;
    train(small_model(), task().train, task().val, &task().test, short_run(), hooks);
    return os.str();
  };
  const std::string a = run();
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, run());
}

TEST(Train, LossDecreasesOverTraining) {
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig c = short_run(8);
    c.seed = seed;
    const auto r = train(small_model(), task().train, task().val, nullptr, c);
    EXPECT_LE(r.report.epochs.back().total, r.report.epochs.front().total) << "seed " << seed;
  }
}

TEST(Train, StreamingEffectiveDimensionMatchesTrace) {
  std::size_t checked = 0;
  TrainHooks hooks;
  hooks.on_epoch_end = [&](const EpochEnd& e) {
    const auto brute = compute_effective_dimension(*e.val_features);
    EXPECT_NEAR(e.d_eff, brute.trace, 1e-9 * std::max(1.0, brute.trace));
    ++checked;
  };
  train(small_model(), task().train, task().val, nullptr, short_run(3), hooks);
  EXPECT_EQ(checked, 3u);
}

TEST(Train, NoContrastiveVariantReportsZeroNce) {
  TrainConfig c = short_run();
  c.ablation = Ablation::kNoContrastive;
  const auto r = train(small_model(), task().train, task().val, nullptr, c);
  for (const auto& e : r.report.epochs) {
    EXPECT_EQ(e.nce_loss, 0.0);
    EXPECT_EQ(e.total, e.sup_loss);
  }
  const auto full = train(small_model(), task().train, task().val, nullptr, short_run());
  EXPECT_GT(full.report.epochs.front().nce_loss, 0.0);
}

TEST(Train, TooFewSamplesIsDataError) {
  Dataset tiny = task().train;
  tiny.samples.resize(1);
  EXPECT_THROW(train(small_model(), tiny, task().val, nullptr, short_run()), DataError);
}

TEST(ContrastiveTerm, ZeroRowsSitOut) {
  // sample 2 has a zero fused vector, sample 0 a zero anchor in slot 1
  const Tensor anchors = Tensor::from({3, 2, 2}, {1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 1});
  const Tensor z = Tensor::from({3, 2}, {1, 0, 0, 1, 0, 0});
  const Mask pres(6, 0);
  const Tensor kept = Tensor::from({2, 2, 2}, {1, 0, 0, 0, 0, 1, 1, 1});
  const Tensor want = infonce_loss(kept, Tensor::from({2, 2}, {1, 0, 0, 1}), Mask{0, 1, 0, 0}, 0.5);
  EXPECT_NEAR(contrastive_term(anchors, z, pres, 0.5).item(), want.item(), 1e-15);
  EXPECT_FALSE(contrastive_term(anchors, Tensor::from({3, 2}, {1, 0, 0, 0, 0, 0}), pres, 0.5).defined());
}

TEST(Variants, UniformAttentionHasConstantOffDiagonal) {
  TrainConfig c;
  c.ablation = Ablation::kUniformAttention;
  Rng rng(4);
  const Model m = Model::create(c.apply(small_model()), rng);
  ModalityBatch full;
  full.num_modalities = 3;
  for (const auto& s : task().val.samples)
    if (s.present_count() == 3) full.samples.push_back(s);
  ASSERT_GT(full.size(), 0u);
  const auto out = m.forward(full);
  for (const auto& alpha : out.fusion.trace.alpha_layers)
    for (std::size_t i = 0; i < alpha.numel(); ++i) {
      const std::size_t row = (i / 3) % 3, col = i % 3;
      EXPECT_EQ(alpha[i], row == col ? 0.0 : 0.5);
    }
}

TEST(Variants, EarlyFusionMeanHasEmptyTrace) {
  TrainConfig c;
  c.ablation = Ablation::kEarlyFusionMean;
  Rng rng(5);
  const Model m = Model::create(c.apply(small_model()), rng);
  EXPECT_TRUE(m.forward(task().val.all()).fusion.trace.empty());
}

TEST(Baselines, SingleModalityConcatAndLateAverageAgree) {
  ModelConfig base = small_model();
  base = model_for_data(base, {4}, TaskKind::kClassification, 4);
  ModelConfig concat = base, late = base;
  concat.arch = Architecture::kEarlyConcat;
  late.arch = Architecture::kLateAverage;
  Rng r1(6), r2(6);
  const Model a = Model::create(concat, r1), b = Model::create(late, r2);
  ModalityBatch batch;
  batch.num_modalities = 1;
  Rng data(7);
  for (int i = 0; i < 5; ++i) {
    Sample s;
    s.missing = {0};
    s.inputs = {std::vector<double>{data.normal(), data.normal(), data.normal(), data.normal()}};
    batch.samples.push_back(s);
  }
  const Tensor logits = a.forward(batch).output, probs = b.forward(batch).output;
  for (std::size_t r = 0; r < 5; ++r) {
    double mx = -INFINITY, z = 0.0;
    for (std::size_t c = 0; c < 4; ++c) mx = std::max(mx, logits[r * 4 + c]);
    for (std::size_t c = 0; c < 4; ++c) z += std::exp(logits[r * 4 + c] - mx);
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(probs[r * 4 + c], std::exp(logits[r * 4 + c] - mx) / z, 1e-14);
  }
}

TEST(Baselines, LateAverageIsMeanOfPresentHeads) {
  ModelConfig cfg = small_model();
  cfg.arch = Architecture::kLateAverage;
  Rng rng(8);
  const Model m = Model::create(cfg, rng);
  ModalityBatch batch{3, {task().val.samples.begin(), task().val.samples.begin() + 10}};
  const Tensor probs = m.forward(batch).output;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sample& s = batch.samples[b];
    std::vector<double> want(4, 0.0);
    for (std::size_t k = 0; k < 3; ++k) {
      if (s.missing[k]) continue;
      const Tensor h = encoder_forward(*s.inputs[k], m.encoders()[k]);
      const Tensor l = m.heads()[k].forward(reshape(h, {1, 8}));
      double z = 0.0;
      for (std::size_t c = 0; c < 4; ++c) z += std::exp(l[c]);
      for (std::size_t c = 0; c < 4; ++c) want[c] += std::exp(l[c]) / z / double(s.present_count());
    }
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(probs[b * 4 + c], want[c], 1e-12);
  }
}

TEST(Robustness, OneRowPerScenario) {
  Rng rng(9);
  const Model m = Model::create(small_model(), rng);
  const auto rows = run_robustness("CLARGA", m, task().test);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].scenario, "all");
  EXPECT_EQ(rows[0].drop_pp, 0.0);
  for (std::size_t k = 1; k < 4; ++k) {
    EXPECT_EQ(rows[k].dropped, k - 1);
    EXPECT_NEAR(rows[k].drop_pp, 100.0 * (rows[k].accuracy - rows[0].accuracy), 1e-12);
    EXPECT_EQ(rows[k].evaluated + rows[k].skipped, task().test.size());
  }
}

TEST(Robustness, DroppedSlotHoldsMaskVector) {
  Rng rng(10);
  const Model m = Model::create(small_model(), rng);
  std::size_t skipped = 0;
  const ModalityBatch dropped = drop_modality(task().test.all(), 1, &skipped);
  const auto out = m.forward(dropped);
  for (std::size_t b = 0; b < dropped.size(); ++b)
    for (std::size_t i = 0; i < 8; ++i)
      EXPECT_EQ(out.encoded.nodes[(b * 3 + 1) * 8 + i], m.mask().vector[i]);
  std::size_t only1 = 0;
  for (const auto& s : task().test.samples) only1 += s.present_count() == 1 && !s.missing[1];
  EXPECT_EQ(skipped, only1);
}

TEST(Ablation, SuiteProducesOneRowPerVariant) {
  const auto table = run_ablation_suite(small_model(), task(), short_run(1), {1, 2});
  ASSERT_EQ(table.rows.size(), ablation_variants().size());
  for (const auto& r : table.rows) {
    ASSERT_EQ(r.val_accuracy.size(), 2u);
    EXPECT_NEAR(r.mean_accuracy, (r.val_accuracy[0] + r.val_accuracy[1]) / 2, 1e-15);
  }
  EXPECT_THROW(table.row("nope"), ContractError);
  const std::string csv = ablation_csv(table, TaskKind::kClassification);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "Model,Acc. (%),MAE");
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(11);
    model = Model::create(small_model(), rng);
    path = temp_path("model.ckpt");
    save_checkpoint(path, model, {{"note", 1}});
  }
  std::vector<char> bytes() {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
  }
  void rewrite(const std::vector<char>& b) {
    std::ofstream(path, std::ios::binary).write(b.data(), b.size());
  }
  Model model;
  std::string path;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  json extra;
  const ModelConfig cfg = small_model();
  const Model back = load_checkpoint(path, &cfg, &extra);
  EXPECT_EQ(snapshot(back), snapshot(model));
  EXPECT_EQ(extra["note"], 1);
  const auto batch = task().val.all();
  const Tensor a = model.forward(batch).output, b = back.forward(batch).output;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST_F(CheckpointTest, ConfigMismatchRejected) {
  ModelConfig other = small_model();
  other.fusion.D = 3;
  EXPECT_THROW(load_checkpoint(path, &other), CheckpointError);
}

TEST_F(CheckpointTest, TruncatedPayloadRejected) {
  auto b = bytes();
  b.resize(b.size() - 5);
  rewrite(b);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

TEST_F(CheckpointTest, TrailingBytesRejected) {
  auto b = bytes();
  b.push_back('x');
  rewrite(b);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

TEST_F(CheckpointTest, BadMagicRejected) {
  auto b = bytes();
  b[3] = 'Z';
  rewrite(b);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

TEST_F(CheckpointTest, EditedHeaderConfigFailsHashCheck) {
  auto b = bytes();
  std::string s(b.begin(), b.end());
  const auto pos = s.find("\"leaky_slope\":0.01");
  ASSERT_NE(pos, std::string::npos);
  s.replace(pos, 18, "\"leaky_slope\":0.02");
  rewrite({s.begin(), s.end()});
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

TEST(Checkpoint, MissingFileRejected) {
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), CheckpointError);
}

}  // namespace
}  // namespace clarga
