#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "clarga/datagen.hpp"

namespace clarga {
namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "clarga_test_datagen";
  fs::create_directories(dir);
  return dir / name;
}

SynthTaskSpec small_spec() {
  SynthTaskSpec s;
  s.N = 400;
  s.input_dims = {5, 3, 4};
  s.missing_rate = {0.2, 0.0, 0.4};
  s.seed = 9;
  return s;
}

void expect_same(const Dataset& a, const Dataset& b) {
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.input_dims, b.input_dims);
  EXPECT_EQ(a.task, b.task);
  EXPECT_EQ(a.num_classes, b.num_classes);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].missing, b.samples[i].missing);
    EXPECT_EQ(a.samples[i].label, b.samples[i].label);
    EXPECT_EQ(a.samples[i].target, b.samples[i].target);
    for (std::size_t m = 0; m < a.M(); ++m) {
      ASSERT_EQ(a.samples[i].inputs[m].has_value(), b.samples[i].inputs[m].has_value());
      if (a.samples[i].inputs[m]) EXPECT_EQ(*a.samples[i].inputs[m], *b.samples[i].inputs[m]);
    }
  }
}

TEST(SynthTaskSpec, ValidationRejectsBadValues) {
  auto bad = [](auto edit) {
    SynthTaskSpec s;
    edit(s);
    EXPECT_THROW(s.validate(), ConfigError);
  };
  bad([](SynthTaskSpec& s) { s.rho = 1.5; });
  bad([](SynthTaskSpec& s) { s.missing_rate = {0, 1.0, 0}; });
  bad([](SynthTaskSpec& s) { s.input_dims = {20, 0, 20}; });
  bad([](SynthTaskSpec& s) { s.input_dims = {20, 20}; });
  bad([](SynthTaskSpec& s) { s.num_classes = 1; });
  bad([](SynthTaskSpec& s) { s.noise_sigma = -1; });
}

TEST(GenerateClassification, SameSeedIsBitIdentical) {
  const auto a = generate_classification(small_spec());
  const auto b = generate_classification(small_spec());
  expect_same(a.train, b.train);
  expect_same(a.val, b.val);
  expect_same(a.test, b.test);
  auto other = small_spec();
  other.seed = 10;
  EXPECT_NE(generate_classification(other).train.samples[0].inputs[1],
            a.train.samples[0].inputs[1]);
}

TEST(GenerateClassification, SplitSizesAndBalance) {
  SynthTaskSpec s;
  s.N = 6000;
  const auto t = generate_classification(s);
  EXPECT_EQ(t.train.size(), 4200u);
  EXPECT_EQ(t.val.size(), 900u);
  EXPECT_EQ(t.test.size(), 900u);
  for (const Dataset* d : {&t.train, &t.val, &t.test}) {
    std::vector<std::size_t> count(s.num_classes, 0);
    for (const auto& x : d->samples) ++count[x.label];
    const double expect = double(d->size()) / s.num_classes;
    for (auto c : count) EXPECT_LE(std::abs(double(c) - expect), 0.1 * expect);
  }
}

TEST(GenerateClassification, SplitsAreDisjoint) {
  const auto t = generate_classification(small_spec());
  std::set<std::vector<double>> seen;
  for (const Dataset* d : {&t.train, &t.val, &t.test})
    for (const auto& s : d->samples) {
      // modality 1 is never missing in small_spec
      EXPECT_TRUE(seen.insert(*s.inputs[1]).second);
    }
}

TEST(GenerateClassification, MissingFrequencyMatchesRate) {
  SynthTaskSpec s;
  s.N = 6000;
  s.missing_rate = {0.3, 0.3, 0.3};
  const auto t = generate_classification(s);
  // All-missing draws are resampled, so the observed rate is conditional on
  // at least one modality present.
  const double r = 0.3, r3 = r * r * r;
  const double p = (r - r3) / (1 - r3);
  std::size_t missing = 0, total = 0;
  for (const Dataset* d : {&t.train, &t.val, &t.test})
    for (const auto& x : d->samples) {
      EXPECT_GT(x.present_count(), 0u);
      missing += x.missing[0];
      ++total;
    }
  const double se = std::sqrt(p * (1 - p) / total);
  EXPECT_NEAR(double(missing) / total, p, 3 * se);
}

TEST(GenerateClassification, MissingSlotsCarryNoData) {
  const auto t = generate_classification(small_spec());
  for (const auto& s : t.train.samples)
    for (std::size_t m = 0; m < 3; ++m) EXPECT_EQ(s.inputs[m].has_value(), !s.missing[m]);
}

TEST(GenerateClassification, RedundantNoiselessTaskIsSeparableByOneModality) {
  SynthTaskSpec s;
  s.rho = 1.0;
  s.noise_sigma = 0.0;
  s.N = 2000;
  const auto t = generate_classification(s);
  for (std::size_t m = 0; m < 3; ++m) EXPECT_EQ(bayes_accuracy(t.class_means, t.test, m), 1.0);
}

TEST(GenerateClassification, PrivateSignalsMakeFusionStrictlyBetter) {
  SynthTaskSpec s;
  s.rho = 0.0;
  s.noise_sigma = 3.0;
  s.N = 10000;
  const auto t = generate_classification(s);
  Dataset all = t.train;
  for (const Dataset* d : {&t.val, &t.test}) all.samples.insert(all.samples.end(), d->samples.begin(), d->samples.end());
  const double fused = bayes_accuracy(t.class_means, all);
  for (std::size_t m = 0; m < 3; ++m) EXPECT_GT(fused, bayes_accuracy(t.class_means, all, m) + 0.1);
}

TEST(GenerateClassification, ClassMeansFollowFromSpec) {
  const auto t = generate_classification(small_spec());
  EXPECT_EQ(synth_class_means(small_spec()), t.class_means);
}

TEST(BayesOracle, NearestMeanOnHandBuiltCase) {
  std::vector<std::vector<std::vector<double>>> means = {{{0.0}, {4.0}}, {{0.0}, {-4.0}}};
  Sample s;
  s.missing = {0, 0};
  s.inputs = {std::vector<double>{3.0}, std::vector<double>{-0.5}};
  // modality 0 says class 1 (distance 1 vs 3), modality 1 says class 0
  EXPECT_EQ(bayes_predict(means, s, 0), 1u);
  EXPECT_EQ(bayes_predict(means, s, 1), 0u);
  // jointly: class 0 costs 9 + 0.25, class 1 costs 1 + 12.25
  EXPECT_EQ(bayes_predict(means, s), 0u);
  EXPECT_EQ(bayes_predict(means, s, std::nullopt, 1), 1u);
}

TEST(GaussianPairs, ClosedFormMutualInformation) {
  EXPECT_EQ((GaussianPairSpec{1, 0.0, 1}).true_mi(), 0.0);
  EXPECT_NEAR((GaussianPairSpec{1, 0.9, 1}).true_mi(), -0.5 * std::log(0.19), 1e-15);
  EXPECT_NEAR((GaussianPairSpec{1, 0.9, 1}).true_mi(), 0.830, 5e-4);
  EXPECT_NEAR((GaussianPairSpec{4, 0.5, 1}).true_mi(), 0.575, 5e-4);
  EXPECT_THROW((GaussianPairSpec{1, 1.0, 1}).validate(), ConfigError);
}

TEST(GaussianPairs, EmpiricalCorrelation) {
  const auto g = generate_gaussian_pairs({2, 0.6, 3}, 50000);
  double hz = 0, hh = 0, zz = 0;
  for (std::size_t i = 0; i < g.h.size(); ++i) {
    hz += g.h[i] * g.z[i];
    hh += g.h[i] * g.h[i];
    zz += g.z[i] * g.z[i];
  }
  EXPECT_NEAR(hz / std::sqrt(hh * zz), 0.6, 0.01);
  EXPECT_NEAR(zz / g.z.size(), 1.0, 0.02);
}

TEST(DatasetFile, RoundTrip) {
  const auto t = generate_classification(small_spec());
  const auto path = temp_file("roundtrip.clds").string();
  write_dataset(path, t.val, {{"note", "x"}});
  expect_same(read_dataset(path), t.val);
  std::ifstream side(path + ".json");
  EXPECT_EQ(json::parse(side)["note"], "x");
}

TEST(DatasetFile, GaussianPairsRoundTrip) {
  const auto g = generate_gaussian_pairs({3, 0.5, 4}, 20);
  const auto path = temp_file("pairs.clds").string();
  write_dataset(path, gaussian_pairs_dataset(g), {{"true_mi", g.true_mi}});
  const Dataset d = read_dataset(path);
  EXPECT_EQ(d.task, TaskKind::kRegression);
  EXPECT_EQ(*d.samples[7].inputs[1], std::vector<double>(g.z.begin() + 21, g.z.begin() + 24));
}

TEST(DatasetFile, HeaderLayoutIsLittleEndian) {
  Dataset d;
  d.input_dims = {2};
  d.num_classes = 3;
  Sample s;
  s.missing = {0};
  s.inputs = {std::vector<double>{1.0, -2.0}};
  s.label = 2;
  d.samples = {s};
  const auto path = temp_file("layout.clds").string();
  write_dataset(path, d, json::object());
  std::ifstream is(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), {});
  ASSERT_EQ(bytes.size(), 8u + 4 + 4 + 8 + 8 + 1 + 8 + (1 + 16 + 8 + 8));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "CLRGDS01");
  EXPECT_EQ(bytes[8], 1);   // version
  EXPECT_EQ(bytes[12], 1);  // M
  EXPECT_EQ(bytes[16], 2);  // input_dims[0]
  EXPECT_EQ(bytes[24], 1);  // N
  EXPECT_EQ(bytes[32], 0);  // classification
  EXPECT_EQ(bytes[33], 3);  // num_classes
  EXPECT_EQ(bytes[41], 0);  // present
  // 1.0 as IEEE-754 LE: 00 00 00 00 00 00 f0 3f
  EXPECT_EQ(bytes[42 + 6], 0xf0);
  EXPECT_EQ(bytes[42 + 7], 0x3f);
  EXPECT_EQ(bytes[58], 2);  // label
}

class CorruptDataset : public ::testing::Test {
 protected:
  std::vector<char> good() {
    const auto t = generate_classification(small_spec());
    const auto path = temp_file("good.clds").string();
    write_dataset(path, t.test, json::object());
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
  }
  void expect_rejected(const std::vector<char>& bytes) {
    const auto path = temp_file("bad.clds").string();
    std::ofstream(path, std::ios::binary).write(bytes.data(), bytes.size());
    EXPECT_THROW(read_dataset(path), DataError);
  }
};

TEST_F(CorruptDataset, BadMagic) {
  auto b = good();
  b[0] = 'X';
  expect_rejected(b);
}

TEST_F(CorruptDataset, Truncated) {
  auto b = good();
  b.resize(b.size() - 3);
  expect_rejected(b);
}

TEST_F(CorruptDataset, TrailingBytes) {
  auto b = good();
  b.push_back(0);
  expect_rejected(b);
}

TEST_F(CorruptDataset, UnknownVersion) {
  auto b = good();
  b[8] = 2;
  expect_rejected(b);
}

TEST_F(CorruptDataset, PresenceByteOutOfRange) {
  auto b = good();
  const std::size_t first_record = 8 + 4 + 4 + 3 * 8 + 8 + 1 + 8;
  b[first_record] = 7;
  expect_rejected(b);
}

TEST(DatasetFile, MissingFileIsDataError) {
  EXPECT_THROW(read_dataset("/nonexistent/dir/x.clds"), DataError);
}

}  // namespace
}  // namespace clarga
