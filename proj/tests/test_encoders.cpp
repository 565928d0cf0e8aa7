#include <gtest/gtest.h>

#include <cmath>

#include "clarga/encoders.hpp"
#include "clarga/ops.hpp"

namespace clarga {
namespace {

Sample sample(std::vector<std::optional<std::vector<double>>> inputs) {
  Sample s;
  for (const auto& x : inputs) s.missing.push_back(x ? 0 : 1);
  s.inputs = std::move(inputs);
  return s;
}

std::vector<Encoder> encoders(std::size_t M, std::size_t in, std::size_t d, Rng& rng) {
  std::vector<Encoder> out;
  for (std::size_t m = 0; m < M; ++m) out.push_back(Encoder::create({m, in, {5}, d}, 0.01, rng));
  return out;
}

TEST(EncoderForward, ZeroWeightsGiveZero) {
  Rng rng(1);
  Encoder e = Encoder::create({0, 4, {3}, 2}, 0.01, rng);
  for (auto& l : e.net.layers()) {
    for (auto& v : l.weight.mutable_data()) v = 0.0;
    for (auto& v : l.bias.mutable_data()) v = 0.0;
  }
  Tensor y = encoder_forward({1, -2, 3, 4}, e);
  ASSERT_EQ(y.shape(), (Shape{2}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
}

TEST(EncoderForward, SingleIdentityLayerPassesInputThrough) {
  Rng rng(2);
  Encoder e = Encoder::create({0, 3, {}, 3}, 0.01, rng);
  auto w = e.net.layers()[0].weight.mutable_data();
  for (std::size_t i = 0; i < 9; ++i) w[i] = i % 4 == 0 ? 1.0 : 0.0;
  Tensor y = encoder_forward({0.5, -7.0, 2.25}, e);
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], -7.0);
  EXPECT_EQ(y[2], 2.25);
}

TEST(EncoderForward, MatchesLoopOracle) {
  Rng rng(3);
  Encoder e = Encoder::create({0, 6, {7, 5}, 4}, 0.2, rng);
  for (auto& l : e.net.layers())
    for (auto& v : l.bias.mutable_data()) v = rng.normal();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(6);
    for (auto& v : x) v = rng.normal();
    std::vector<double> h = x;
    const auto& layers = e.net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t out = layers[l].out_dim(), in = layers[l].in_dim();
      std::vector<double> next(out);
      for (std::size_t r = 0; r < out; ++r) {
        long double s = layers[l].bias[r];
        for (std::size_t c = 0; c < in; ++c) s += (long double)layers[l].weight[r * in + c] * h[c];
        next[r] = static_cast<double>(s);
        if (l + 1 < layers.size() && next[r] < 0) next[r] *= 0.2;
      }
      h = next;
    }
    Tensor y = encoder_forward(x, e);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], h[i], 1e-12);
  }
}

TEST(EncoderForward, LengthMismatchIsShapeError) {
  Rng rng(4);
  Encoder e = Encoder::create({2, 3, {}, 2}, 0.01, rng);
  EXPECT_THROW(encoder_forward({1, 2}, e), ShapeError);
}

TEST(EncodeBatch, BothPresentIgnoresMask) {
  Rng rng(5);
  auto enc = encoders(2, 3, 4, rng);
  MaskEmbedding mask = MaskEmbedding::create(4, 0.02, rng);
  ModalityBatch b{2, {sample({std::vector<double>{1, 2, 3}, std::vector<double>{0, 1, 0}})}};
  Tensor before = encode_batch(b, enc, mask).nodes;
  for (auto& v : mask.vector.mutable_data()) v += 10.0;
  Tensor after = encode_batch(b, enc, mask).nodes;
  for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_EQ(before[i], after[i]);
  Tensor f0 = encoder_forward({1, 2, 3}, enc[0]);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(before[i], f0[i]);
}

TEST(EncodeBatch, MissingSlotIsMaskVectorExactly) {
  Rng rng(6);
  auto enc = encoders(2, 3, 4, rng);
  MaskEmbedding mask = MaskEmbedding::create(4, 0.02, rng);
  ModalityBatch b{2, {sample({std::vector<double>{1, 2, 3}, std::nullopt})}};
  auto out = encode_batch(b, enc, mask);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out.nodes[4 + i], mask.vector[i]);
  EXPECT_EQ(out.presence, (Mask{0, 1}));
}

TEST(EncodeBatch, AllMissingRejected) {
  Rng rng(7);
  auto enc = encoders(3, 2, 4, rng);
  MaskEmbedding mask = MaskEmbedding::create(4, 0.02, rng);
  ModalityBatch b{3, {sample({std::nullopt, std::nullopt, std::nullopt})}};
  EXPECT_THROW(encode_batch(b, enc, mask), DataError);
}

TEST(EncodeBatch, InputDimMismatchNamesModality) {
  Rng rng(8);
  auto enc = encoders(2, 3, 4, rng);
  MaskEmbedding mask = MaskEmbedding::create(4, 0.02, rng);
  ModalityBatch b{2, {sample({std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}})}};
  try {
    encode_batch(b, enc, mask);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("modality 1"), std::string::npos);
  }
}

TEST(EncodeBatch, MissingMarkedSlotWithDataRejected) {
  Rng rng(9);
  auto enc = encoders(2, 1, 4, rng);
  MaskEmbedding mask = MaskEmbedding::create(4, 0.02, rng);
  Sample s = sample({std::vector<double>{1}, std::vector<double>{2}});
  s.missing[1] = 1;
  EXPECT_THROW(encode_batch(ModalityBatch{2, {s}}, enc, mask), DataError);
}

TEST(EncodeBatch, RepeatedEncodingIsIdentical) {
  Rng rng(10);
  auto enc = encoders(3, 2, 4, rng);
  MaskEmbedding mask = MaskEmbedding::create(4, 0.02, rng);
  ModalityBatch b{3, {sample({std::vector<double>{1, 2}, std::nullopt, std::vector<double>{0, 3}}),
                      sample({std::nullopt, std::vector<double>{5, 1}, std::nullopt})}};
  Tensor a = encode_batch(b, enc, mask).nodes, c = encode_batch(b, enc, mask).nodes;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], c[i]);
}

TEST(EncodeBatch, GradientRoutesToMaskNotAbsentEncoder) {
  Rng rng(11);
  auto enc = encoders(2, 3, 4, rng);
  MaskEmbedding mask = MaskEmbedding::create(4, 0.02, rng);
  ModalityBatch b{2, {sample({std::vector<double>{1, 2, 3}, std::nullopt}),
                      sample({std::vector<double>{-1, 0, 2}, std::nullopt})}};
  Tape tape;
  {
    Tape::Scope scope(tape);
    auto out = encode_batch(b, enc, mask);
    tape.backward(sum(mul(out.nodes, out.nodes)));
  }
  for (const auto& l : enc[1].net.layers()) {
    if (!l.weight.has_grad()) continue;
    for (double g : l.weight.grad()) EXPECT_EQ(g, 0.0);
  }
  ASSERT_TRUE(mask.vector.has_grad());
  double norm = 0.0;
  for (double g : mask.vector.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
  // Two substitutions: the gradient of sum(h^2) is 2h per copy.
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(mask.vector.grad()[i], 4.0 * mask.vector[i], 1e-15);
}

TEST(EncoderLipschitz, BoundDominatesObservedRatios) {
  Rng rng(12);
  for (double slope : {0.01, 0.5, 2.0}) {
    Encoder e = Encoder::create({0, 5, {8, 6}, 4}, slope, rng);
    const double L = e.net.lipschitz_upper_bound();
    for (int t = 0; t < 200; ++t) {
      std::vector<double> x(5), y(5);
      double dx = 0.0;
      for (std::size_t i = 0; i < 5; ++i) {
        x[i] = rng.normal();
        y[i] = x[i] + 0.1 * rng.normal();
        dx += (x[i] - y[i]) * (x[i] - y[i]);
      }
      Tensor fx = encoder_forward(x, e), fy = encoder_forward(y, e);
      double df = 0.0;
      for (std::size_t i = 0; i < 4; ++i) df += (fx[i] - fy[i]) * (fx[i] - fy[i]);
      EXPECT_LE(std::sqrt(df), L * std::sqrt(dx) * (1 + 1e-12)) << "slope " << slope;
    }
  }
}

TEST(EncoderLipschitz, SpectralNormOfDiagonal) {
  Rng rng(13);
  Encoder e = Encoder::create({0, 3, {}, 3}, 0.01, rng);
  auto w = e.net.layers()[0].weight.mutable_data();
  const double diag[3] = {0.5, -3.0, 2.0};
  for (std::size_t i = 0; i < 9; ++i) w[i] = i % 4 == 0 ? diag[i / 4] : 0.0;
  EXPECT_NEAR(e.net.lipschitz_upper_bound(), 3.0, 1e-12);
}

}  // namespace
}  // namespace clarga
