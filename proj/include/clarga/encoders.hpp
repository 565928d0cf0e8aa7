#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clarga/errors.hpp"
#include "clarga/ops.hpp"
#include "clarga/rng.hpp"
#include "clarga/spectral.hpp"
#include "clarga/tensor.hpp"

namespace clarga {

inline Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> w(rows * cols);
  for (auto& v : w) v = rng.uniform(-a, a);
  return Tensor::parameter({rows, cols}, std::move(w));
}

struct Linear {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }

  Tensor forward(const Tensor& x) const {
    return add_rowwise(matmul_nt(x, weight), bias);
  }
};

// Fully connected stack with LeakyReLU between layers and a linear output.
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::size_t in_dim, const std::vector<std::size_t>& hidden,
      std::size_t out_dim, double slope, Rng& rng)
      : slope_(slope) {
    std::size_t prev = in_dim;
    auto push = [&](std::size_t next) {
      layers_.push_back({xavier_uniform(next, prev, rng),
                         Tensor::parameter({next}, std::vector<double>(next, 0.0))});
      prev = next;
    };
    for (auto h : hidden) push(h);
    push(out_dim);
  }

  // x: [n x in] -> [n x out]
  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != in_dim()) {
      throw ShapeError("mlp: input " + shape_str(x.shape()) +
                       " does not have " + std::to_string(in_dim()) +
                       " features");
    }
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) h = leaky_relu(h, slope_);
    }
    return h;
  }

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  double slope() const { return slope_; }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

  std::vector<double> spectral_norms() const {
    std::vector<double> s;
    for (const auto& l : layers_) s.push_back(spectral_norm(l.weight));
    return s;
  }

  // Product of layer spectral norms; LeakyReLU with slope <= 1 is 1-Lipschitz.
  double lipschitz_upper_bound() const {
    double p = 1.0;
    for (double s : spectral_norms()) p *= s;
    // One activation between consecutive layers, each Lipschitz max(1, slope).
    const double act = std::max(1.0, std::abs(slope_));
    for (std::size_t l = 1; l < layers_.size(); ++l) p *= act;
    return p;
  }

 private:
  std::vector<Linear> layers_;
  double slope_ = 0.01;
};

struct EncoderSpec {
  std::size_t modality_id = 0;
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 0;
};

struct Encoder {
  EncoderSpec spec;
  Mlp net;

  static Encoder create(EncoderSpec spec, double slope, Rng& rng) {
    if (spec.input_dim == 0 || spec.output_dim == 0) {
      throw ShapeError("encoder dims must be positive");
    }
    Mlp net(spec.input_dim, spec.hidden_dims, spec.output_dim, slope, rng);
    return {std::move(spec), std::move(net)};
  }
};

struct MaskEmbedding {
  Tensor vector;  // [d]

  static MaskEmbedding create(std::size_t d, double stddev, Rng& rng) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return {Tensor::parameter({d}, std::move(v))};
  }
};

// One multimodal example. missing[m] == 1 marks modality m absent, in which
// case inputs[m] is empty.
struct Sample {
  std::vector<std::optional<std::vector<double>>> inputs;
  std::vector<std::uint8_t> missing;
  std::size_t label = 0;
  double target = 0.0;

  std::size_t present_count() const {
    std::size_t n = 0;
    for (auto r : missing) n += r ? 0 : 1;
    return n;
  }
};

struct ModalityBatch {
  std::size_t num_modalities = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }

  // Row-major [B x M], 1 = missing.
  Mask presence() const {
    Mask r;
    r.reserve(samples.size() * num_modalities);
    for (const auto& s : samples) r.insert(r.end(), s.missing.begin(), s.missing.end());
    return r;
  }
};

inline void validate_batch(const ModalityBatch& batch,
                           const std::vector<Encoder>& encoders) {
  const std::size_t M = batch.num_modalities;
  if (encoders.size() != M) {
    throw ShapeError("batch has " + std::to_string(M) + " modalities but " +
                     std::to_string(encoders.size()) + " encoders");
  }
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sample& s = batch.samples[b];
    if (s.missing.size() != M || s.inputs.size() != M) {
      throw DataError("sample " + std::to_string(b) +
                      ": presence vector length differs from modality count");
    }
    if (s.present_count() == 0) {
      throw DataError("sample " + std::to_string(b) +
                      ": every modality is missing");
    }
    for (std::size_t m = 0; m < M; ++m) {
      if (s.missing[m]) {
        if (s.inputs[m].has_value()) {
          throw DataError("sample " + std::to_string(b) + ": modality " +
                          std::to_string(m) + " is marked missing but has data");
        }
        continue;
      }
      if (!s.inputs[m].has_value()) {
        throw DataError("sample " + std::to_string(b) + ": modality " +
                        std::to_string(m) + " is marked present but empty");
      }
      if (s.inputs[m]->size() != encoders[m].spec.input_dim) {
        throw ShapeError("modality " + std::to_string(m) + ": input length " +
                         std::to_string(s.inputs[m]->size()) +
                         " != encoder input_dim " +
                         std::to_string(encoders[m].spec.input_dim));
      }
    }
  }
}

inline Tensor encoder_forward(const std::vector<double>& x,
                              const Encoder& encoder) {
  if (x.size() != encoder.spec.input_dim) {
    throw ShapeError("modality " + std::to_string(encoder.spec.modality_id) +
                     ": input length " + std::to_string(x.size()) +
                     " != input_dim " + std::to_string(encoder.spec.input_dim));
  }
  Tensor out = encoder.net.forward(Tensor::from({1, x.size()}, x));
  return reshape(out, {encoder.spec.output_dim});
}

struct EncodedBatch {
  Tensor nodes;   // [B x M x d]
  Mask presence;  // [B x M], 1 = missing
  // Encoder outputs per modality for the present rows, in batch order.
  std::vector<Tensor> per_modality;
};

// Present slots hold f_m(x_m); missing slots hold the shared mask vector, so
// its gradient sums over every substitution.
inline EncodedBatch encode_batch(const ModalityBatch& batch,
                                 const std::vector<Encoder>& encoders,
                                 const MaskEmbedding& mask) {
  validate_batch(batch, encoders);
  const std::size_t B = batch.size(), M = batch.num_modalities;
  const std::size_t d = mask.vector.numel();
  std::vector<Tensor> sources;
  std::vector<std::size_t> source_of(M, 0);
  std::vector<Tensor> per_modality(M);
  for (std::size_t m = 0; m < M; ++m) {
    if (encoders[m].spec.output_dim != d) {
      throw ShapeError("encoder " + std::to_string(m) + " output_dim " +
                       std::to_string(encoders[m].spec.output_dim) +
                       " != mask dim " + std::to_string(d));
    }
    std::vector<double> rows;
    std::size_t n = 0;
    for (const auto& s : batch.samples) {
      if (s.missing[m]) continue;
      rows.insert(rows.end(), s.inputs[m]->begin(), s.inputs[m]->end());
      ++n;
    }
    if (n == 0) continue;
    per_modality[m] = encoders[m].net.forward(
        Tensor::from({n, encoders[m].spec.input_dim}, std::move(rows)));
    source_of[m] = sources.size();
    sources.push_back(per_modality[m]);
  }
  const std::size_t mask_source = sources.size();
  sources.push_back(reshape(mask.vector, {1, d}));

  std::vector<std::pair<std::size_t, std::size_t>> index;
  index.reserve(B * M);
  std::vector<std::size_t> next_row(M, 0);
  for (const auto& s : batch.samples)
    for (std::size_t m = 0; m < M; ++m) {
      if (s.missing[m]) {
        index.emplace_back(mask_source, 0);
      } else {
        index.emplace_back(source_of[m], next_row[m]++);
      }
    }
  Tensor nodes = reshape(gather_rows(sources, index), {B, M, d});
  return {std::move(nodes), batch.presence(), std::move(per_modality)};
}

}  // namespace clarga
