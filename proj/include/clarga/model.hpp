#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "clarga/encoders.hpp"
#include "clarga/errors.hpp"
#include "clarga/graph_fusion.hpp"
#include "clarga/objective.hpp"
#include "clarga/ops.hpp"

namespace clarga {

enum class Architecture { kClarga, kEarlyConcat, kLateAverage };

inline const char* architecture_name(Architecture a) {
  switch (a) {
    case Architecture::kClarga: return "clarga";
    case Architecture::kEarlyConcat: return "early_concat";
    case Architecture::kLateAverage: return "late_average";
  }
  return "?";
}

struct ModelConfig {
  Architecture arch = Architecture::kClarga;
  FusionConfig fusion = FusionConfig::desk_preset();
  std::vector<std::size_t> input_dims = {20, 20, 20};
  std::vector<std::size_t> encoder_hidden = {64};
  std::vector<std::size_t> head_hidden = {32};
  TaskKind task = TaskKind::kClassification;
  std::size_t num_classes = 4;
  double mask_init_sd = 0.02;

  std::size_t output_dim() const {
    return task == TaskKind::kClassification ? num_classes : 1;
  }

  void validate() const {
    fusion.validate();
    if (input_dims.size() != fusion.M) {
      throw ConfigError("model: input_dims has " + std::to_string(input_dims.size()) +
                        " entries but fusion.M = " + std::to_string(fusion.M));
    }
    if (task == TaskKind::kClassification && num_classes < 2) {
      throw ConfigError("model: classification needs num_classes >= 2");
    }
    if (arch == Architecture::kLateAverage && task != TaskKind::kClassification) {
      throw ConfigError("model: late_average requires a classification task");
    }
  }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelOutput {
  Tensor output;       // logits [B x p] or predictions [B x 1]
  Tensor features;     // representation fed to the head, [B x F]
  EncodedBatch encoded;
  FusionOutput fusion;                // clarga only
  std::vector<Tensor> modality_logits;  // late_average only, [B x p] each
};

class Model {
 public:
  static Model create(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    const std::size_t M = cfg.fusion.M, d = cfg.fusion.d;
    for (std::size_t i = 0; i < M; ++i) {
      m.encoders_.push_back(Encoder::create(
          {i, cfg.input_dims[i], cfg.encoder_hidden, d}, cfg.fusion.leaky_slope, rng));
    }
    m.mask_ = MaskEmbedding::create(d, cfg.mask_init_sd, rng);
    switch (cfg.arch) {
      case Architecture::kClarga:
        m.fusion_ = FusionParams::create(cfg.fusion, rng);
        m.heads_.emplace_back(d, cfg.head_hidden, cfg.output_dim(), cfg.fusion.leaky_slope, rng);
        break;
      case Architecture::kEarlyConcat:
        m.heads_.emplace_back(M * d, cfg.head_hidden, cfg.output_dim(),
                              cfg.fusion.leaky_slope, rng);
        break;
      case Architecture::kLateAverage:
        for (std::size_t i = 0; i < M; ++i)
          m.heads_.emplace_back(d, cfg.head_hidden, cfg.output_dim(),
                                cfg.fusion.leaky_slope, rng);
        break;
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Encoder>& encoders() { return encoders_; }
  const std::vector<Encoder>& encoders() const { return encoders_; }
  MaskEmbedding& mask() { return mask_; }
  const MaskEmbedding& mask() const { return mask_; }
  FusionParams& fusion_params() { return fusion_; }
  const FusionParams& fusion_params() const { return fusion_; }
  std::vector<Mlp>& heads() { return heads_; }
  const std::vector<Mlp>& heads() const { return heads_; }

  // Every learnable tensor, in checkpoint order.
  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    auto add_mlp = [&](const std::string& prefix, const Mlp& net) {
      for (std::size_t l = 0; l < net.layers().size(); ++l) {
        out.push_back({prefix + ".layer" + std::to_string(l) + ".weight", net.layers()[l].weight});
        out.push_back({prefix + ".layer" + std::to_string(l) + ".bias", net.layers()[l].bias});
      }
    };
    for (std::size_t i = 0; i < encoders_.size(); ++i)
      add_mlp("encoder" + std::to_string(i), encoders_[i].net);
    out.push_back({"mask", mask_.vector});
    if (cfg_.arch == Architecture::kClarga) {
      out.push_back({"fusion.W_q", fusion_.W_q});
      out.push_back({"fusion.W_k", fusion_.W_k});
      out.push_back({"fusion.W_g", fusion_.W_g});
      out.push_back({"fusion.q_F", fusion_.q_F});
    }
    for (std::size_t i = 0; i < heads_.size(); ++i)
      add_mlp("head" + std::to_string(i), heads_[i]);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    for (auto& n : named_parameters()) p.push_back(n.tensor);
    return p;
  }

  ModelOutput forward(const ModalityBatch& batch, const ForwardOptions& opt = {}) const {
    ModelOutput out;
    out.encoded = encode_batch(batch, encoders_, mask_);
    const std::size_t B = batch.size(), M = cfg_.fusion.M, d = cfg_.fusion.d;
    switch (cfg_.arch) {
      case Architecture::kClarga:
        out.fusion = fusion_forward(out.encoded.nodes, out.encoded.presence, fusion_,
                                    cfg_.fusion, opt);
        out.features = out.fusion.z;
        out.output = heads_[0].forward(out.features);
        break;
      case Architecture::kEarlyConcat:
        out.features = reshape(out.encoded.nodes, {B, M * d});
        out.output = heads_[0].forward(out.features);
        break;
      case Architecture::kLateAverage: {
        // Features: mean of present encoder outputs (for d_eff reporting).
        std::vector<double> w(B * M, 0.0);
        for (std::size_t b = 0; b < B; ++b) {
          const double n = static_cast<double>(batch.samples[b].present_count());
          for (std::size_t m = 0; m < M; ++m)
            if (!batch.samples[b].missing[m]) w[b * M + m] = 1.0 / n;
        }
        out.features = reshape(
            bmm(Tensor::from({B, 1, M}, std::move(w)), out.encoded.nodes), {B, d});
        const Tensor probs_sum = late_average_probs(out);
        out.output = probs_sum;
        break;
      }
    }
    return out;
  }

  // Predicted class per sample (classification) or value (regression).
  std::vector<double> predict(const ModelOutput& out) const {
    const std::size_t B = out.output.dim(0), p = out.output.dim(1);
    std::vector<double> pred(B);
    for (std::size_t b = 0; b < B; ++b) {
      if (cfg_.task == TaskKind::kRegression) {
        pred[b] = out.output[b];
        continue;
      }
      std::size_t best = 0;
      for (std::size_t c = 1; c < p; ++c)
        if (out.output[b * p + c] > out.output[b * p + best]) best = c;
      pred[b] = static_cast<double>(best);
    }
    return pred;
  }

 private:
  // Fills modality_logits and returns the mean of the present heads' class
  // probabilities, [B x p].
  Tensor late_average_probs(ModelOutput& out) const {
    const auto& presence = out.encoded.presence;
    const std::size_t M = cfg_.fusion.M, p = cfg_.output_dim();
    const std::size_t B = presence.size() / M;
    std::vector<double> probs(B * p, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
      const Tensor& rows = out.encoded.per_modality[m];
      if (!rows.defined()) {
        out.modality_logits.emplace_back();
        continue;
      }
      const Tensor logits = heads_[m].forward(rows);
      out.modality_logits.push_back(logits);
      const Tensor sm = softmax_masked(logits.detach(), Mask(logits.numel(), 0));
      std::size_t r = 0;
      for (std::size_t b = 0; b < B; ++b) {
        if (presence[b * M + m]) continue;
        for (std::size_t c = 0; c < p; ++c) probs[b * p + c] += sm[r * p + c];
        ++r;
      }
    }
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t n = 0;
      for (std::size_t m = 0; m < M; ++m) n += presence[b * M + m] ? 0 : 1;
      for (std::size_t c = 0; c < p; ++c) probs[b * p + c] /= static_cast<double>(n);
    }
    return Tensor::from({B, p}, std::move(probs));
  }

  ModelConfig cfg_;
  std::vector<Encoder> encoders_;
  MaskEmbedding mask_;
  FusionParams fusion_;
  std::vector<Mlp> heads_;
};

// Supervised loss per architecture. Late-average uses the mean over present
// (sample, modality) pairs of each head's cross-entropy.
inline Tensor model_supervised_loss(const Model& model, const ModelOutput& out,
                                    const ModalityBatch& batch, const Targets& targets) {
  if (model.config().arch != Architecture::kLateAverage) {
    return supervised_loss(out.output, targets);
  }
  const std::size_t M = model.config().fusion.M;
  Tensor total;
  std::size_t pairs = 0;
  for (std::size_t m = 0; m < M; ++m) {
    if (!out.modality_logits[m].defined()) continue;
    std::vector<std::size_t> cls;
    for (std::size_t b = 0; b < batch.size(); ++b)
      if (!batch.samples[b].missing[m]) cls.push_back(targets.classes[b]);
    const Tensor l = scale(nll_loss(log_softmax(out.modality_logits[m]), cls),
                           static_cast<double>(cls.size()));
    total = total.defined() ? add(total, l) : l;
    pairs += cls.size();
  }
  return scale(total, 1.0 / static_cast<double>(pairs));
}

}  // namespace clarga
