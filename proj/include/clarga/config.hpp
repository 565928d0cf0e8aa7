#pragma once

#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clarga/binary_io.hpp"
#include "clarga/datagen.hpp"
#include "clarga/errors.hpp"
#include "clarga/graph_fusion.hpp"
#include "clarga/model.hpp"

namespace clarga {

using nlohmann::json;

// Reads one JSON object, rejecting keys nobody asked for. Call finish()
// after the last get().
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("unknown config key '" + it.key() + "' in " + where_);
      }
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline SynthTaskSpec parse_task_spec(const json& j, SynthTaskSpec s = {}) {
  ObjectReader r(j, "data");
  r.get("M", s.M);
  r.get("input_dims", s.input_dims);
  r.get("num_classes", s.num_classes);
  r.get("regression", s.regression);
  r.get("N", s.N);
  r.get("rho", s.rho);
  r.get("noise_sigma", s.noise_sigma);
  r.get("latent_dim", s.latent_dim);
  r.get("seed", s.seed);
  if (r.has("missing_rate")) {
    const json& mr = r.at("missing_rate");
    if (mr.is_number()) {
      s.missing_rate.assign(s.M, mr.get<double>());
    } else {
      r.get("missing_rate", s.missing_rate);
    }
  } else if (s.missing_rate.size() != s.M) {
    s.missing_rate.assign(s.M, 0.0);
  }
  if (!r.has("input_dims") && s.input_dims.size() != s.M) s.input_dims.assign(s.M, 20);
  r.finish();
  s.validate();
  return s;
}

inline json fusion_to_json(const FusionConfig& c) {
  return json{{"M", c.M},
              {"d", c.d},
              {"d_k", c.d_k},
              {"H", c.H},
              {"D", c.D},
              {"dropout_p", c.dropout_p},
              {"leaky_slope", c.leaky_slope},
              {"layer_norm_eps", c.layer_norm_eps},
              {"uniform_attention", c.uniform_attention},
              {"use_residual", c.use_residual},
              {"early_fusion_mean", c.early_fusion_mean},
              {"recompute_alpha", c.recompute_alpha},
              {"strict_degenerate_rows", c.strict_degenerate_rows}};
}

// Ablation flags are accepted here only when reading back a checkpoint
// header; user configs select ablations through train.ablation.
inline FusionConfig parse_fusion(const json& j, FusionConfig c, bool allow_ablation_keys) {
  ObjectReader r(j, "fusion");
  r.get("M", c.M);
  r.get("d", c.d);
  r.get("d_k", c.d_k);
  r.get("H", c.H);
  r.get("D", c.D);
  r.get("dropout_p", c.dropout_p);
  r.get("leaky_slope", c.leaky_slope);
  r.get("layer_norm_eps", c.layer_norm_eps);
  r.get("recompute_alpha", c.recompute_alpha);
  r.get("strict_degenerate_rows", c.strict_degenerate_rows);
  if (allow_ablation_keys) {
    r.get("uniform_attention", c.uniform_attention);
    r.get("use_residual", c.use_residual);
    r.get("early_fusion_mean", c.early_fusion_mean);
  }
  r.finish();
  c.validate();
  return c;
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "clarga") return Architecture::kClarga;
  if (s == "early_concat") return Architecture::kEarlyConcat;
  if (s == "late_average") return Architecture::kLateAverage;
  throw ConfigError("unknown architecture '" + s + "'");
}

inline json model_to_json(const ModelConfig& c) {
  return json{{"arch", architecture_name(c.arch)},
              {"fusion", fusion_to_json(c.fusion)},
              {"input_dims", c.input_dims},
              {"encoder_hidden", c.encoder_hidden},
              {"head_hidden", c.head_hidden},
              {"task", c.task == TaskKind::kClassification ? "classification" : "regression"},
              {"num_classes", c.num_classes},
              {"mask_init_sd", c.mask_init_sd}};
}

inline ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  ObjectReader r(j, "model");
  std::string arch = architecture_name(c.arch), task = "classification";
  r.get("arch", arch);
  c.arch = parse_architecture(arch);
  if (r.has("fusion")) c.fusion = parse_fusion(r.at("fusion"), c.fusion, true);
  r.get("input_dims", c.input_dims);
  r.get("encoder_hidden", c.encoder_hidden);
  r.get("head_hidden", c.head_hidden);
  r.get("task", task);
  if (task != "classification" && task != "regression") {
    throw ConfigError("model.task must be classification or regression");
  }
  c.task = task == "classification" ? TaskKind::kClassification : TaskKind::kRegression;
  r.get("num_classes", c.num_classes);
  r.get("mask_init_sd", c.mask_init_sd);
  r.finish();
  c.validate();
  return c;
}

// Hash of everything that determines parameter shapes and semantics.
inline std::string model_config_hash(const ModelConfig& c) {
  return le::hex64(le::fnv1a(model_to_json(c).dump()));
}

}  // namespace clarga
