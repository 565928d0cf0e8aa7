#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clarga/config.hpp"
#include "clarga/datagen.hpp"
#include "clarga/trainer.hpp"
#include "clarga/verify.hpp"

namespace clarga {

using nlohmann::json;

struct AblateSettings {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<std::string> variants;  // row labels; empty = all
};

struct RobustnessSettings {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<std::string> variants = {"CLARGA", "Early Fusion (Mean)"};
};

struct VerifySettings {
  std::vector<std::string> propositions = {"deepsets_recovery", "lipschitz_missing_modality",
                                           "layernorm_noncollapse", "infonce_mi_bound"};
  DeepSetsCertConfig deepsets;
  LipschitzCertConfig lipschitz;
  bool report_trained_lipschitz = true;  // unconstrained run, never asserted
  LayerNormCertConfig layernorm;
  MiCertConfig mi;
};

struct InspectSettings {
  std::vector<std::size_t> samples = {0, 1, 2};
  std::string split = "test";
};

struct ExperimentConfig {
  SynthTaskSpec data;
  ModelConfig model;  // input_dims, M, classes and task follow `data`
  TrainConfig train;
  AblateSettings ablate;
  RobustnessSettings robustness;
  VerifySettings verify;
  InspectSettings inspect;
};

// Model shape fields taken from the data.
inline ModelConfig model_for_data(ModelConfig m, const std::vector<std::size_t>& input_dims,
                                  TaskKind task, std::size_t num_classes) {
  m.input_dims = input_dims;
  m.fusion.M = input_dims.size();
  m.task = task;
  // Regression ignores num_classes; 2 keeps validate() quiet.
  m.num_classes = task == TaskKind::kClassification ? num_classes : 2;
  m.validate();
  return m;
}

inline ModelConfig model_for_data(const ModelConfig& m, const Dataset& d) {
  return model_for_data(m, d.input_dims, d.task, d.num_classes);
}

namespace detail {

inline ModelConfig parse_model_section(const json& j, ModelConfig c) {
  ObjectReader r(j, "model");
  r.get("encoder_hidden", c.encoder_hidden);
  r.get("head_hidden", c.head_hidden);
  r.get("mask_init_sd", c.mask_init_sd);
  if (r.has("fusion")) c.fusion = parse_fusion(r.at("fusion"), c.fusion, false);
  r.finish();
  return c;
}

inline bool known_variant(const std::string& label) {
  for (const auto& v : ablation_variants())
    if (v.label == label) return true;
  return false;
}

inline void check_variants(const std::vector<std::string>& labels, const std::string& where) {
  for (const auto& l : labels)
    if (!known_variant(l)) throw ConfigError(where + ": unknown variant '" + l + "'");
}

}  // namespace detail

inline std::vector<Variant> select_variants(const std::vector<std::string>& labels) {
  if (labels.empty()) return ablation_variants();
  std::vector<Variant> out;
  for (const auto& v : ablation_variants())
    for (const auto& l : labels)
      if (v.label == l) out.push_back(v);
  return out;
}

inline ExperimentConfig parse_experiment(const json& j) {
  ExperimentConfig e;
  ObjectReader top(j, "config");
  if (top.has("data")) e.data = parse_task_spec(top.at("data"), e.data);
  if (top.has("model")) e.model = detail::parse_model_section(top.at("model"), e.model);
  if (top.has("train")) e.train = parse_train(top.at("train"), e.train);
  if (top.has("ablate")) {
    ObjectReader r(top.at("ablate"), "ablate");
    r.get("seeds", e.ablate.seeds);
    r.get("variants", e.ablate.variants);
    r.finish();
    detail::check_variants(e.ablate.variants, "ablate.variants");
    if (e.ablate.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  }
  if (top.has("robustness")) {
    ObjectReader r(top.at("robustness"), "robustness");
    r.get("seeds", e.robustness.seeds);
    r.get("variants", e.robustness.variants);
    r.finish();
    detail::check_variants(e.robustness.variants, "robustness.variants");
    if (e.robustness.seeds.empty()) throw ConfigError("robustness.seeds must not be empty");
  }
  if (top.has("verify")) {
    auto& v = e.verify;
    ObjectReader r(top.at("verify"), "verify");
    r.get("propositions", v.propositions);
    r.get("lipschitz_trials", v.lipschitz.trials);
    r.get("report_trained_lipschitz", v.report_trained_lipschitz);
    r.get("layernorm_batches", v.layernorm.batches);
    r.get("deepsets_probes", v.deepsets.probes);
    r.get("mi_seeds", v.mi.seeds);
    r.get("mi_train_steps", v.mi.train_steps);
    r.get("mi_eval_batches", v.mi.eval_batches);
    r.get("mi_dim", v.mi.dim);
    r.finish();
    for (const auto& p : v.propositions) {
      if (p != "deepsets_recovery" && p != "lipschitz_missing_modality" &&
          p != "layernorm_noncollapse" && p != "infonce_mi_bound") {
        throw ConfigError("verify.propositions: unknown proposition '" + p + "'");
      }
    }
    if (v.mi.seeds == 0 || v.mi.dim == 0) throw ConfigError("verify: mi_seeds and mi_dim must be positive");
  }
  if (top.has("inspect")) {
    ObjectReader r(top.at("inspect"), "inspect");
    r.get("samples", e.inspect.samples);
    r.get("split", e.inspect.split);
    r.finish();
    if (e.inspect.split != "train" && e.inspect.split != "val" && e.inspect.split != "test") {
      throw ConfigError("inspect.split must be train, val or test");
    }
  }
  top.finish();
  e.model = model_for_data(e.model, e.data.input_dims,
                           e.data.regression ? TaskKind::kRegression : TaskKind::kClassification,
                           e.data.num_classes);
  return e;
}

inline json experiment_to_json(const ExperimentConfig& e) {
  json data;
  to_json(data, e.data);
  json fusion = fusion_to_json(e.model.fusion);
  for (const char* k : {"uniform_attention", "use_residual", "early_fusion_mean", "M"}) fusion.erase(k);
  return json{{"data", data},
              {"model", {{"encoder_hidden", e.model.encoder_hidden},
                         {"head_hidden", e.model.head_hidden},
                         {"mask_init_sd", e.model.mask_init_sd},
                         {"fusion", fusion}}},
              {"train", train_to_json(e.train)},
              {"ablate", {{"seeds", e.ablate.seeds}, {"variants", e.ablate.variants}}},
              {"robustness", {{"seeds", e.robustness.seeds}, {"variants", e.robustness.variants}}},
              {"verify", {{"propositions", e.verify.propositions},
                          {"lipschitz_trials", e.verify.lipschitz.trials},
                          {"report_trained_lipschitz", e.verify.report_trained_lipschitz},
                          {"layernorm_batches", e.verify.layernorm.batches},
                          {"deepsets_probes", e.verify.deepsets.probes},
                          {"mi_seeds", e.verify.mi.seeds},
                          {"mi_train_steps", e.verify.mi.train_steps},
                          {"mi_eval_batches", e.verify.mi.eval_batches},
                          {"mi_dim", e.verify.mi.dim}}},
              {"inspect", {{"samples", e.inspect.samples}, {"split", e.inspect.split}}}};
}

// --seed replaces every seed in the experiment; multi-seed lists become
// seed, seed+1, ...
inline void override_seed(ExperimentConfig& e, std::uint64_t seed) {
  e.data.seed = seed;
  e.train.seed = seed;
  for (std::size_t i = 0; i < e.ablate.seeds.size(); ++i) e.ablate.seeds[i] = seed + i;
  for (std::size_t i = 0; i < e.robustness.seeds.size(); ++i) e.robustness.seeds[i] = seed + i;
  e.verify.deepsets.seed = seed;
  e.verify.lipschitz.seed = seed;
  e.verify.layernorm.seed = seed;
  e.verify.mi.base_seed = seed;
}

// ------------------------------------------------------------ trace JSON

// Layout, version 1:
// {"version": 1, "M": M, "H": H, "layers": D,
//  "samples": [{"index": i, "presence": [0|1 x M],
//               "alpha": [[M*M floats, row-major, destination-major] per head],
//               "alpha_layers": [[[M*M] per head] per layer],
//               "beta": [M floats]}]}
// "alpha" is the first layer's coefficients; "presence" uses 1 = missing.
inline json trace_to_json(const AttentionTrace& tr, const std::vector<std::size_t>& rows,
                          const std::vector<std::size_t>& indices) {
  const std::size_t M = tr.M, H = tr.H;
  json samples = json::array();
  for (std::size_t n = 0; n < rows.size(); ++n) {
    const std::size_t b = rows[n];
    json s;
    s["index"] = indices[n];
    std::vector<int> presence(M);
    for (std::size_t m = 0; m < M; ++m) presence[m] = tr.presence[b * M + m];
    s["presence"] = presence;
    json layers = json::array();
    for (const Tensor& a : tr.alpha_layers) {
      json heads = json::array();
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = (b * H + h) * M * M;
        heads.push_back(std::vector<double>(a.data().begin() + off, a.data().begin() + off + M * M));
      }
      layers.push_back(heads);
    }
    s["alpha"] = layers.empty() ? json::array() : layers.front();
    s["alpha_layers"] = layers;
    if (tr.beta.defined()) {
      s["beta"] = std::vector<double>(tr.beta.data().begin() + b * M,
                                      tr.beta.data().begin() + (b + 1) * M);
    } else {
      s["beta"] = json::array();
    }
    samples.push_back(s);
  }
  return json{{"version", 1}, {"M", M}, {"H", H}, {"layers", tr.alpha_layers.size()},
              {"samples", samples}};
}

// ------------------------------------------------------------ tables

inline std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

// "Model,Acc. (%),MAE"; MAE is blank for classification.
inline std::string ablation_csv(const AblationTable& t, TaskKind task) {
  std::string out = "Model,Acc. (%),MAE\n";
  for (const auto& r : t.rows) {
    out += csv_field(r.label) + ",";
    out += task == TaskKind::kClassification ? fmt2(100.0 * r.mean_accuracy) : "";
    out += ",";
    out += task == TaskKind::kRegression ? fmt2(r.mean_mae) : "";
    out += "\n";
  }
  return out;
}

inline json ablation_to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"model", r.label}, {"val_accuracy", r.val_accuracy}, {"val_mae", r.val_mae},
                    {"mean_accuracy", r.mean_accuracy}, {"mean_mae", r.mean_mae}});
  return json{{"version", 1}, {"seeds", t.seeds}, {"rows", rows}};
}

// "Model,Scenario,Acc. (%),Drop (pp)"
inline std::string robustness_csv(const std::vector<RobustnessRow>& rows) {
  std::string out = "Model,Scenario,Acc. (%),Drop (pp)\n";
  for (const auto& r : rows)
    out += csv_field(r.model) + "," + csv_field(r.scenario) + "," + fmt2(100.0 * r.accuracy) +
           "," + fmt2(r.drop_pp) + "\n";
  return out;
}

inline json robustness_to_json(const std::vector<RobustnessRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json j{{"model", r.model}, {"scenario", r.scenario}, {"accuracy", r.accuracy},
           {"drop_pp", r.drop_pp}, {"evaluated", r.evaluated}, {"skipped", r.skipped}};
    j["dropped"] = r.dropped ? json(*r.dropped) : json(nullptr);
    out.push_back(j);
  }
  return json{{"version", 1}, {"rows", out}};
}

// Seed-averaged rows of the same model and scenario, order preserved.
inline std::vector<RobustnessRow> average_robustness(
    const std::vector<std::vector<RobustnessRow>>& runs) {
  if (runs.empty()) return {};
  std::vector<RobustnessRow> out = runs.front();
  for (std::size_t i = 1; i < runs.size(); ++i)
    for (std::size_t r = 0; r < out.size(); ++r) {
      out[r].accuracy += runs[i][r].accuracy;
      out[r].drop_pp += runs[i][r].drop_pp;
      out[r].evaluated += runs[i][r].evaluated;
      out[r].skipped += runs[i][r].skipped;
    }
  const double n = static_cast<double>(runs.size());
  for (auto& r : out) {
    r.accuracy /= n;
    r.drop_pp /= n;
  }
  return out;
}

}  // namespace clarga
