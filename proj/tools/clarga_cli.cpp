// clarga: dataset generation, training, ablations, robustness tables,
// certifications and attention inspection from one binary.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "clarga/clarga.hpp"

namespace fs = std::filesystem;
using namespace clarga;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kCheckpoint = 4, kCertification = 5 };

struct Args {
  std::string command;
  std::string config_path;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string data;
  std::vector<std::string> checkpoints;
};

// Raised when a certification with a hard assertion fails.
struct CertificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Run {
  Args args;
  ExperimentConfig cfg;
  bool cfg_ready = false;
  std::vector<std::string> artifacts;
  json extra = json::object();  // subcommand-specific manifest fields

  fs::path path(const std::string& name) const { return fs::path(args.out) / name; }

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream os(path(name), std::ios::binary);
    os << text;
    if (!os) throw DataError("cannot write " + path(name).string());
    artifacts.push_back(name);
  }
  void write_json(const std::string& name, const json& j) { write_text(name, j.dump(2) + "\n"); }
};

json versions() {
  std::ostringstream eigen, nl;
  eigen << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION;
  nl << NLOHMANN_JSON_VERSION_MAJOR << '.' << NLOHMANN_JSON_VERSION_MINOR << '.'
     << NLOHMANN_JSON_VERSION_PATCH;
  return json{{"clarga", kToolVersion}, {"eigen", eigen.str()}, {"nlohmann_json", nl.str()},
              {"cli11", CLI11_VERSION}, {"compiler", __VERSION__},
              {"checkpoint_format", 1}, {"dataset_format", 1}, {"trace_format", 1},
              {"report_format", 1}};
}

ExperimentConfig load_config(const Args& a) {
  json j = json::object();
  if (!a.config_path.empty()) {
    std::ifstream is(a.config_path);
    if (!is) throw ConfigError("cannot open config " + a.config_path);
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError(a.config_path + ": malformed JSON: " + e.what());
    }
  }
  ExperimentConfig cfg = parse_experiment(j);
  if (a.seed) override_seed(cfg, *a.seed);
  return cfg;
}

// Splits from --data (a datagen output directory) or generated from config.
SynthTask load_task(Run& run) {
  if (run.args.data.empty()) return generate_classification(run.cfg.data);
  const fs::path dir(run.args.data);
  if (!fs::is_directory(dir)) throw DataError("--data must be a directory written by datagen: " + dir.string());
  SynthTask t;
  t.spec = run.cfg.data;
  t.train = read_dataset((dir / "train.clds").string());
  t.val = read_dataset((dir / "val.clds").string());
  t.test = read_dataset((dir / "test.clds").string());
  for (const Dataset* d : {&t.val, &t.test}) {
    if (d->input_dims != t.train.input_dims || d->task != t.train.task ||
        d->num_classes != t.train.num_classes) {
      throw DataError("dataset splits in " + dir.string() + " disagree on shape");
    }
  }
  return t;
}

ModelConfig model_config_for(const Run& run, const Dataset& d) {
  return model_for_data(run.cfg.model, d);
}

Model load_model_for(const std::string& path, const Dataset& d, json* extra = nullptr) {
  Model m = load_checkpoint(path, nullptr, extra);
  const auto& c = m.config();
  if (c.input_dims != d.input_dims || c.task != d.task ||
      (d.task == TaskKind::kClassification && c.num_classes != d.num_classes)) {
    throw CheckpointError(path + ": model shape (hash " + model_config_hash(c) +
                          ") is incompatible with the dataset");
  }
  return m;
}

// ------------------------------------------------------------ subcommands

void cmd_datagen(Run& run) {
  const SynthTask t = generate_classification(run.cfg.data);
  json spec;
  to_json(spec, run.cfg.data);
  json summary{{"version", 1}, {"spec", spec}, {"splits", json::object()}};
  for (auto [name, d] : {std::pair<const char*, const Dataset*>{"train", &t.train},
                         {"val", &t.val}, {"test", &t.test}}) {
    const std::string file = std::string(name) + ".clds";
    const double bayes = bayes_accuracy(t.class_means, *d);
    json side{{"version", 1}, {"format", "clarga-dataset"}, {"split", name},
              {"size", d->size()}, {"spec", spec}, {"bayes_accuracy", bayes}};
    write_dataset(run.path(file).string(), *d, side);
    run.artifacts.push_back(file);
    run.artifacts.push_back(file + ".json");
    summary["splits"][name] = {{"size", d->size()}, {"bayes_accuracy", bayes}};
  }
  summary["most_informative_modality"] = most_informative_modality(t.class_means, t.val);
  run.write_json("datagen_summary.json", summary);
}

void cmd_train(Run& run) {
  const SynthTask t = load_task(run);
  const ModelConfig mc = model_config_for(run, t.train);
  std::ofstream metrics(run.path("metrics.jsonl"), std::ios::binary);
  if (!metrics) throw DataError("cannot write metrics.jsonl");
  run.artifacts.push_back("metrics.jsonl");
  TrainHooks hooks;
  hooks.metrics = &metrics;
  TrainResult r = train(mc, t.train, t.val, &t.test, run.cfg.train, hooks);
  save_checkpoint(run.path("model.ckpt").string(), r.model,
                  {{"train", train_to_json(run.cfg.train)}});
  run.artifacts.push_back("model.ckpt");
  r.report.checkpoint_path = "model.ckpt";
  run.write_json("run_report.json", report_to_json(r.report));
  run.extra["model_config_hash"] = model_config_hash(r.model.config());
}

void cmd_ablate(Run& run) {
  const SynthTask t = load_task(run);
  const ModelConfig mc = model_config_for(run, t.train);
  const AblationTable table =
      run_ablation_suite(mc, t, run.cfg.train, run.cfg.ablate.seeds,
                         select_variants(run.cfg.ablate.variants));
  run.write_text("ablation.csv", ablation_csv(table, t.train.task));
  run.write_json("ablation.json", ablation_to_json(table));
}

void cmd_robustness(Run& run) {
  const SynthTask t = load_task(run);
  if (t.test.task != TaskKind::kClassification) {
    throw ConfigError("robustness tables need a classification task");
  }
  std::vector<RobustnessRow> rows;
  if (!run.args.checkpoints.empty()) {
    for (const auto& p : run.args.checkpoints) {
      json extra;
      const Model m = load_model_for(p, t.test, &extra);
      std::string label = fs::path(p).stem().string();
      if (extra.contains("label")) label = extra["label"].get<std::string>();
      for (auto& r : run_robustness(label, m, t.test)) rows.push_back(r);
    }
  } else {
    // Train each listed variant per seed; rows are seed averages.
    const ModelConfig mc = model_config_for(run, t.train);
    for (const auto& v : select_variants(run.cfg.robustness.variants)) {
      std::vector<std::vector<RobustnessRow>> runs;
      for (auto seed : run.cfg.robustness.seeds) {
        TrainConfig c = run.cfg.train;
        c.seed = seed;
        c.ablation = v.ablation;
        c.baseline = v.baseline;
        const TrainResult r = train(mc, t.train, t.val, nullptr, c);
        runs.push_back(run_robustness(v.label, r.model, t.test));
      }
      for (auto& r : average_robustness(runs)) rows.push_back(r);
    }
  }
  run.write_text("robustness.csv", robustness_csv(rows));
  json j = robustness_to_json(rows);
  if (run.args.data.empty()) {
    j["most_informative_modality"] = most_informative_modality(
        generate_classification(run.cfg.data).class_means, t.val);
  }
  run.write_json("robustness.json", j);
}

void cmd_verify(Run& run) {
  auto& v = run.cfg.verify;
  auto wants = [&](const std::string& p) {
    return std::find(v.propositions.begin(), v.propositions.end(), p) != v.propositions.end();
  };
  std::vector<CertificationReport> reports;
  std::optional<SynthTask> task;
  std::optional<Model> model;
  auto ensure_model = [&]() {
    if (model) return;
    task = load_task(run);
    if (!run.args.checkpoints.empty()) {
      model = load_model_for(run.args.checkpoints.front(), task->test);
    } else {
      Rng rng(run.cfg.train.seed);
      model = Model::create(model_config_for(run, task->test), rng);
    }
  };
  if (wants("deepsets_recovery")) reports.push_back(certify_deepsets_recovery(v.deepsets));
  if (wants("lipschitz_missing_modality")) {
    ensure_model();
    LipschitzCertConfig c = v.lipschitz;
    c.certification_mode = true;
    reports.push_back(certify_lipschitz_missing_modality(*model, task->test, c));
    if (v.report_trained_lipschitz) {
      c.certification_mode = false;
      reports.push_back(certify_lipschitz_missing_modality(*model, task->test, c));
    }
  }
  if (wants("layernorm_noncollapse")) {
    ensure_model();
    reports.push_back(certify_layernorm_noncollapse(*model, task->test, v.layernorm));
  }
  if (wants("infonce_mi_bound")) reports.push_back(certify_infonce_mi_bound(v.mi));

  std::string table = "Proposition,Trials,Max violation,Tolerance,Violations,Asserted,Passed\n";
  json all = json::array();
  std::vector<std::string> failed;
  for (const auto& r : reports) {
    run.write_json("certification_" + r.proposition + ".json", report_to_json(r));
    std::ostringstream row;
    row.precision(6);
    row << r.proposition << ',' << r.trials << ',' << r.max_violation << ',' << r.tolerance << ','
        << r.violations << ',' << (r.asserted ? "yes" : "no") << ',' << (r.passed ? "yes" : "no")
        << '\n';
    table += row.str();
    all.push_back({{"proposition", r.proposition}, {"passed", r.passed}, {"asserted", r.asserted},
                   {"violations", r.violations}, {"max_violation", r.max_violation}});
    if (!r.passed) failed.push_back(r.proposition);
  }
  run.write_text("certifications.csv", table);
  run.write_json("certifications.json", json{{"version", 1}, {"reports", all}});
  std::cout << table;
  if (!failed.empty()) {
    std::string msg = "certification failed:";
    for (const auto& f : failed) msg += " " + f;
    throw CertificationFailure(msg);
  }
}

void cmd_inspect(Run& run) {
  const SynthTask t = load_task(run);
  const Dataset& split = run.cfg.inspect.split == "train" ? t.train
                         : run.cfg.inspect.split == "val" ? t.val
                                                          : t.test;
  Model model = [&] {
    if (!run.args.checkpoints.empty()) return load_model_for(run.args.checkpoints.front(), split);
    Rng rng(run.cfg.train.seed);
    return Model::create(model_config_for(run, split), rng);
  }();
  if (model.config().arch != Architecture::kClarga) {
    throw ConfigError("inspect needs a clarga model; baselines have no attention");
  }
  std::vector<std::size_t> order;
  for (auto i : run.cfg.inspect.samples) {
    if (i >= split.size()) throw DataError("inspect: sample index " + std::to_string(i) + " out of range");
    order.push_back(i);
  }
  if (order.empty()) throw ConfigError("inspect.samples must not be empty");
  const ModalityBatch batch = split.batch(order, 0, order.size());
  const auto out = model.forward(batch);
  std::vector<std::size_t> rows(order.size());
  std::iota(rows.begin(), rows.end(), 0);
  json j = trace_to_json(out.fusion.trace, rows, order);
  j["split"] = run.cfg.inspect.split;
  run.write_json("attention_trace.json", j);
}

int dispatch(Run& run) {
  const std::string& c = run.args.command;
  if (c == "datagen") cmd_datagen(run);
  else if (c == "train") cmd_train(run);
  else if (c == "ablate") cmd_ablate(run);
  else if (c == "robustness") cmd_robustness(run);
  else if (c == "verify") cmd_verify(run);
  else if (c == "inspect") cmd_inspect(run);
  return kOk;
}

void write_manifest(const Run& run, int code, const std::string& error) {
  json m{{"tool", "clarga"},
         {"subcommand", run.args.command},
         {"status", code == kOk ? "ok" : "error"},
         {"exit_code", code},
         {"seed", run.cfg_ready ? json(run.cfg.train.seed) : json(nullptr)},
         {"deterministic", run.args.deterministic},
         {"inputs", {{"config", run.args.config_path}, {"data", run.args.data},
                     {"checkpoints", run.args.checkpoints}}},
         {"artifacts", run.artifacts},
         {"versions", versions()}};
  if (run.cfg_ready) {
    const json cfg = experiment_to_json(run.cfg);
    m["config"] = cfg;
    m["config_hash"] = le::hex64(le::fnv1a(cfg.dump()));
  }
  if (!error.empty()) m["error"] = error;
  for (auto it = run.extra.begin(); it != run.extra.end(); ++it) m[it.key()] = it.value();
  std::ofstream os(fs::path(run.args.out) / "manifest.json", std::ios::binary);
  os << m.dump(2) << "\n";
}

int execute(Run& run) {
  std::error_code ec;
  fs::create_directories(run.args.out, ec);
  if (ec) {
    std::cerr << "error: cannot create output directory " << run.args.out << ": " << ec.message() << "\n";
    return kData;
  }
  int code = kOk;
  std::string error;
  try {
    run.cfg = load_config(run.args);
    run.cfg_ready = true;
    code = dispatch(run);
  } catch (const ConfigError& e) {
    code = kConfig, error = e.what();
  } catch (const DataError& e) {
    code = kData, error = e.what();
  } catch (const CheckpointError& e) {
    code = kCheckpoint, error = e.what();
  } catch (const CertificationFailure& e) {
    code = kCertification, error = e.what();
  } catch (const std::exception& e) {
    code = kInternal, error = e.what();
  }
  if (!error.empty()) std::cerr << "error: " << error << "\n";
  write_manifest(run, code, error);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CLARGA multimodal graph fusion: data, training, ablations, certification"};
  app.require_subcommand(1, 1);
  Args args;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"datagen", "generate the synthetic task splits"},
      {"train", "train one model; writes metrics.jsonl, model.ckpt and run_report.json"},
      {"ablate", "train every ablation variant and baseline over seeds"},
      {"robustness", "accuracy with each modality dropped at test time"},
      {"verify", "run the certification suite"},
      {"inspect", "dump attention coefficients for chosen samples"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", args.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", args.out, "output directory")->capture_default_str();
    sub->add_option("--seed", args.seed, "replaces every seed in the config");
    sub->add_flag("--deterministic", args.deterministic,
                  "single-threaded, byte-reproducible run (the only mode; recorded in the manifest)");
    if (name != "datagen") sub->add_option("--data", args.data, "directory written by datagen");
    if (name == "robustness" || name == "verify" || name == "inspect")
      sub->add_option("--checkpoint", args.checkpoints, "model checkpoint (repeatable for robustness)");
    sub->callback([&args, name = name] { args.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfig;
  }
  Eigen::setNbThreads(1);
  Run run;
  run.args = args;
  return execute(run);
}
