#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clarga/binary_io.hpp"
#include "clarga/encoders.hpp"
#include "clarga/errors.hpp"
#include "clarga/objective.hpp"
#include "clarga/rng.hpp"

namespace clarga {

using nlohmann::json;

// Synthetic multimodal classification task. Each class y owns a shared code
// mu_y and, per modality, a private code nu_y^m (both N(0, I_k)). Modality m
// observes
//   x_m = A_m sqrt(rho) mu_y + B_m sqrt(1 - rho) nu_y^m + noise_sigma * eps
// so rho = 1 makes every modality carry the same (full) evidence and rho = 0
// gives each modality an independent view of the label.
struct SynthTaskSpec {
  std::size_t M = 3;
  std::vector<std::size_t> input_dims = {20, 20, 20};
  std::size_t num_classes = 4;
  bool regression = false;  // target = class index as a number
  std::size_t N = 6000;
  double rho = 0.5;
  double noise_sigma = 1.0;
  std::vector<double> missing_rate = {0.0, 0.0, 0.0};
  std::size_t latent_dim = 8;
  std::uint64_t seed = 1;

  static SynthTaskSpec desk_preset() { return {}; }

  void validate() const {
    if (M == 0) throw ConfigError("datagen: M must be positive");
    if (input_dims.size() != M) {
      throw ConfigError("datagen: input_dims has " + std::to_string(input_dims.size()) +
                        " entries for M = " + std::to_string(M));
    }
    for (auto d : input_dims)
      if (d == 0) throw ConfigError("datagen: input_dims must be positive");
    if (missing_rate.size() != M) {
      throw ConfigError("datagen: missing_rate needs one entry per modality");
    }
    for (double r : missing_rate)
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("datagen: missing_rate must lie in [0, 1)");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("datagen: rho must lie in [0, 1]");
    if (!(noise_sigma >= 0.0)) throw ConfigError("datagen: noise_sigma must be non-negative");
    if (num_classes < 2) throw ConfigError("datagen: need at least 2 classes");
    if (N < 20) throw ConfigError("datagen: N must be at least 20");
    if (latent_dim == 0) throw ConfigError("datagen: latent_dim must be positive");
  }
};

inline void to_json(json& j, const SynthTaskSpec& s) {
  j = json{{"M", s.M},
           {"input_dims", s.input_dims},
           {"num_classes", s.num_classes},
           {"regression", s.regression},
           {"N", s.N},
           {"rho", s.rho},
           {"noise_sigma", s.noise_sigma},
           {"missing_rate", s.missing_rate},
           {"latent_dim", s.latent_dim},
           {"seed", s.seed}};
}

struct Dataset {
  std::vector<std::size_t> input_dims;
  TaskKind task = TaskKind::kClassification;
  std::size_t num_classes = 0;
  std::vector<Sample> samples;

  std::size_t M() const { return input_dims.size(); }
  std::size_t size() const { return samples.size(); }

  ModalityBatch batch(const std::vector<std::size_t>& order, std::size_t begin,
                      std::size_t end) const {
    ModalityBatch b;
    b.num_modalities = M();
    b.samples.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) b.samples.push_back(samples[order[i]]);
    return b;
  }

  ModalityBatch all() const { return {M(), samples}; }
};

inline Targets targets_of(const ModalityBatch& batch, TaskKind kind) {
  Targets t;
  t.kind = kind;
  for (const auto& s : batch.samples) {
    if (kind == TaskKind::kClassification) t.classes.push_back(s.label);
    else t.values.push_back(s.target);
  }
  return t;
}

struct SynthTask {
  SynthTaskSpec spec;
  // class_means[m][c] is E[x_m | y = c].
  std::vector<std::vector<std::vector<double>>> class_means;
  Dataset train, val, test;
};

namespace detail {

inline std::vector<std::vector<std::vector<double>>> draw_class_means(
    const SynthTaskSpec& spec, Rng& rng) {
  const std::size_t k = spec.latent_dim, p = spec.num_classes;
  auto gaussian = [&](std::size_t n, double sd) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, sd);
    return v;
  };
  std::vector<std::vector<double>> shared(p);
  for (auto& c : shared) c = gaussian(k, 1.0);
  std::vector<std::vector<std::vector<double>>> means(spec.M);
  const double a = std::sqrt(spec.rho), b = std::sqrt(1.0 - spec.rho);
  for (std::size_t m = 0; m < spec.M; ++m) {
    const std::size_t dim = spec.input_dims[m];
    const double sd = 1.0 / std::sqrt(static_cast<double>(k));
    const auto A = gaussian(dim * k, sd);
    const auto B = gaussian(dim * k, sd);
    means[m].resize(p);
    for (std::size_t c = 0; c < p; ++c) {
      const auto priv = gaussian(k, 1.0);
      auto& mu = means[m][c];
      mu.assign(dim, 0.0);
      for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = 0; j < k; ++j)
          mu[i] += a * A[i * k + j] * shared[c][j] + b * B[i * k + j] * priv[j];
    }
  }
  return means;
}

}  // namespace detail

// The class means depend only on the spec (seed included), so they can be
// rebuilt from a dataset sidecar.
inline std::vector<std::vector<std::vector<double>>> synth_class_means(
    const SynthTaskSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng means_rng = root.fork();
  return detail::draw_class_means(spec, means_rng);
}

inline SynthTask generate_classification(const SynthTaskSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng means_rng = root.fork();
  Rng sample_rng = root.fork();
  SynthTask task;
  task.spec = spec;
  task.class_means = detail::draw_class_means(spec, means_rng);

  std::vector<std::size_t> labels(spec.N);
  for (std::size_t i = 0; i < spec.N; ++i) labels[i] = i % spec.num_classes;
  sample_rng.shuffle(labels);

  std::vector<Sample> all(spec.N);
  for (std::size_t i = 0; i < spec.N; ++i) {
    Sample& s = all[i];
    s.label = labels[i];
    s.target = static_cast<double>(labels[i]);
    s.inputs.resize(spec.M);
    s.missing.assign(spec.M, 0);
    do {
      for (std::size_t m = 0; m < spec.M; ++m)
        s.missing[m] = sample_rng.bernoulli(spec.missing_rate[m]) ? 1 : 0;
    } while (s.present_count() == 0);
    for (std::size_t m = 0; m < spec.M; ++m) {
      // Noise is drawn for every slot so the stream does not depend on the
      // missing pattern.
      std::vector<double> x = task.class_means[m][s.label];
      for (auto& v : x) v += spec.noise_sigma * sample_rng.normal();
      if (!s.missing[m]) s.inputs[m] = std::move(x);
    }
  }

  const std::size_t n_train = spec.N * 70 / 100, n_val = spec.N * 15 / 100;
  auto make = [&](std::size_t begin, std::size_t end) {
    Dataset d;
    d.input_dims = spec.input_dims;
    d.task = spec.regression ? TaskKind::kRegression : TaskKind::kClassification;
    d.num_classes = spec.num_classes;
    d.samples.assign(all.begin() + begin, all.begin() + end);
    return d;
  };
  task.train = make(0, n_train);
  task.val = make(n_train, n_train + n_val);
  task.test = make(n_train + n_val, spec.N);
  return task;
}

// Nearest class mean over the present modalities, optionally ignoring one
// modality. Under the generator's isotropic equal-covariance noise this is
// the Bayes classifier (equal priors).
inline std::size_t bayes_predict(
    const std::vector<std::vector<std::vector<double>>>& class_means,
    const Sample& s, std::optional<std::size_t> only = std::nullopt,
    std::optional<std::size_t> drop = std::nullopt) {
  const std::size_t M = class_means.size(), p = class_means.front().size();
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < p; ++c) {
    double dist = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      if (s.missing[m] || (only && *only != m) || (drop && *drop == m)) continue;
      const auto& mu = class_means[m][c];
      for (std::size_t i = 0; i < mu.size(); ++i) {
        const double e = (*s.inputs[m])[i] - mu[i];
        dist += e * e;
      }
    }
    if (dist < best_d) {
      best_d = dist;
      best = c;
    }
  }
  return best;
}

inline double bayes_accuracy(
    const std::vector<std::vector<std::vector<double>>>& class_means,
    const Dataset& data, std::optional<std::size_t> only = std::nullopt) {
  std::size_t hit = 0, n = 0;
  for (const auto& s : data.samples) {
    if (only && s.missing[*only]) continue;
    hit += bayes_predict(class_means, s, only) == s.label ? 1 : 0;
    ++n;
  }
  return n == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(n);
}

// Modality whose observation alone gives the highest Bayes accuracy; ties go
// to the lowest index.
inline std::size_t most_informative_modality(
    const std::vector<std::vector<std::vector<double>>>& class_means,
    const Dataset& data) {
  std::size_t best = 0;
  double best_acc = -1.0;
  for (std::size_t m = 0; m < class_means.size(); ++m) {
    const double acc = bayes_accuracy(class_means, data, m);
    if (acc > best_acc + 1e-12) {
      best_acc = acc;
      best = m;
    }
  }
  return best;
}

// Coordinate-wise bivariate Gaussians: z = r h + sqrt(1 - r^2) eps.
struct GaussianPairSpec {
  std::size_t d = 1;
  double r = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    if (d == 0) throw ConfigError("gaussian pairs: d must be positive");
    if (!(std::abs(r) < 1.0)) throw ConfigError("gaussian pairs: |r| must be < 1");
  }
  double true_mi() const {
    return -0.5 * static_cast<double>(d) * std::log(1.0 - r * r);
  }
};

struct GaussianPairs {
  std::size_t d = 0, n = 0;
  std::vector<double> h, z;  // row-major [n x d]
  double true_mi = 0.0;
};

inline GaussianPairs generate_gaussian_pairs(const GaussianPairSpec& spec,
                                             std::size_t n) {
  spec.validate();
  Rng rng(spec.seed);
  GaussianPairs out;
  out.d = spec.d;
  out.n = n;
  out.true_mi = spec.true_mi();
  out.h.resize(n * spec.d);
  out.z.resize(n * spec.d);
  const double c = std::sqrt(1.0 - spec.r * spec.r);
  for (std::size_t i = 0; i < n * spec.d; ++i) {
    out.h[i] = rng.normal();
    out.z[i] = spec.r * out.h[i] + c * rng.normal();
  }
  return out;
}

// As a two-modality dataset (h, z) with zero targets, for serialization.
inline Dataset gaussian_pairs_dataset(const GaussianPairs& g) {
  Dataset d;
  d.input_dims = {g.d, g.d};
  d.task = TaskKind::kRegression;
  d.num_classes = 0;
  d.samples.resize(g.n);
  for (std::size_t i = 0; i < g.n; ++i) {
    auto& s = d.samples[i];
    s.missing = {0, 0};
    s.inputs = {std::vector<double>(g.h.begin() + i * g.d, g.h.begin() + (i + 1) * g.d),
                std::vector<double>(g.z.begin() + i * g.d, g.z.begin() + (i + 1) * g.d)};
  }
  return d;
}

// Dataset file layout, all little-endian:
//   "CLRGDS01"               8 bytes
//   u32 version (1)
//   u32 M
//   u64 input_dims[M]
//   u64 N
//   u8  task (0 classification, 1 regression)
//   u64 num_classes
//   N records of:
//     u8  missing[M]
//     f64 x_m[input_dims[m]] for each present m, in modality order
//     u64 label
//     f64 target
// A JSON sidecar "<file>.json" carries the generating spec.
inline constexpr char kDatasetMagic[8] = {'C', 'L', 'R', 'G', 'D', 'S', '0', '1'};

inline void write_dataset(const std::string& path, const Dataset& data,
                          const json& sidecar) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write(kDatasetMagic, 8);
  le::put_u32(os, 1);
  le::put_u32(os, static_cast<std::uint32_t>(data.M()));
  for (auto d : data.input_dims) le::put_u64(os, d);
  le::put_u64(os, data.size());
  le::put_u8(os, data.task == TaskKind::kRegression ? 1 : 0);
  le::put_u64(os, data.num_classes);
  for (const auto& s : data.samples) {
    for (auto r : s.missing) le::put_u8(os, r);
    for (std::size_t m = 0; m < data.M(); ++m)
      if (!s.missing[m])
        for (double v : *s.inputs[m]) le::put_f64(os, v);
    le::put_u64(os, s.label);
    le::put_f64(os, s.target);
  }
  if (!os) throw DataError("write failed for " + path);
  std::ofstream js(path + ".json");
  js << sidecar.dump(2) << "\n";
  if (!js) throw DataError("write failed for " + path + ".json");
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset " + path);
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kDatasetMagic)) {
    throw DataError(path + ": not a dataset file (bad magic)");
  }
  if (le::get_u32(is, "version") != 1) throw DataError(path + ": unsupported version");
  Dataset d;
  const std::uint32_t M = le::get_u32(is, "M");
  if (M == 0 || M > 1024) throw DataError(path + ": implausible modality count");
  for (std::uint32_t m = 0; m < M; ++m) d.input_dims.push_back(le::get_u64(is, "input_dims"));
  const std::uint64_t N = le::get_u64(is, "N");
  const std::uint8_t task = le::get_u8(is, "task");
  if (task > 1) throw DataError(path + ": unknown task kind");
  d.task = task == 1 ? TaskKind::kRegression : TaskKind::kClassification;
  d.num_classes = le::get_u64(is, "num_classes");
  d.samples.resize(N);
  for (auto& s : d.samples) {
    s.missing.resize(M);
    s.inputs.resize(M);
    for (auto& r : s.missing) {
      r = le::get_u8(is, "presence");
      if (r > 1) throw DataError(path + ": presence byte out of range");
    }
    for (std::size_t m = 0; m < M; ++m) {
      if (s.missing[m]) continue;
      std::vector<double> x(d.input_dims[m]);
      for (auto& v : x) v = le::get_f64(is, "payload");
      s.inputs[m] = std::move(x);
    }
    s.label = le::get_u64(is, "label");
    s.target = le::get_f64(is, "target");
    if (s.present_count() == 0) throw DataError(path + ": sample with no modality");
    if (d.task == TaskKind::kClassification && s.label >= d.num_classes) {
      throw DataError(path + ": label out of range");
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw DataError(path + ": trailing bytes after last record");
  }
  return d;
}

}  // namespace clarga
