#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capsgan/datasets.hpp"
#include "capsgan/errors.hpp"
#include "capsgan/evaluation.hpp"
#include "capsgan/gan.hpp"
#include "capsgan/rng.hpp"

namespace capsgan {

enum class DataKind { synthetic, mnist, cifar10 };

inline std::string to_string(DataKind k) {
  switch (k) {
    case DataKind::synthetic: return "synthetic";
    case DataKind::mnist: return "mnist";
    default: return "cifar10";
  }
}

inline DataKind data_kind_from_string(const std::string& s) {
  if (s == "synthetic") return DataKind::synthetic;
  if (s == "mnist") return DataKind::mnist;
  if (s == "cifar10") return DataKind::cifar10;
  throw ConfigError("unknown data kind \"" + s + "\" (expected synthetic, mnist, or cifar10)");
}

struct MnistPaths {
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
};

struct Cifar10Paths {
  std::vector<std::string> train_files;
  std::vector<std::string> test_files;
};

struct DataConfig {
  DataKind kind = DataKind::synthetic;
  std::uint64_t seed = 99;  // synthetic data generation only
  SyntheticSpec synthetic{};
  MnistPaths mnist{};
  Cifar10Paths cifar10{};
};

struct TrainingConfig {
  int steps = 2000;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 keeps only the final checkpoint
  int log_every = 100;

  void validate() const {
    if (steps < 1) throw ConfigError("training.steps must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("training.checkpoint_every must be >= 0");
    if (log_every < 1) throw ConfigError("training.log_every must be >= 1");
  }
};

struct EvaluationConfig {
  GamOptions gam{};
  int semisup_n_labeled = 20;
  SemiSupConfig semisup{};
};

struct OutputConfig {
  std::string dir = "out";
};

struct RunConfig {
  GanConfig model{};
  TrainingConfig training{};
  DataConfig data{};
  EvaluationConfig evaluation{};
  OutputConfig output{};

  void validate() const {
    model.validate();
    training.validate();
    if (data.kind == DataKind::synthetic) data.synthetic.validate();
    if (evaluation.gam.n_samples < 1) throw ConfigError("evaluation.gam.n_samples must be >= 1");
    if (!(evaluation.gam.tie_tolerance >= 0.0))
      throw ConfigError("evaluation.gam.tie_tolerance must be >= 0");
    if (evaluation.semisup_n_labeled < 1)
      throw ConfigError("evaluation.semisup_n_labeled must be >= 1");
    evaluation.semisup.validate();
    if (output.dir.empty()) throw ConfigError("output.dir must not be empty");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"height", s.height},   {"width", s.width},
                     {"channels", s.channels}, {"modes", s.modes},
                     {"noise_std", s.noise_std}, {"per_mode", s.per_mode}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  j.at("height").get_to(s.height);
  j.at("width").get_to(s.width);
  j.at("channels").get_to(s.channels);
  j.at("modes").get_to(s.modes);
  j.at("noise_std").get_to(s.noise_std);
  j.at("per_mode").get_to(s.per_mode);
}

inline void to_json(nlohmann::json& j, const MnistPaths& p) {
  j = nlohmann::json{{"train_images", p.train_images},
                     {"train_labels", p.train_labels},
                     {"test_images", p.test_images},
                     {"test_labels", p.test_labels}};
}

inline void from_json(const nlohmann::json& j, MnistPaths& p) {
  j.at("train_images").get_to(p.train_images);
  j.at("train_labels").get_to(p.train_labels);
  j.at("test_images").get_to(p.test_images);
  j.at("test_labels").get_to(p.test_labels);
}

inline void to_json(nlohmann::json& j, const Cifar10Paths& p) {
  j = nlohmann::json{{"train_files", p.train_files}, {"test_files", p.test_files}};
}

inline void from_json(const nlohmann::json& j, Cifar10Paths& p) {
  j.at("train_files").get_to(p.train_files);
  j.at("test_files").get_to(p.test_files);
}

inline void to_json(nlohmann::json& j, const DataConfig& d) {
  j = nlohmann::json{{"kind", to_string(d.kind)},
                     {"seed", d.seed},
                     {"synthetic", d.synthetic},
                     {"mnist", d.mnist},
                     {"cifar10", d.cifar10}};
}

inline void from_json(const nlohmann::json& j, DataConfig& d) {
  d.kind = data_kind_from_string(j.at("kind").get<std::string>());
  j.at("seed").get_to(d.seed);
  j.at("synthetic").get_to(d.synthetic);
  j.at("mnist").get_to(d.mnist);
  j.at("cifar10").get_to(d.cifar10);
}

inline void to_json(nlohmann::json& j, const TrainingConfig& t) {
  j = nlohmann::json{{"steps", t.steps},
                     {"seed", t.seed},
                     {"checkpoint_every", t.checkpoint_every},
                     {"log_every", t.log_every}};
}

inline void from_json(const nlohmann::json& j, TrainingConfig& t) {
  j.at("steps").get_to(t.steps);
  j.at("seed").get_to(t.seed);
  j.at("checkpoint_every").get_to(t.checkpoint_every);
  j.at("log_every").get_to(t.log_every);
}

inline void to_json(nlohmann::json& j, const GamOptions& g) {
  j = nlohmann::json{{"n_samples", g.n_samples},
                     {"threshold", g.threshold},
                     {"tie_tolerance", g.tie_tolerance}};
}

inline void from_json(const nlohmann::json& j, GamOptions& g) {
  j.at("n_samples").get_to(g.n_samples);
  j.at("threshold").get_to(g.threshold);
  j.at("tie_tolerance").get_to(g.tie_tolerance);
}

inline void to_json(nlohmann::json& j, const LabelSpreadConfig& c) {
  j = nlohmann::json{
      {"alpha", c.alpha},
      {"affinity", c.affinity == LabelSpreadConfig::Affinity::knn ? "knn" : "rbf"},
      {"k", c.k},
      {"gamma", c.gamma},
      {"max_iters", c.max_iters},
      {"tol", c.tol}};
}

inline void from_json(const nlohmann::json& j, LabelSpreadConfig& c) {
  j.at("alpha").get_to(c.alpha);
  std::string aff = j.at("affinity").get<std::string>();
  if (aff == "knn")
    c.affinity = LabelSpreadConfig::Affinity::knn;
  else if (aff == "rbf")
    c.affinity = LabelSpreadConfig::Affinity::rbf;
  else
    throw ConfigError("unknown affinity \"" + aff + "\" (expected knn or rbf)");
  j.at("k").get_to(c.k);
  j.at("gamma").get_to(c.gamma);
  j.at("max_iters").get_to(c.max_iters);
  j.at("tol").get_to(c.tol);
}

inline void to_json(nlohmann::json& j, const SemiSupConfig& c) {
  j = nlohmann::json{{"n_unlabeled", c.n_unlabeled}, {"spread", c.spread}};
}

inline void from_json(const nlohmann::json& j, SemiSupConfig& c) {
  j.at("n_unlabeled").get_to(c.n_unlabeled);
  j.at("spread").get_to(c.spread);
}

inline void to_json(nlohmann::json& j, const EvaluationConfig& e) {
  j = nlohmann::json{{"gam", e.gam},
                     {"semisup_n_labeled", e.semisup_n_labeled},
                     {"semisup", e.semisup}};
}

inline void from_json(const nlohmann::json& j, EvaluationConfig& e) {
  j.at("gam").get_to(e.gam);
  j.at("semisup_n_labeled").get_to(e.semisup_n_labeled);
  j.at("semisup").get_to(e.semisup);
}

inline void to_json(nlohmann::json& j, const OutputConfig& o) {
  j = nlohmann::json{{"dir", o.dir}};
}

inline void from_json(const nlohmann::json& j, OutputConfig& o) { j.at("dir").get_to(o.dir); }

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"training", c.training},
                     {"data", c.data},
                     {"evaluation", c.evaluation},
                     {"output", c.output}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  j.at("model").get_to(c.model);
  j.at("training").get_to(c.training);
  j.at("data").get_to(c.data);
  j.at("evaluation").get_to(c.evaluation);
  j.at("output").get_to(c.output);
}

// Fully materialized defaults per dataset. The synthetic variant is sized to
// train in seconds on one core; mnist and cifar10 use the full-size networks.
inline RunConfig default_run_config(DataKind kind) {
  RunConfig rc;
  rc.data.kind = kind;
  if (kind == DataKind::synthetic) {
    auto& g = rc.model.generator;
    g.latent_dim = 16;
    g.out_channels = 1;
    g.out_height = 8;
    g.out_width = 8;
    g.proj_channels = 16;
    g.proj_height = 2;
    g.proj_width = 2;
    g.stage_channels = {8, 1};
    auto& d = rc.model.discriminator.capsule;
    d.conv_filters = 8;
    d.conv_kernel = 3;
    d.conv_stride = 1;
    d.conv_pad = 0;
    d.pc_channels = 4;
    d.pc_capsule_dim = 4;
    d.pc_kernel = 3;
    d.pc_stride = 2;
    d.pc_pad = 0;
    d.final_capsule_dim = 8;
    auto& v = rc.model.discriminator.convolutional;
    v.filters = {8, 16};
    v.kernel = 5;
    v.stride = 2;
    v.pad = 2;
    rc.model.batch_size = 16;
    rc.evaluation.gam.n_samples = 256;
    rc.evaluation.semisup.n_unlabeled = 200;
    rc.evaluation.semisup_n_labeled = 20;
  } else if (kind == DataKind::cifar10) {
    auto& g = rc.model.generator;
    g.out_channels = 3;
    g.out_height = 32;
    g.out_width = 32;
    g.proj_height = 4;
    g.proj_width = 4;
    g.stage_channels = {128, 64, 3};
    rc.evaluation.semisup_n_labeled = 100;
    rc.evaluation.semisup.n_unlabeled = 50000;
  } else {
    rc.evaluation.semisup_n_labeled = 100;
    rc.evaluation.semisup.n_unlabeled = 50000;
  }
  return rc;
}

namespace detail {

inline void check_known_keys(const nlohmann::json& user, const nlohmann::json& defaults,
                             const std::string& path) {
  if (!user.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string child = path + "." + it.key();
    if (!defaults.is_object() || !defaults.contains(it.key()))
      throw ConfigError("unknown config key \"" + child + "\"");
    check_known_keys(it.value(), defaults.at(it.key()), child);
  }
}

}  // namespace detail

// Overlays a (possibly partial) user config onto the defaults for its data
// kind. Unknown keys anywhere are rejected with their full path; the result
// has every field materialized and validated.
inline RunConfig resolve_run_config(const nlohmann::json& user) {
  if (!user.is_object()) throw ConfigError("config root must be a JSON object");
  DataKind kind = DataKind::synthetic;
  if (user.contains("data") && user.at("data").is_object() && user.at("data").contains("kind"))
    kind = data_kind_from_string(user.at("data").at("kind").get<std::string>());
  nlohmann::json defaults = default_run_config(kind);
  detail::check_known_keys(user, defaults, "$");
  defaults.update(user, /*merge_objects=*/true);
  RunConfig rc;
  try {
    rc = defaults.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return resolve_run_config(j);
}

// Train and test splits for the configured dataset, both in the [0,1] range.
inline LabeledDataset load_train_data(const DataConfig& d) {
  if (d.kind == DataKind::synthetic)
    return make_synthetic(d.synthetic, mix_seed(d.seed, 1));
  if (d.kind == DataKind::mnist) {
    if (d.mnist.train_images.empty() || d.mnist.train_labels.empty())
      throw ConfigError("data.mnist.train_images and train_labels are required");
    return load_mnist_idx(d.mnist.train_images, d.mnist.train_labels);
  }
  if (d.cifar10.train_files.empty())
    throw ConfigError("data.cifar10.train_files is required");
  return load_cifar10_binary(d.cifar10.train_files);
}

inline LabeledDataset load_test_data(const DataConfig& d) {
  if (d.kind == DataKind::synthetic)
    return make_synthetic(d.synthetic, mix_seed(d.seed, 2));
  if (d.kind == DataKind::mnist) {
    if (d.mnist.test_images.empty() || d.mnist.test_labels.empty())
      throw ConfigError("data.mnist.test_images and test_labels are required");
    return load_mnist_idx(d.mnist.test_images, d.mnist.test_labels);
  }
  if (d.cifar10.test_files.empty())
    throw ConfigError("data.cifar10.test_files is required");
  return load_cifar10_binary(d.cifar10.test_files);
}

}  // namespace capsgan
