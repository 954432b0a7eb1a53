#ifndef OVERLAP_CONFIG_HPP
#define OVERLAP_CONFIG_HPP

#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "overlap/attacks.hpp"
#include "overlap/common.hpp"
#include "overlap/dataset.hpp"
#include "overlap/harness.hpp"
#include "overlap/model.hpp"
#include "overlap/training.hpp"

// JSON config schema, version "v1". Parsing is strict: unknown keys are
// rejected everywhere so typos fail before any compute starts.

namespace overlap {
namespace config {

inline void require_object(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + " must be a JSON object");
}

inline void reject_unknown_keys(const nlohmann::json& j,
                                std::initializer_list<const char*> allowed,
                                const std::string& where) {
  require_object(j, where);
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) throw FormatError("unknown key '" + key + "' in " + where);
  }
}

inline DatasetSpec parse_dataset(const nlohmann::json& j) {
  require_object(j, "dataset");
  const std::string kind = j.value("kind", "");
  DatasetSpec d;
  if (kind == "synth_blobs") {
    reject_unknown_keys(j,
                        {"kind", "num_classes", "per_class_train", "per_class_test", "dim",
                         "spread", "seed"},
                        "dataset");
    d.kind = DatasetSpec::Kind::synth_blobs;
    d.num_classes = j.value("num_classes", d.num_classes);
    d.per_class_train = j.value("per_class_train", d.per_class_train);
    d.per_class_test = j.value("per_class_test", d.per_class_test);
    d.dim = j.value("dim", d.dim);
    d.spread = j.value("spread", d.spread);
    d.seed = j.value("seed", d.seed);
  } else if (kind == "idx") {
    reject_unknown_keys(j, {"kind", "train_images", "train_labels", "test_images", "test_labels"},
                        "dataset");
    d.kind = DatasetSpec::Kind::idx;
    d.train_images = j.at("train_images").get<std::string>();
    d.train_labels = j.at("train_labels").get<std::string>();
    d.test_images = j.at("test_images").get<std::string>();
    d.test_labels = j.at("test_labels").get<std::string>();
  } else if (kind == "cifar") {
    reject_unknown_keys(j, {"kind", "train_files", "test_files"}, "dataset");
    d.kind = DatasetSpec::Kind::cifar;
    d.train_files = j.at("train_files").get<std::vector<std::string>>();
    d.test_files = j.at("test_files").get<std::vector<std::string>>();
  } else {
    throw FormatError("dataset.kind must be synth_blobs, idx, or cifar");
  }
  return d;
}

inline nlohmann::json dataset_to_json(const DatasetSpec& d) {
  nlohmann::json j;
  switch (d.kind) {
    case DatasetSpec::Kind::synth_blobs:
      j["kind"] = "synth_blobs";
      j["num_classes"] = d.num_classes;
      j["per_class_train"] = d.per_class_train;
      j["per_class_test"] = d.per_class_test;
      j["dim"] = d.dim;
      j["spread"] = d.spread;
      j["seed"] = d.seed;
      break;
    case DatasetSpec::Kind::idx:
      j["kind"] = "idx";
      j["train_images"] = d.train_images;
      j["train_labels"] = d.train_labels;
      j["test_images"] = d.test_images;
      j["test_labels"] = d.test_labels;
      break;
    case DatasetSpec::Kind::cifar:
      j["kind"] = "cifar";
      j["train_files"] = d.train_files;
      j["test_files"] = d.test_files;
      break;
  }
  return j;
}

inline ArchSpec parse_arch(const nlohmann::json& j) {
  require_object(j, "arch");
  reject_unknown_keys(j, {"kind", "input_shape", "hidden", "channels", "num_classes"}, "arch");
  try {
    return ArchSpec::from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("arch: ") + e.what());
  }
}

inline TrainConfig parse_train(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "adam_epsilon",
                       "lr_decay_epochs", "lr_decay_gamma", "hardening", "shuffle_seed"},
                      "train");
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.lr_decay_epochs = j.value("lr_decay_epochs", c.lr_decay_epochs);
    c.lr_decay_gamma = j.value("lr_decay_gamma", c.lr_decay_gamma);
    c.shuffle_seed = j.value("shuffle_seed", c.shuffle_seed);
    if (j.contains("hardening")) {
      const nlohmann::json& h = j["hardening"];
      reject_unknown_keys(h, {"kind", "epsilon", "alpha"}, "train.hardening");
      const std::string kind = h.value("kind", "none");
      if (kind == "none") {
        c.hardening.kind = Hardening::Kind::none;
      } else if (kind == "fast_fgsm") {
        c.hardening.kind = Hardening::Kind::fast_fgsm;
        c.hardening.epsilon = h.value("epsilon", c.hardening.epsilon);
        c.hardening.alpha = h.value("alpha", -1.0f);
      } else {
        throw FormatError("train.hardening.kind must be none or fast_fgsm");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["lr_decay_epochs"] = c.lr_decay_epochs;
  j["lr_decay_gamma"] = c.lr_decay_gamma;
  j["shuffle_seed"] = c.shuffle_seed;
  nlohmann::json h;
  h["kind"] = c.hardening.kind == Hardening::Kind::none ? "none" : "fast_fgsm";
  if (c.hardening.kind == Hardening::Kind::fast_fgsm) {
    h["epsilon"] = c.hardening.epsilon;
    h["alpha"] = c.hardening.alpha;
  }
  j["hardening"] = h;
  return j;
}

inline AttackConfig parse_attack(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"kind", "epsilon", "alpha", "pgd_iterations", "mask_iterations",
                       "mask_keep_probability", "keep_true_class", "momentum", "random_start",
                       "seed"},
                      "attack");
  try {
    nlohmann::json copy = j;
    copy.erase("kind");
    return AttackConfig::from_json(copy);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("attack: ") + e.what());
  }
}

inline AttackKind parse_attack_kind(const nlohmann::json& attack_section) {
  if (!attack_section.contains("kind")) return AttackKind::pgd;
  return attack_kind_from_name(attack_section.at("kind").get<std::string>());
}

inline GridSpec parse_grid(const nlohmann::json& root) {
  reject_unknown_keys(root, {"version", "dataset", "arch", "train", "surrogate_train",
                             "victim_train", "attack", "grid"},
                      "config");
  GridSpec g;
  g.dataset = parse_dataset(root.at("dataset"));
  g.arch = parse_arch(root.at("arch"));
  if (root.contains("train")) {
    g.surrogate_train = parse_train(root.at("train"));
    g.victim_train = g.surrogate_train;
  }
  if (root.contains("surrogate_train")) g.surrogate_train = parse_train(root.at("surrogate_train"));
  if (root.contains("victim_train")) g.victim_train = parse_train(root.at("victim_train"));
  if (root.contains("attack")) {
    g.attack = parse_attack(root.at("attack"));
    g.attack_kind = parse_attack_kind(root.at("attack"));
  }
  const nlohmann::json& gj = root.at("grid");
  reject_unknown_keys(gj,
                      {"shared_class_counts", "shared_data_fractions", "repetitions",
                       "master_seed", "twin_seeds"},
                      "grid");
  try {
    g.shared_class_counts = gj.at("shared_class_counts").get<std::vector<int>>();
    g.shared_data_fractions = gj.at("shared_data_fractions").get<std::vector<double>>();
    g.repetitions = gj.value("repetitions", g.repetitions);
    g.master_seed = gj.value("master_seed", g.master_seed);
    g.twin_seeds = gj.value("twin_seeds", g.twin_seeds);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("grid: ") + e.what());
  }
  g.validate();
  return g;
}

inline nlohmann::json grid_to_json(const GridSpec& g) {
  nlohmann::json root;
  root["version"] = "v1";
  root["dataset"] = dataset_to_json(g.dataset);
  root["arch"] = g.arch.to_json();
  root["surrogate_train"] = train_to_json(g.surrogate_train);
  root["victim_train"] = train_to_json(g.victim_train);
  nlohmann::json attack = g.attack.to_json();
  attack["kind"] = attack_kind_name(g.attack_kind);
  root["attack"] = attack;
  nlohmann::json gj;
  gj["shared_class_counts"] = g.shared_class_counts;
  gj["shared_data_fractions"] = g.shared_data_fractions;
  gj["repetitions"] = g.repetitions;
  gj["master_seed"] = g.master_seed;
  gj["twin_seeds"] = g.twin_seeds;
  root["grid"] = gj;
  return root;
}

// Loads and version-checks a config document from disk.
inline nlohmann::json load_config_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path);
  nlohmann::json root = nlohmann::json::parse(in, nullptr, false);
  if (root.is_discarded()) throw FormatError(path + ": invalid JSON");
  require_object(root, "config");
  const std::string version = root.value("version", "");
  if (version != "v1") {
    throw FormatError(path + ": unsupported config version '" + version + "', expected \"v1\"");
  }
  return root;
}

}  // namespace config
}  // namespace overlap

#endif  // OVERLAP_CONFIG_HPP
