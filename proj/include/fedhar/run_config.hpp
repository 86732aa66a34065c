#pragma once

// Resolved configuration for the command-line tools plus the run manifest.
//
// Config file schema (every key optional, flags override):
//   { "seed": 7,
//     "model": {"transformers_layers", "hidden_size", "n_positions", "n_heads", "dropout"},
//     "train": {"epochs", "batch_size", "learning_rate"},
//     "fed":   {"rounds", "local_epochs", "batch_size", "local_lr", "fit_fraction", "eval_fraction",
//               "min_available_clients", "straggler_factor", "first_round_timeout_s", "min_round_timeout_s"},
//     "synthetic": {"subjects", "minutes", "features", "labels", "alpha"},
//     "search": {"layers": [..], "hidden": [..], "positions": [..], "lr_min", "lr_max"} }

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedhar/checkpoint.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/fedavg.hpp"
#include "fedhar/model.hpp"
#include "fedhar/rng.hpp"
#include "fedhar/synthetic.hpp"
#include "fedhar/training.hpp"

#ifndef FEDHAR_BUILD_ID
#define FEDHAR_BUILD_ID "unknown"
#endif

namespace fedhar {

struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  TrainConfig train;
  FedConfig fed;
  SyntheticSpec synthetic;
  SearchSpace search;

  // Tiny model and short fits: a full fold runs in minutes on one core.
  static RunConfig desk() {
    RunConfig c;
    c.model.transformers_layers = 2;
    c.model.hidden_size = 48;
    c.model.n_positions = 32;
    c.model.n_heads = ModelConfig::default_heads(48);
    c.model.dropout = 0.1;
    c.train.epochs = 50;
    c.train.batch_size = 64;
    c.train.learning_rate = 1e-3;
    c.fed.rounds = 4;
    c.fed.local_epochs = 20;
    c.fed.local_lr = 1e-4;
    c.fed.min_available_clients = 12;
    return c;
  }

  // Values of the published experiment.
  static RunConfig paper() {
    RunConfig c;
    c.model = ModelConfig::paper();
    c.train.epochs = 20000;
    c.train.learning_rate = 4e-5;
    c.fed = FedConfig::paper();
    c.fed.local_lr = 4e-5;
    return c;
  }

  // Sub-seeds, all derived from the one user seed.
  std::uint64_t model_seed() const { return derive_seed({seed, 0x11}); }
  std::uint64_t train_seed() const { return derive_seed({seed, 0x22}); }
  std::uint64_t data_seed() const { return derive_seed({seed, 0x33}); }
  std::uint64_t fed_seed() const { return derive_seed({seed, 0x44}); }
  std::uint64_t search_seed() const { return derive_seed({seed, 0x55}); }

  // Copies the derived seeds into the nested configs.
  void propagate_seeds() {
    model.seed = model_seed();
    train.seed = train_seed();
    fed.seed = fed_seed();
    synthetic.seed = seed;
  }
};

inline RunConfig preset(const std::string& name) {
  if (name == "desk") return RunConfig::desk();
  if (name == "paper") return RunConfig::paper();
  throw ConfigError("unknown preset '" + name + "' (desk or paper)");
}

namespace detail {

template <class T>
void take(const nlohmann::json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void check_keys(const nlohmann::json& obj, const std::string& where, std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) throw ConfigError("unknown config key " + where + "." + k);
  }
}

}  // namespace detail

/// Overlays a config document onto `c`. Unknown keys are rejected so typos do
/// not silently fall back to defaults.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
  using detail::take;
  detail::check_keys(j, "config", {"seed", "model", "train", "fed", "synthetic", "search"});
  take(j, "seed", c.seed);
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::check_keys(m, "model", {"transformers_layers", "hidden_size", "n_positions", "n_heads", "dropout"});
    take(m, "transformers_layers", c.model.transformers_layers);
    take(m, "hidden_size", c.model.hidden_size);
    take(m, "n_positions", c.model.n_positions);
    if (m.contains("hidden_size") && !m.contains("n_heads")) c.model.n_heads = ModelConfig::default_heads(c.model.hidden_size);
    take(m, "n_heads", c.model.n_heads);
    take(m, "dropout", c.model.dropout);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::check_keys(t, "train", {"epochs", "batch_size", "learning_rate"});
    take(t, "epochs", c.train.epochs);
    take(t, "batch_size", c.train.batch_size);
    take(t, "learning_rate", c.train.learning_rate);
  }
  if (j.contains("fed")) {
    const auto& f = j["fed"];
    detail::check_keys(f, "fed",
                       {"rounds", "local_epochs", "batch_size", "local_lr", "fit_fraction", "eval_fraction",
                        "min_available_clients", "straggler_factor", "first_round_timeout_s", "min_round_timeout_s"});
    take(f, "rounds", c.fed.rounds);
    take(f, "local_epochs", c.fed.local_epochs);
    take(f, "batch_size", c.fed.batch_size);
    take(f, "local_lr", c.fed.local_lr);
    take(f, "fit_fraction", c.fed.fit_fraction);
    take(f, "eval_fraction", c.fed.eval_fraction);
    take(f, "min_available_clients", c.fed.min_available_clients);
    take(f, "straggler_factor", c.fed.straggler_factor);
    take(f, "first_round_timeout_s", c.fed.first_round_timeout_s);
    take(f, "min_round_timeout_s", c.fed.min_round_timeout_s);
  }
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    detail::check_keys(s, "synthetic", {"subjects", "minutes", "features", "labels", "alpha"});
    take(s, "subjects", c.synthetic.n_subjects);
    take(s, "minutes", c.synthetic.minutes_per_subject);
    take(s, "features", c.synthetic.n_features);
    take(s, "labels", c.synthetic.n_labels);
    take(s, "alpha", c.synthetic.dirichlet_alpha);
  }
  if (j.contains("search")) {
    const auto& s = j["search"];
    detail::check_keys(s, "search", {"layers", "hidden", "positions", "lr_min", "lr_max"});
    take(s, "layers", c.search.layers);
    take(s, "hidden", c.search.hidden);
    take(s, "positions", c.search.positions);
    take(s, "lr_min", c.search.lr_min);
    take(s, "lr_max", c.search.lr_max);
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
  return {{"n_features", m.n_features},   {"n_labels", m.n_labels},   {"transformers_layers", m.transformers_layers},
          {"hidden_size", m.hidden_size}, {"n_positions", m.n_positions}, {"n_heads", m.n_heads},
          {"dropout", m.dropout},         {"seed", m.seed}};
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  auto fed = fed_config_to_json(c.fed);
  fed["min_round_timeout_s"] = c.fed.min_round_timeout_s;
  return {{"seed", c.seed},
          {"model", model_config_to_json(c.model)},
          {"train",
           {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}, {"learning_rate", c.train.learning_rate}}},
          {"fed", fed},
          {"synthetic",
           {{"subjects", c.synthetic.n_subjects},
            {"minutes", c.synthetic.minutes_per_subject},
            {"features", c.synthetic.n_features},
            {"labels", c.synthetic.n_labels},
            {"alpha", c.synthetic.dirichlet_alpha}}},
          {"search",
           {{"layers", c.search.layers},
            {"hidden", c.search.hidden},
            {"positions", c.search.positions},
            {"lr_min", c.search.lr_min},
            {"lr_max", c.search.lr_max}}}};
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config;
  nlohmann::json seeds = nlohmann::json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  nlohmann::json to_json() const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return {{"command", command}, {"argv", argv},       {"config", config},   {"seeds", seeds},
            {"inputs", inputs},   {"outputs", outputs}, {"build", FEDHAR_BUILD_ID}, {"wall_time_s", wall}};
  }

  void write(const std::filesystem::path& path) const { write_text_atomic(path, to_json().dump(2) + "\n"); }
};

inline nlohmann::json seeds_to_json(const RunConfig& c) {
  return {{"seed", c.seed},           {"model", c.model_seed()}, {"train", c.train_seed()},
          {"data", c.data_seed()},    {"fed", c.fed_seed()},     {"search", c.search_seed()}};
}

}  // namespace fedhar
