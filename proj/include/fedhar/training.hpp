#pragma once

// Centralized training, evaluation and random hyperparameter search.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedhar/adam.hpp"
#include "fedhar/data.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/metrics.hpp"
#include "fedhar/model.hpp"
#include "fedhar/rng.hpp"

namespace fedhar {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  }
};

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

struct TrainResult {
  WeightSet weights;
  TrainHistory history;
};

struct Batch {
  Tensor x;        // [B,T,F]
  Tensor pad;      // [B,T]
  Tensor targets;  // [B,T,L]
  Tensor mask;     // [B,T,L]
};

inline Batch collate(std::span<const Window> windows, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ConfigError("cannot collate an empty batch");
  const Window& first = windows[idx[0]];
  const std::size_t b = idx.size(), t = first.n_positions, f = first.n_features, l = first.n_labels;
  Batch out{Tensor({b, t, f}), Tensor({b, t}), Tensor({b, t, l}), Tensor({b, t, l})};
  for (std::size_t i = 0; i < b; ++i) {
    const Window& w = windows[idx[i]];
    if (w.n_positions != t || w.n_features != f || w.n_labels != l) {
      throw ShapeError("windows in a batch disagree on layout");
    }
    std::copy(w.features.begin(), w.features.end(), out.x.ptr() + i * t * f);
    std::copy(w.pad_mask.begin(), w.pad_mask.end(), out.pad.ptr() + i * t);
    std::copy(w.targets.begin(), w.targets.end(), out.targets.ptr() + i * t * l);
    std::copy(w.label_mask.begin(), w.label_mask.end(), out.mask.ptr() + i * t * l);
  }
  return out;
}

inline void check_window_layout(std::span<const Window> windows, const ModelConfig& c) {
  for (const auto& w : windows) {
    if (w.n_features != static_cast<std::size_t>(c.n_features) || w.n_labels != static_cast<std::size_t>(c.n_labels)) {
      throw ShapeError("window layout (" + std::to_string(w.n_features) + " features, " +
                       std::to_string(w.n_labels) + " labels) does not match model config");
    }
  }
}

/// Minibatch Adam over the windows. Each epoch reshuffles (seeded), keeps the
/// last short batch, and skips batches whose label mask is entirely zero.
inline TrainResult train(WeightSet weights, const ModelConfig& model, std::span<const Window> windows,
                         const TrainConfig& config, std::span<const float> pos_weight) {
  config.validate();
  if (windows.empty()) throw ConfigError("cannot train on zero windows");
  check_window_layout(windows, model);
  if (pos_weight.size() != static_cast<std::size_t>(model.n_labels)) {
    throw ShapeError("pos_weight has " + std::to_string(pos_weight.size()) + " entries, model has " +
                     std::to_string(model.n_labels) + " labels");
  }
  const Tensor pw({pos_weight.size()}, std::vector<float>(pos_weight.begin(), pos_weight.end()));
  auto params = make_params(weights, model, true);
  Adam<float> opt(params.vars, config.learning_rate);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(windows.size());
  TrainHistory history;
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (config.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(start + bs, order.size());
      const Batch batch = collate(windows, std::span<const std::size_t>(order).subspan(start, end - start));
      if (std::all_of(batch.mask.data().begin(), batch.mask.data().end(), [](float m) { return m == 0.0f; })) {
        continue;
      }
      auto y = forward(params, batch.x, batch.pad, {.train_mode = true, .rng = &rng});
      auto loss = masked_weighted_loss(y, batch.targets, batch.mask, pw);
      opt.zero_grad();
      backward(loss);
      opt.step();
      loss_sum += loss.value()[0];
      ++n_batches;
    }
    history.epoch_loss.push_back(n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0);
  }
  return {params.to_weights(), std::move(history)};
}

/// Eval-mode forward over the windows, predictions thresholded at 0, confusion
/// counts accumulated under the label mask.
inline ClientReport evaluate(const WeightSet& weights, const ModelConfig& model, std::span<const Window> windows,
                             std::string subject_id, std::size_t batch_size = 64) {
  if (windows.empty()) throw ConfigError("cannot evaluate on zero windows");
  check_window_layout(windows, model);
  const auto params = make_params(weights, model, false);
  const auto l = static_cast<std::size_t>(model.n_labels);
  std::vector<ConfusionCounts> counts(l);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, windows.size());
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = collate(windows, idx);
    const Tensor pred = predict(forward(params, batch.x, batch.pad).value());
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      accumulate_confusion(pred[i] != 0.0f, batch.targets[i] != 0.0f, batch.mask[i] != 0.0f, counts[i % l]);
    }
  }
  return make_client_report(std::move(subject_id), std::move(counts));
}

struct SearchSpace {
  std::vector<int> layers{1, 2, 3, 4, 6, 12};
  std::vector<int> hidden{48, 96, 192, 384, 768};
  std::vector<int> positions{32, 64, 128, 256};
  double lr_min = 1e-5;
  double lr_max = 1e-1;

  void validate() const {
    if (layers.empty() || hidden.empty() || positions.empty()) throw ConfigError("search grid axes must be non-empty");
    if (!(lr_min > 0 && lr_min < lr_max)) throw ConfigError("learning-rate range must satisfy 0 < min < max");
  }
};

struct TrialConfig {
  int layers = 0;
  int hidden = 0;
  int n_positions = 0;
  double learning_rate = 0;
  bool operator==(const TrialConfig&) const = default;
};

/// Uniform over each grid axis, log-uniform learning rate.
inline TrialConfig sample_trial(const SearchSpace& space, std::mt19937_64& rng) {
  auto pick = [&rng](const std::vector<int>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  TrialConfig t;
  t.layers = pick(space.layers);
  t.hidden = pick(space.hidden);
  t.n_positions = pick(space.positions);
  std::uniform_real_distribution<double> u(std::log(space.lr_min), std::log(space.lr_max));
  t.learning_rate = std::exp(u(rng));
  return t;
}

struct TrialOutcome {
  double val_mean_ba = 0;
  TrainHistory history;
};

struct Trial {
  int index = 0;
  TrialConfig sampled;
  ModelConfig model;
  TrainConfig train;
  double val_mean_ba = 0;
  TrainHistory history;
  double wall_ms = 0;
};

struct SearchResult {
  std::vector<Trial> trials;
  std::size_t best = 0;
  const Trial& best_trial() const { return trials.at(best); }
};

using TrialObjective = std::function<TrialOutcome(const ModelConfig&, const TrainConfig&)>;

/// budget i.i.d. draws scored by the objective; ties keep the earliest trial.
/// `model_base` supplies features/labels/dropout and `train_base` epochs/batch size.
inline SearchResult random_search(const SearchSpace& space, int budget, const ModelConfig& model_base,
                                  const TrainConfig& train_base, const TrialObjective& objective, std::uint64_t seed,
                                  const std::function<void(const Trial&)>& on_trial = {}) {
  space.validate();
  if (budget < 1) throw ConfigError("search budget must be >= 1");
  std::mt19937_64 rng(seed);
  SearchResult result;
  for (int i = 0; i < budget; ++i) {
    Trial trial;
    trial.index = i;
    trial.sampled = sample_trial(space, rng);
    trial.model = model_base;
    trial.model.transformers_layers = trial.sampled.layers;
    trial.model.hidden_size = trial.sampled.hidden;
    trial.model.n_positions = trial.sampled.n_positions;
    trial.model.n_heads = ModelConfig::default_heads(trial.sampled.hidden);
    trial.model.seed = derive_seed({seed, static_cast<std::uint64_t>(i), 1});
    trial.train = train_base;
    trial.train.learning_rate = trial.sampled.learning_rate;
    trial.train.seed = derive_seed({seed, static_cast<std::uint64_t>(i), 2});
    const auto t0 = std::chrono::steady_clock::now();
    if (objective) {
      auto outcome = objective(trial.model, trial.train);
      trial.val_mean_ba = outcome.val_mean_ba;
      trial.history = std::move(outcome.history);
    }
    trial.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (on_trial) on_trial(trial);
    if (trial.val_mean_ba > (result.trials.empty() ? -1.0 : result.trials[result.best].val_mean_ba)) {
      result.best = result.trials.size();
    }
    result.trials.push_back(std::move(trial));
  }
  return result;
}

/// Objective over standardized base-subject records: window at the trial's
/// n_positions, 80/20 split, last 10% of train as validation, score = pooled
/// validation mean BA (0 when undefined).
inline TrialObjective make_window_objective(std::vector<SubjectRecord> standardized, std::uint64_t split_seed) {
  return [records = std::move(standardized), split_seed](const ModelConfig& model, const TrainConfig& tc) {
    std::vector<Window> windows;
    for (const auto& r : records) {
      auto w = make_windows(r, static_cast<std::size_t>(model.n_positions));
      windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    auto split = split_train_test(windows, 0.8, split_seed);
    auto [fit, val] = carve_validation(split.train, 0.1);
    if (fit.empty() || val.empty()) throw ConfigError("not enough windows for a validation split");
    const auto pw = compute_pos_weight(fit, static_cast<std::size_t>(model.n_labels));
    auto trained = train(init_model(model), model, fit, tc, pw);
    const auto report = evaluate(trained.weights, model, val, "validation");
    return TrialOutcome{report.mean_ba.value_or(0.0), std::move(trained.history)};
  };
}

inline nlohmann::json trial_to_json(const Trial& t) {
  return {{"trial", t.index},
          {"config",
           {{"transformers_layers", t.model.transformers_layers},
            {"hidden_size", t.model.hidden_size},
            {"n_positions", t.model.n_positions},
            {"n_heads", t.model.n_heads},
            {"learning_rate", t.train.learning_rate}}},
          {"val_mean_ba", t.val_mean_ba},
          {"epochs", t.train.epochs},
          {"wall_ms", t.wall_ms}};
}

}  // namespace fedhar
