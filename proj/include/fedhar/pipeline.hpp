#pragma once

// End-to-end helpers: base pretraining on a fold's base subjects and the
// cross-validation driver over all folds.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedhar/data.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/fedavg.hpp"
#include "fedhar/folds.hpp"
#include "fedhar/metrics.hpp"
#include "fedhar/model.hpp"
#include "fedhar/preprocessing.hpp"
#include "fedhar/training.hpp"

namespace fedhar {

/// Looks up the records for `ids`; throws listing every missing id.
inline std::vector<SubjectRecord> select_records(const std::vector<SubjectRecord>& all,
                                                 const std::vector<std::string>& ids) {
  std::map<std::string, const SubjectRecord*> by_id;
  for (const auto& r : all) by_id[r.subject_id] = &r;
  std::vector<SubjectRecord> out;
  std::string missing;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      missing += (missing.empty() ? "" : ", ") + id;
    } else {
      out.push_back(*it->second);
    }
  }
  if (!missing.empty()) throw ConfigError("missing subjects: " + missing);
  return out;
}

struct BaseModel {
  ModelConfig config;
  WeightSet weights;
  Preprocessing prep;
  TrainHistory history;
  std::optional<ClientReport> test_report;  // pooled over the base subjects' test windows
};

/// Fits the standardizer on the base records, windows and splits them 80/20,
/// derives pos_weight from the train side and trains from a fresh init.
inline BaseModel pretrain_base(const std::vector<SubjectRecord>& base_records, const ModelConfig& model,
                               const TrainConfig& train_config, std::uint64_t data_seed) {
  model.validate();
  if (base_records.empty()) throw ConfigError("no base subjects to pretrain on");
  BaseModel out;
  out.config = model;
  out.prep.standardizer = fit_standardizer(base_records);
  std::vector<Window> windows;
  for (const auto& r : base_records) {
    auto w = make_windows(apply_standardizer(out.prep.standardizer, r), static_cast<std::size_t>(model.n_positions));
    windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  auto split = split_train_test(windows, 0.8, data_seed);
  out.prep.pos_weight = compute_pos_weight(split.train, static_cast<std::size_t>(model.n_labels));
  auto trained = train(init_model(model), model, split.train, train_config, out.prep.pos_weight);
  out.weights = std::move(trained.weights);
  out.history = std::move(trained.history);
  if (!split.test.empty()) out.test_report = evaluate(out.weights, model, split.test, "base_test");
  return out;
}

struct FoldBase {
  ModelConfig config;
  WeightSet weights;
  Preprocessing prep;
};

/// Runs every requested fold in-process. All base models are checked before
/// the first round starts.
inline std::vector<FoldRunResult> run_cross_validation(const FoldPlan& plan, const std::map<int, FoldBase>& bases,
                                                       const std::vector<SubjectRecord>& records,
                                                       const FedConfig& config, std::uint64_t data_seed,
                                                       std::vector<int> folds = {}, AuditLog* log = nullptr,
                                                       ServerOptions options = {}) {
  config.validate();
  if (folds.empty()) {
    for (std::size_t f = 0; f < plan.size(); ++f) folds.push_back(static_cast<int>(f));
  }
  for (int f : folds) {
    if (f < 0 || static_cast<std::size_t>(f) >= plan.size()) {
      throw ConfigError("fold " + std::to_string(f) + " is not in the plan");
    }
    auto it = bases.find(f);
    if (it == bases.end()) throw ConfigError("missing base checkpoint for fold " + std::to_string(f));
    check_layout(it->second.weights, it->second.config);
    select_records(records, plan.folds[static_cast<std::size_t>(f)]);
  }
  std::vector<FoldRunResult> results;
  for (int f : folds) {
    const auto& base = bases.at(f);
    auto fold_records = select_records(records, plan.folds[static_cast<std::size_t>(f)]);
    std::vector<std::unique_ptr<InProcessClient>> owned;
    std::vector<ClientProxy*> proxies;
    for (auto& r : fold_records) {
      owned.push_back(std::make_unique<InProcessClient>(std::move(r)));
      proxies.push_back(owned.back().get());
    }
    FedServer server(config, log, options);
    results.push_back(server.run_fold(f, base.config, base.weights, base.prep, data_seed, proxies));
  }
  return results;
}

/// Per-fold means (after federation and for the base model) plus the overall
/// mean of fold means, the best fold mean and the best single client.
inline nlohmann::json cross_validation_summary(const std::vector<FoldRunResult>& results) {
  if (results.empty()) throw DegenerateError("no folds to summarize");
  nlohmann::json table = nlohmann::json::array();
  double sum = 0, best_fold = -1;
  int best_fold_index = -1;
  std::optional<std::pair<const ClientReport*, int>> best_client;
  for (const auto& r : results) {
    const auto& fin = r.final_report();
    nlohmann::json row{{"fold", r.fold}, {"mean_ba", fin.summary.mean}, {"median_ba", fin.summary.median}};
    row["base_mean_ba"] = r.base_report ? nlohmann::json(r.base_report->summary.mean) : nlohmann::json(nullptr);
    table.push_back(row);
    sum += fin.summary.mean;
    if (fin.summary.mean > best_fold) {
      best_fold = fin.summary.mean;
      best_fold_index = r.fold;
    }
    for (const auto& c : fin.clients) {
      if (c.mean_ba && (!best_client || *c.mean_ba > *best_client->first->mean_ba)) best_client = {{&c, r.fold}};
    }
  }
  nlohmann::json summary{{"folds", table},
                         {"mean_ba_overall", sum / static_cast<double>(results.size())},
                         {"best_fold_mean", best_fold},
                         {"best_fold", best_fold_index}};
  if (best_client) {
    summary["best_client"] = {{"subject_id", best_client->first->subject_id},
                              {"mean_ba", *best_client->first->mean_ba},
                              {"fold", best_client->second}};
  } else {
    summary["best_client"] = nullptr;
  }
  return summary;
}

inline nlohmann::json fold_run_to_json(const FoldRunResult& r, const std::vector<std::string>& label_names = {}) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& rep : r.rounds) rounds.push_back(fold_report_to_json(rep, label_names));
  nlohmann::json j{{"fold", r.fold}, {"final", fold_report_to_json(r.final_report(), label_names)},
                   {"rounds", rounds}};
  j["base"] = r.base_report ? fold_report_to_json(*r.base_report, label_names) : nlohmann::json(nullptr);
  return j;
}

}  // namespace fedhar
