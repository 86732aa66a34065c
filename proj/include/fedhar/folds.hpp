#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedhar/errors.hpp"

namespace fedhar {

/// Cross-validation plan: each fold's subjects act as federated clients; the
/// complement trains that fold's base model.
struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<std::vector<std::string>> folds;
  std::vector<std::vector<std::string>> base_subjects;

  std::size_t size() const noexcept { return folds.size(); }
  bool operator==(const FoldPlan&) const = default;
};

namespace detail {

inline void fill_complements(FoldPlan& plan) {
  plan.base_subjects.assign(plan.folds.size(), {});
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    for (std::size_t g = 0; g < plan.folds.size(); ++g) {
      if (g == f) continue;
      plan.base_subjects[f].insert(plan.base_subjects[f].end(), plan.folds[g].begin(), plan.folds[g].end());
    }
    std::sort(plan.base_subjects[f].begin(), plan.base_subjects[f].end());
  }
}

}  // namespace detail

/// Seeded shuffle of the (sorted) ids, chunked into n_folds equal groups.
inline FoldPlan build_fold_plan(std::vector<std::string> subject_ids, std::uint64_t seed, std::size_t n_folds = 5) {
  if (n_folds == 0) throw ConfigError("fold count must be positive");
  if (subject_ids.empty() || subject_ids.size() % n_folds != 0) {
    throw ConfigError(std::to_string(subject_ids.size()) + " subjects cannot be divided into " +
                      std::to_string(n_folds) + " equal folds");
  }
  std::sort(subject_ids.begin(), subject_ids.end());
  if (std::adjacent_find(subject_ids.begin(), subject_ids.end()) != subject_ids.end()) {
    throw ConfigError("subject ids must be distinct");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(subject_ids.begin(), subject_ids.end(), rng);
  const std::size_t per = subject_ids.size() / n_folds;
  FoldPlan plan;
  plan.seed = seed;
  for (std::size_t f = 0; f < n_folds; ++f) {
    std::vector<std::string> fold(subject_ids.begin() + static_cast<std::ptrdiff_t>(f * per),
                                  subject_ids.begin() + static_cast<std::ptrdiff_t>((f + 1) * per));
    std::sort(fold.begin(), fold.end());
    plan.folds.push_back(std::move(fold));
  }
  detail::fill_complements(plan);
  return plan;
}

/// {"seed": s, "folds": {"0": [ids...], ...}}
inline nlohmann::json fold_plan_to_json(const FoldPlan& plan) {
  nlohmann::json folds = nlohmann::json::object();
  for (std::size_t f = 0; f < plan.folds.size(); ++f) folds[std::to_string(f)] = plan.folds[f];
  return {{"seed", plan.seed}, {"folds", folds}};
}

inline FoldPlan fold_plan_from_json(const nlohmann::json& j) {
  FoldPlan plan;
  try {
    plan.seed = j.value("seed", std::uint64_t{0});
    const auto& folds = j.at("folds");
    for (std::size_t f = 0; f < folds.size(); ++f) {
      plan.folds.push_back(folds.at(std::to_string(f)).get<std::vector<std::string>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid fold plan: ") + e.what());
  }
  std::set<std::string> seen;
  for (const auto& fold : plan.folds) {
    for (const auto& id : fold) {
      if (!seen.insert(id).second) throw FormatError("subject " + id + " appears in more than one fold");
    }
  }
  detail::fill_complements(plan);
  return plan;
}

}  // namespace fedhar
