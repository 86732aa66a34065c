#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedhar/errors.hpp"

namespace fedhar {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const noexcept { return tp + tn + fp + fn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

inline void accumulate_confusion(bool pred, bool target, bool mask, ConfusionCounts& c) noexcept {
  if (!mask) return;
  if (pred) {
    (target ? c.tp : c.fp) += 1;
  } else {
    (target ? c.fn : c.tn) += 1;
  }
}

/// 0.5 * (tn/(tn+fp) + tp/(tp+fn)); nullopt when either class is absent.
inline std::optional<double> balanced_accuracy(const ConfusionCounts& c) noexcept {
  if (c.tp + c.fn == 0 || c.tn + c.fp == 0) return std::nullopt;
  const double specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  const double sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return 0.5 * (specificity + sensitivity);
}

/// Unweighted mean over defined entries.
inline double client_mean_ba(std::span<const std::optional<double>> per_label) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& v : per_label) {
    if (!v) continue;
    s += *v;
    ++n;
  }
  if (n == 0) throw DegenerateError("no label has a defined balanced accuracy");
  return s / static_cast<double>(n);
}

struct ClientReport {
  std::string subject_id;
  std::vector<ConfusionCounts> counts;  // per label
  std::vector<std::optional<double>> per_label_ba;
  std::optional<double> mean_ba;  // nullopt when no label is defined
  std::size_t defined_labels = 0;
  std::size_t excluded_labels = 0;
  std::uint64_t n_eval_instances = 0;

  bool operator==(const ClientReport&) const = default;
};

inline ClientReport make_client_report(std::string subject_id, std::vector<ConfusionCounts> counts) {
  ClientReport r;
  r.subject_id = std::move(subject_id);
  r.per_label_ba.reserve(counts.size());
  for (const auto& c : counts) {
    r.per_label_ba.push_back(balanced_accuracy(c));
    r.n_eval_instances += c.total();
    if (r.per_label_ba.back()) {
      ++r.defined_labels;
    } else {
      ++r.excluded_labels;
    }
  }
  r.counts = std::move(counts);
  if (r.defined_labels > 0) r.mean_ba = client_mean_ba(r.per_label_ba);
  return r;
}

struct SummaryStats {
  double mean = 0, median = 0, q1 = 0, q3 = 0, min = 0, max = 0;
  std::size_t n = 0;
  bool operator==(const SummaryStats&) const = default;
};

/// Quantile with linear interpolation between order statistics.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw DegenerateError("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

inline SummaryStats summarize(std::vector<double> values) {
  if (values.empty()) throw DegenerateError("cannot summarize an empty list");
  std::sort(values.begin(), values.end());
  SummaryStats s;
  s.n = values.size();
  double acc = 0;
  for (double v : values) acc += v;
  s.mean = acc / static_cast<double>(values.size());
  s.median = quantile_sorted(values, 0.5);
  s.q1 = quantile_sorted(values, 0.25);
  s.q3 = quantile_sorted(values, 0.75);
  s.min = values.front();
  s.max = values.back();
  return s;
}

struct FoldReport {
  int fold = 0;
  std::vector<ClientReport> clients;
  SummaryStats summary;  // over clients with a defined mean BA
};

inline FoldReport fold_summary(int fold, std::vector<ClientReport> clients) {
  if (clients.empty()) throw DegenerateError("fold report needs at least one client");
  std::vector<double> bas;
  for (const auto& c : clients) {
    if (c.mean_ba) bas.push_back(*c.mean_ba);
  }
  if (bas.empty()) throw DegenerateError("no client in fold " + std::to_string(fold) + " has a defined BA");
  FoldReport r;
  r.fold = fold;
  r.clients = std::move(clients);
  r.summary = summarize(std::move(bas));
  return r;
}

inline nlohmann::json summary_to_json(const SummaryStats& s) {
  return {{"mean", s.mean}, {"median", s.median}, {"q1", s.q1},
          {"q3", s.q3},     {"min", s.min},       {"max", s.max}, {"n", s.n}};
}

inline nlohmann::json client_report_to_json(const ClientReport& r, const std::vector<std::string>& label_names = {}) {
  nlohmann::json per_label = nlohmann::json::object();
  for (std::size_t k = 0; k < r.per_label_ba.size(); ++k) {
    const std::string key = k < label_names.size() ? label_names[k] : std::to_string(k);
    per_label[key] = r.per_label_ba[k] ? nlohmann::json(*r.per_label_ba[k]) : nlohmann::json(nullptr);
  }
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& c : r.counts) counts.push_back({c.tp, c.tn, c.fp, c.fn});
  return {{"subject_id", r.subject_id},
          {"mean_ba", r.mean_ba ? nlohmann::json(*r.mean_ba) : nlohmann::json(nullptr)},
          {"defined_labels", r.defined_labels},
          {"excluded_labels", r.excluded_labels},
          {"n_eval_instances", r.n_eval_instances},
          {"per_label", per_label},
          {"counts", counts}};
}

/// Rebuilds a report from its confusion counts; BA values are recomputed, not trusted.
inline ClientReport client_report_from_json(const nlohmann::json& j) {
  try {
    std::vector<ConfusionCounts> counts;
    for (const auto& c : j.at("counts")) {
      counts.push_back({c.at(0).get<std::uint64_t>(), c.at(1).get<std::uint64_t>(), c.at(2).get<std::uint64_t>(),
                        c.at(3).get<std::uint64_t>()});
    }
    return make_client_report(j.at("subject_id").get<std::string>(), std::move(counts));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid client report: ") + e.what());
  }
}

inline nlohmann::json fold_report_to_json(const FoldReport& r, const std::vector<std::string>& label_names = {}) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : r.clients) clients.push_back(client_report_to_json(c, label_names));
  return {{"fold", r.fold}, {"clients", clients}, {"summary", summary_to_json(r.summary)}};
}

}  // namespace fedhar
