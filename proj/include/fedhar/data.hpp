#pragma once

// Subject records, standardization, windowing and train/test splitting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedhar/errors.hpp"
#include "fedhar/rng.hpp"

namespace fedhar {

inline constexpr std::int8_t kMissingLabel = -1;

/// One subject's per-minute rows. Missing features are NaN; missing labels are kMissingLabel.
struct SubjectRecord {
  std::string subject_id;
  std::size_t n_features = 0;
  std::size_t n_labels = 0;
  std::vector<std::int64_t> timestamps;
  std::vector<float> features;      // rows x n_features
  std::vector<std::int8_t> labels;  // rows x n_labels

  std::size_t rows() const noexcept { return timestamps.size(); }
  float feature(std::size_t r, std::size_t c) const { return features[r * n_features + c]; }
  std::int8_t label(std::size_t r, std::size_t c) const { return labels[r * n_labels + c]; }

  bool operator==(const SubjectRecord&) const = default;
};

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> std;

  static constexpr double kStdFloor = 1e-6;

  bool operator==(const Standardizer&) const = default;
};

/// Mean and population std over present values of every feature. A feature with
/// no present value gets mean 0, std 1.
inline Standardizer fit_standardizer(std::span<const SubjectRecord> records) {
  if (records.empty()) throw ConfigError("cannot fit a standardizer on zero records");
  const std::size_t f = records.front().n_features;
  std::vector<double> sum(f, 0.0), count(f, 0.0);
  for (const auto& r : records) {
    if (r.n_features != f) throw ShapeError("records disagree on feature count");
    for (std::size_t i = 0; i < r.rows(); ++i) {
      for (std::size_t c = 0; c < f; ++c) {
        const float v = r.feature(i, c);
        if (std::isnan(v)) continue;
        sum[c] += v;
        count[c] += 1.0;
      }
    }
  }
  Standardizer s{std::vector<double>(f, 0.0), std::vector<double>(f, 1.0)};
  for (std::size_t c = 0; c < f; ++c) {
    if (count[c] > 0) s.mean[c] = sum[c] / count[c];
  }
  std::vector<double> sq(f, 0.0);
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.rows(); ++i) {
      for (std::size_t c = 0; c < f; ++c) {
        const float v = r.feature(i, c);
        if (std::isnan(v)) continue;
        const double d = v - s.mean[c];
        sq[c] += d * d;
      }
    }
  }
  for (std::size_t c = 0; c < f; ++c) {
    if (count[c] > 0) s.std[c] = std::max(std::sqrt(sq[c] / count[c]), Standardizer::kStdFloor);
  }
  return s;
}

/// (x - mean) / std; missing values become 0.
inline SubjectRecord apply_standardizer(const Standardizer& s, SubjectRecord record) {
  if (s.mean.size() != record.n_features) {
    throw ShapeError("standardizer has " + std::to_string(s.mean.size()) + " features, record has " +
                     std::to_string(record.n_features));
  }
  for (std::size_t i = 0; i < record.rows(); ++i) {
    for (std::size_t c = 0; c < record.n_features; ++c) {
      float& v = record.features[i * record.n_features + c];
      v = std::isnan(v) ? 0.0f : static_cast<float>((v - s.mean[c]) / s.std[c]);
    }
  }
  return record;
}

/// One model input: up to n_positions consecutive rows, zero-padded at the end.
struct Window {
  std::string subject_id;
  std::size_t length = 0;  // real (unpadded) positions
  std::size_t n_positions = 0;
  std::size_t n_features = 0;
  std::size_t n_labels = 0;
  std::vector<float> features;    // n_positions x n_features
  std::vector<float> targets;     // n_positions x n_labels
  std::vector<float> label_mask;  // n_positions x n_labels
  std::vector<float> pad_mask;    // n_positions

  bool operator==(const Window&) const = default;
};

namespace detail {

inline std::vector<std::pair<std::size_t, std::size_t>> contiguous_segments(
    const std::vector<std::int64_t>& ts, double gap_factor) {
  std::vector<std::pair<std::size_t, std::size_t>> segs;
  if (ts.empty()) return segs;
  if (ts.size() < 2) return {{0, 1}};
  std::vector<std::int64_t> d(ts.size() - 1);
  for (std::size_t i = 1; i < ts.size(); ++i) d[i - 1] = ts[i] - ts[i - 1];
  std::vector<std::int64_t> sorted = d;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
  double median = static_cast<double>(sorted[sorted.size() / 2]);
  if (sorted.size() % 2 == 0) {
    const auto lower = *std::max_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2));
    median = 0.5 * (median + static_cast<double>(lower));
  }
  const double limit = gap_factor * median;
  std::size_t start = 0;
  for (std::size_t i = 1; i < ts.size(); ++i) {
    if (static_cast<double>(d[i - 1]) > limit) {
      segs.emplace_back(start, i);
      start = i;
    }
  }
  segs.emplace_back(start, ts.size());
  return segs;
}

}  // namespace detail

/// Non-overlapping chunks of n_positions rows in time order. A gap longer than
/// 5x the median sampling interval starts a new chunk; the last chunk of each
/// run is zero-padded. Missing feature values are written as 0.
inline std::vector<Window> make_windows(const SubjectRecord& record, std::size_t n_positions) {
  if (n_positions == 0) throw ConfigError("n_positions must be positive");
  std::vector<Window> out;
  const std::size_t f = record.n_features, l = record.n_labels;
  for (auto [begin, end] : detail::contiguous_segments(record.timestamps, 5.0)) {
    for (std::size_t s = begin; s < end; s += n_positions) {
      const std::size_t len = std::min(n_positions, end - s);
      Window w;
      w.subject_id = record.subject_id;
      w.length = len;
      w.n_positions = n_positions;
      w.n_features = f;
      w.n_labels = l;
      w.features.assign(n_positions * f, 0.0f);
      w.targets.assign(n_positions * l, 0.0f);
      w.label_mask.assign(n_positions * l, 0.0f);
      w.pad_mask.assign(n_positions, 0.0f);
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t r = s + t;
        w.pad_mask[t] = 1.0f;
        for (std::size_t c = 0; c < f; ++c) {
          const float v = record.feature(r, c);
          w.features[t * f + c] = std::isnan(v) ? 0.0f : v;
        }
        for (std::size_t k = 0; k < l; ++k) {
          const auto lab = record.label(r, k);
          if (lab == kMissingLabel) continue;
          w.targets[t * l + k] = lab ? 1.0f : 0.0f;
          w.label_mask[t * l + k] = 1.0f;
        }
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

struct TrainTestSplit {
  std::vector<Window> train;
  std::vector<Window> test;
  std::vector<std::string> warnings;
};

namespace detail {

// Groups window indices by subject, subjects in order of first appearance.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> group_by_subject(
    std::span<const Window> windows) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    auto [it, fresh] = index.emplace(windows[i].subject_id, groups.size());
    if (fresh) groups.push_back({windows[i].subject_id, {}});
    groups[it->second].second.push_back(i);
  }
  return groups;
}

}  // namespace detail

/// Per subject: a seeded random subset of round(ratio * n) windows goes to train,
/// the rest to test. Subjects with fewer than 2 windows go entirely to train.
/// Output keeps the input order within each side.
inline TrainTestSplit split_train_test(std::span<const Window> windows, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0,1)");
  std::vector<char> is_train(windows.size(), 0);
  TrainTestSplit out;
  for (const auto& [subject, idx] : detail::group_by_subject(windows)) {
    if (idx.size() < 2) {
      for (auto i : idx) is_train[i] = 1;
      out.warnings.push_back("subject " + subject + " has " + std::to_string(idx.size()) +
                             " window(s); all assigned to train");
      continue;
    }
    std::vector<std::size_t> order(idx.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed({seed, fnv1a(subject)}));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < n_train; ++k) is_train[idx[order[k]]] = 1;
  }
  for (std::size_t i = 0; i < windows.size(); ++i) {
    (is_train[i] ? out.train : out.test).push_back(windows[i]);
  }
  return out;
}

/// Moves the last floor(fraction * n) train windows of each subject to a validation set.
inline std::pair<std::vector<Window>, std::vector<Window>> carve_validation(std::span<const Window> train,
                                                                            double fraction = 0.1) {
  std::vector<char> is_val(train.size(), 0);
  for (const auto& [subject, idx] : detail::group_by_subject(train)) {
    const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size())));
    for (std::size_t k = idx.size() - n_val; k < idx.size(); ++k) is_val[idx[k]] = 1;
  }
  std::pair<std::vector<Window>, std::vector<Window>> out;
  for (std::size_t i = 0; i < train.size(); ++i) (is_val[i] ? out.second : out.first).push_back(train[i]);
  return out;
}

/// Per-label negatives/positives over unmasked targets, clamped to [0.1, 100].
inline std::vector<float> compute_pos_weight(std::span<const Window> windows, std::size_t n_labels) {
  std::vector<double> pos(n_labels, 0.0), neg(n_labels, 0.0);
  for (const auto& w : windows) {
    for (std::size_t t = 0; t < w.length; ++t) {
      for (std::size_t k = 0; k < n_labels; ++k) {
        if (w.label_mask[t * n_labels + k] == 0.0f) continue;
        (w.targets[t * n_labels + k] != 0.0f ? pos[k] : neg[k]) += 1.0;
      }
    }
  }
  std::vector<float> out(n_labels);
  for (std::size_t k = 0; k < n_labels; ++k) {
    const double r = pos[k] > 0 ? neg[k] / pos[k] : std::numeric_limits<double>::infinity();
    out[k] = static_cast<float>(std::clamp(r, 0.1, 100.0));
  }
  return out;
}

}  // namespace fedhar
