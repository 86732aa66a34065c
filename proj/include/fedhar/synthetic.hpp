#pragma once

// Synthetic non-IID activity data. Each subject draws its own label prior from
// a Dirichlet whose concentration follows a Zipf-like global popularity, so
// labels are imbalanced overall and skewed per subject. Features mix per-label
// prototypes (with per-subject jitter and offset) plus AR(1) and white noise.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "fedhar/data.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/rng.hpp"

namespace fedhar {

struct SyntheticSpec {
  int n_subjects = 60;
  int minutes_per_subject = 480;
  int n_features = 225;
  int n_labels = 51;
  double dirichlet_alpha = 0.2;
  double noise_std = 1.0;
  double ar_coefficient = 0.5;
  double ar_noise_std = 0.5;
  double subject_shift_std = 0.5;   // per-subject constant feature offset
  double prototype_jitter = 0.5;    // per-subject perturbation of label prototypes
  double label_missing_rate = 0.05;
  double feature_missing_rate = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_subjects <= 0 || minutes_per_subject <= 0 || n_features <= 0 || n_labels <= 0) {
      throw ConfigError("synthetic counts must be positive");
    }
    if (!(dirichlet_alpha > 0.0)) throw ConfigError("dirichlet_alpha must be positive");
    if (noise_std < 0 || ar_noise_std < 0 || subject_shift_std < 0 || prototype_jitter < 0) {
      throw ConfigError("noise scales must be non-negative");
    }
    if (label_missing_rate < 0 || label_missing_rate >= 1 || feature_missing_rate < 0 || feature_missing_rate >= 1) {
      throw ConfigError("missing rates must lie in [0,1)");
    }
  }
};

/// Shared label prototypes [n_labels x n_features], row-major.
inline std::vector<double> synthetic_prototypes(const SyntheticSpec& spec) {
  std::mt19937_64 rng(derive_seed({spec.seed, 0x70726F746FULL}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> p(static_cast<std::size_t>(spec.n_labels) * static_cast<std::size_t>(spec.n_features));
  for (auto& v : p) v = normal(rng);
  return p;
}

/// Global label popularity, proportional to 1/(k+1).
inline std::vector<double> synthetic_popularity(const SyntheticSpec& spec) {
  std::vector<double> g(static_cast<std::size_t>(spec.n_labels));
  double s = 0;
  for (std::size_t k = 0; k < g.size(); ++k) s += g[k] = 1.0 / static_cast<double>(k + 1);
  for (auto& v : g) v /= s;
  return g;
}

inline std::string synthetic_subject_id(const SyntheticSpec& spec, int subject) {
  const std::uint64_t a = splitmix64(derive_seed({spec.seed, 0x6964ULL, static_cast<std::uint64_t>(subject)}));
  const std::uint64_t b = splitmix64(a);
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%08X-%04X-%04X-%04X-%012llX", static_cast<unsigned>(a >> 32),
                static_cast<unsigned>((a >> 16) & 0xFFFF), static_cast<unsigned>(a & 0xFFFF),
                static_cast<unsigned>(b >> 48), static_cast<unsigned long long>(b & 0xFFFFFFFFFFFFULL));
  return buf;
}

inline std::vector<SubjectRecord> gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto f = static_cast<std::size_t>(spec.n_features);
  const auto l = static_cast<std::size_t>(spec.n_labels);
  const auto minutes = static_cast<std::size_t>(spec.minutes_per_subject);
  const auto protos = synthetic_prototypes(spec);
  const auto popularity = synthetic_popularity(spec);

  std::vector<SubjectRecord> out;
  out.reserve(static_cast<std::size_t>(spec.n_subjects));
  for (int s = 0; s < spec.n_subjects; ++s) {
    std::mt19937_64 rng(derive_seed({spec.seed, static_cast<std::uint64_t>(s)}));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    // label prior ~ Dirichlet(alpha * L * popularity)
    std::vector<double> prior(l);
    double total = 0;
    for (std::size_t k = 0; k < l; ++k) {
      std::gamma_distribution<double> gamma(spec.dirichlet_alpha * static_cast<double>(l) * popularity[k], 1.0);
      total += prior[k] = gamma(rng);
    }
    if (total <= 0) {
      prior = popularity;
    } else {
      for (auto& v : prior) v /= total;
    }
    std::discrete_distribution<std::size_t> pick(prior.begin(), prior.end());

    std::vector<double> local(protos);
    for (auto& v : local) v += spec.prototype_jitter * normal(rng);
    std::vector<double> shift(f);
    for (auto& v : shift) v = spec.subject_shift_std * normal(rng);

    SubjectRecord rec;
    rec.subject_id = synthetic_subject_id(spec, s);
    rec.n_features = f;
    rec.n_labels = l;
    rec.timestamps.resize(minutes);
    rec.features.resize(minutes * f);
    rec.labels.resize(minutes * l);
    const std::int64_t start = 1440000000 + static_cast<std::int64_t>(s) * 10000000;
    std::vector<double> ar(f, 0.0);
    std::vector<char> active(l);
    for (std::size_t t = 0; t < minutes; ++t) {
      rec.timestamps[t] = start + static_cast<std::int64_t>(t) * 60;
      std::fill(active.begin(), active.end(), 0);
      active[pick(rng)] = 1;
      if (unif(rng) < 0.5) active[pick(rng)] = 1;
      for (std::size_t c = 0; c < f; ++c) {
        ar[c] = spec.ar_coefficient * ar[c] + spec.ar_noise_std * normal(rng);
        double x = shift[c] + ar[c];
        for (std::size_t k = 0; k < l; ++k) {
          if (active[k]) x += local[k * f + c];
        }
        x += spec.noise_std * normal(rng);
        const bool missing = spec.feature_missing_rate > 0 && unif(rng) < spec.feature_missing_rate;
        rec.features[t * f + c] = missing ? std::nanf("") : static_cast<float>(x);
      }
      for (std::size_t k = 0; k < l; ++k) {
        const bool missing = spec.label_missing_rate > 0 && unif(rng) < spec.label_missing_rate;
        rec.labels[t * l + k] = missing ? kMissingLabel : static_cast<std::int8_t>(active[k]);
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<std::string> synthetic_feature_names(int n) {
  std::vector<std::string> out;
  char buf[32];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "synthetic:feature_%03d", i);
    out.emplace_back(buf);
  }
  return out;
}

inline std::vector<std::string> synthetic_label_names(int n) {
  std::vector<std::string> out;
  char buf[32];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "ACTIVITY_%02d", i);
    out.emplace_back(buf);
  }
  return out;
}

}  // namespace fedhar
