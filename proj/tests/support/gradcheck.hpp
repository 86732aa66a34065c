#pragma once

// Central finite differences over the 64-bit evaluation path of the model,
// used as the oracle for analytic gradients.

#include <cmath>
#include <random>
#include <string>

#include "fedhar/model.hpp"

namespace fedhar::testing {

struct LossInputs {
  BasicTensor<double> x;        // [B,T,F]
  BasicTensor<double> pad;      // [B,T]
  BasicTensor<double> targets;  // [B,T,L]
  BasicTensor<double> mask;     // [B,T,L]
  BasicTensor<double> pos_weight;
};

inline LossInputs random_loss_inputs(const ModelConfig& c, std::size_t batch, std::size_t len,
                                     std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto f = static_cast<std::size_t>(c.n_features);
  const auto l = static_cast<std::size_t>(c.n_labels);
  LossInputs in{BasicTensor<double>({batch, len, f}), BasicTensor<double>({batch, len}, 1.0),
                BasicTensor<double>({batch, len, l}), BasicTensor<double>({batch, len, l}),
                BasicTensor<double>({l})};
  for (auto& v : in.x.data()) v = normal(rng);
  // trailing padding on the last sequence, like a final short window
  if (batch > 1 && len > 2) {
    for (std::size_t t = len - 1; t < len; ++t) in.pad.at(batch - 1, t) = 0.0;
  }
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t k = 0; k < l; ++k) {
        in.targets.at(b, t, k) = u(rng) < 0.4 ? 1.0 : 0.0;
        const bool present = in.pad.at(b, t) != 0.0 && u(rng) < 0.85;
        in.mask.at(b, t, k) = present ? 1.0 : 0.0;
      }
    }
  }
  in.mask[0] = 1.0;
  for (auto& w : in.pos_weight.data()) w = 0.5 + 2.0 * u(rng);
  return in;
}

template <typename T>
double model_loss(const ModelParams<T>& p, const LossInputs& in) {
  auto y = forward(p, in.x.cast<T>(), in.pad.cast<T>());
  auto loss = masked_weighted_loss(y, in.targets.cast<T>(), in.mask.cast<T>(), in.pos_weight.cast<T>());
  return static_cast<double>(loss.value()[0]);
}

/// Analytic gradients on the T path after one backward pass.
template <typename T>
BasicWeightSet<T> analytic_gradients(const BasicWeightSet<T>& w, const ModelConfig& c, const LossInputs& in) {
  auto p = make_params(w, c, true);
  auto y = forward(p, in.x.cast<T>(), in.pad.cast<T>());
  auto loss = masked_weighted_loss(y, in.targets.cast<T>(), in.mask.cast<T>(), in.pos_weight.cast<T>());
  backward(loss);
  BasicWeightSet<T> g;
  for (std::size_t i = 0; i < p.vars.size(); ++i) {
    BasicTensor<T> gt = p.vars[i].grad().empty() ? BasicTensor<T>(p.vars[i].shape()) : p.vars[i].grad();
    g.add(p.names[i], std::move(gt));
  }
  return g;
}

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_excess = 0.0;  // max |a-fd| / allowed
  std::string worst_param;
};

/// Compares analytic gradients against central differences computed in double.
/// An element passes when |a - fd| <= max(rtol * |fd|, atol).
template <typename T>
GradCheckReport check_gradients(const BasicWeightSet<T>& weights, const ModelConfig& c, const LossInputs& in,
                                double h = 1e-3, double rtol = 1e-3, double atol = 1e-6) {
  const auto grads = analytic_gradients(weights, c, in);
  auto shadow = weights.template cast<double>();
  auto params = make_params(shadow, c, false);
  GradCheckReport rep;
  for (std::size_t i = 0; i < params.vars.size(); ++i) {
    auto& value = params.vars[i].mutable_value();
    for (std::size_t j = 0; j < value.numel(); ++j) {
      const double orig = value[j];
      value[j] = orig + h;
      const double up = model_loss(params, in);
      value[j] = orig - h;
      const double down = model_loss(params, in);
      value[j] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double a = static_cast<double>(grads[i].tensor[j]);
      const double allowed = std::max(rtol * std::abs(fd), atol);
      const double excess = std::abs(a - fd) / allowed;
      ++rep.checked;
      if (excess > 1.0) ++rep.failures;
      if (excess > rep.worst_excess) {
        rep.worst_excess = excess;
        rep.worst_param = params.names[i] + "[" + std::to_string(j) + "] analytic=" + std::to_string(a) +
                          " fd=" + std::to_string(fd);
      }
    }
  }
  return rep;
}

}  // namespace fedhar::testing
