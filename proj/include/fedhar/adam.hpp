#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedhar/autograd.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/tensor.hpp"

namespace fedhar {

template <typename T>
struct AdamState {
  BasicTensor<T> m;
  BasicTensor<T> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update, no weight decay.
template <typename T>
void adam_step(BasicTensor<T>& param, const BasicTensor<T>& grad, AdamState<T>& state, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  if (grad.shape() != param.shape()) {
    throw ShapeError("adam: grad shape " + shape_str(grad.shape()) + " does not match param " +
                     shape_str(param.shape()));
  }
  if (state.m.empty()) {
    state.m = BasicTensor<T>(param.shape());
    state.v = BasicTensor<T>(param.shape());
  } else if (state.m.shape() != param.shape()) {
    throw ShapeError("adam: state shape " + shape_str(state.m.shape()) + " does not match param " +
                     shape_str(param.shape()));
  }
  state.t += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double g = grad[i];
    const double m = b1 * state.m[i] + (1.0 - b1) * g;
    const double v = b2 * state.v[i] + (1.0 - b2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double mhat = m / c1;
    const double vhat = v / c2;
    param[i] = static_cast<T>(param[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

/// Adam over a fixed list of parameter Vars. Parameters without a gradient
/// buffer are treated as having zero gradient.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, double lr) : params_(std::move(params)), lr_(lr) {
    states_.resize(params_.size());
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.grad().empty()) p.mutable_grad();
      adam_step(p.mutable_value(), p.grad(), states_[i], lr_);
    }
  }

  double lr() const { return lr_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<AdamState<T>> states_;
  double lr_;
};

}  // namespace fedhar
