#pragma once

// The classifier: linear input projection + learned positions, a stack of
// pre-norm GPT-2 blocks, final layer norm, a linear head, and a linear output
// layer squashed by tanh with one unit per label.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fedhar/autograd.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/tensor.hpp"

namespace fedhar {

struct ModelConfig {
  int n_features = 225;
  int n_labels = 51;
  int transformers_layers = 4;
  int hidden_size = 384;
  int n_positions = 128;
  int n_heads = 6;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  /// hidden/64 when that divides evenly (GPT-2 head width), otherwise 4.
  static int default_heads(int hidden) { return hidden % 64 == 0 ? hidden / 64 : 4; }

  /// Best configuration found by the centralized random search.
  static ModelConfig paper() { return ModelConfig{}; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
    };
    positive(n_features, "n_features");
    positive(n_labels, "n_labels");
    positive(transformers_layers, "transformers_layers");
    positive(hidden_size, "hidden_size");
    positive(n_positions, "n_positions");
    positive(n_heads, "n_heads");
    if (hidden_size % n_heads != 0) {
      throw ConfigError("hidden_size " + std::to_string(hidden_size) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw ConfigError("dropout must lie in [0,1), got " + std::to_string(dropout));
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Named tensors in a fixed declaration order.
template <typename T>
class BasicWeightSet {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> tensor;
    bool operator==(const Entry&) const = default;
  };

  void add(std::string name, BasicTensor<T> tensor) {
    if (find(name) != nullptr) throw ConfigError("duplicate parameter name: " + name);
    entries_.push_back({std::move(name), std::move(tensor)});
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  const BasicTensor<T>& at(const std::string& name) const {
    if (const Entry* e = find(name)) return e->tensor;
    throw ConfigError("no parameter named " + name);
  }
  BasicTensor<T>& at(const std::string& name) {
    return const_cast<BasicTensor<T>&>(std::as_const(*this).at(name));
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  template <typename U>
  BasicWeightSet<U> cast() const {
    BasicWeightSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.template cast<U>());
    return out;
  }

  bool operator==(const BasicWeightSet&) const = default;

 private:
  std::vector<Entry> entries_;
};

using WeightSet = BasicWeightSet<float>;

template <typename T>
bool bitwise_equal(const BasicWeightSet<T>& a, const BasicWeightSet<T>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || !bitwise_equal(a[i].tensor, b[i].tensor)) return false;
  }
  return true;
}

/// Canonical parameter names and shapes induced by a config.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  c.validate();
  const auto f = static_cast<std::size_t>(c.n_features);
  const auto h = static_cast<std::size_t>(c.hidden_size);
  const auto p = static_cast<std::size_t>(c.n_positions);
  const auto l = static_cast<std::size_t>(c.n_labels);
  std::vector<std::pair<std::string, Shape>> out = {
      {"input_proj.w", {f, h}},
      {"input_proj.b", {h}},
      {"pos_emb", {p, h}},
  };
  for (int i = 0; i < c.transformers_layers; ++i) {
    const std::string b = "block" + std::to_string(i) + ".";
    out.push_back({b + "ln1.w", {h}});
    out.push_back({b + "ln1.b", {h}});
    out.push_back({b + "attn.qkv.w", {h, 3 * h}});
    out.push_back({b + "attn.qkv.b", {3 * h}});
    out.push_back({b + "attn.out.w", {h, h}});
    out.push_back({b + "attn.out.b", {h}});
    out.push_back({b + "ln2.w", {h}});
    out.push_back({b + "ln2.b", {h}});
    out.push_back({b + "mlp.fc.w", {h, 4 * h}});
    out.push_back({b + "mlp.fc.b", {4 * h}});
    out.push_back({b + "mlp.proj.w", {4 * h, h}});
    out.push_back({b + "mlp.proj.b", {h}});
  }
  out.push_back({"ln_f.gain", {h}});
  out.push_back({"ln_f.bias", {h}});
  out.push_back({"head.w", {h, h}});
  out.push_back({"head.b", {h}});
  out.push_back({"out.w", {h, l}});
  out.push_back({"out.b", {l}});
  return out;
}

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

/// Weights ~ Normal(0, 0.02), biases 0, layer-norm gains 1. Deterministic in config.seed.
inline WeightSet init_model(const ModelConfig& config) {
  const auto layout = parameter_layout(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  WeightSet ws;
  for (const auto& [name, shape] : layout) {
    Tensor t(shape);
    const bool is_norm = name.rfind("ln", 0) == 0 || name.find(".ln") != std::string::npos;
    if (is_norm && (detail::ends_with(name, ".w") || detail::ends_with(name, ".gain"))) {
      t.fill(1.0f);
    } else if (detail::ends_with(name, ".b") || detail::ends_with(name, ".bias")) {
      // zeros
    } else {
      for (auto& v : t.data()) v = static_cast<float>(normal(rng));
    }
    ws.add(name, std::move(t));
  }
  return ws;
}

/// Graph-ready view of a weight set, in canonical order.
template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Var<T>> vars;

  const Var<T>& operator[](std::size_t i) const { return vars[i]; }

  BasicWeightSet<T> to_weights() const {
    BasicWeightSet<T> ws;
    for (std::size_t i = 0; i < vars.size(); ++i) ws.add(names[i], vars[i].value());
    return ws;
  }
};

/// Throws ShapeError naming the first tensor whose name or shape disagrees with the config.
template <typename T>
void check_layout(const BasicWeightSet<T>& weights, const ModelConfig& config) {
  const auto layout = parameter_layout(config);
  if (layout.size() != weights.size()) {
    throw ShapeError("weight set has " + std::to_string(weights.size()) + " tensors, config expects " +
                     std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (weights[i].name != layout[i].first) {
      throw ShapeError("tensor " + std::to_string(i) + " is named " + weights[i].name + ", expected " +
                       layout[i].first);
    }
    if (weights[i].tensor.shape() != layout[i].second) {
      throw ShapeError("tensor " + weights[i].name + " has shape " + shape_str(weights[i].tensor.shape()) +
                       ", expected " + shape_str(layout[i].second));
    }
  }
}

template <typename T>
ModelParams<T> make_params(const BasicWeightSet<T>& weights, const ModelConfig& config, bool trainable) {
  check_layout(weights, config);
  ModelParams<T> p;
  p.config = config;
  for (const auto& e : weights) {
    p.names.push_back(e.name);
    p.vars.push_back(trainable ? parameter(e.tensor) : constant(e.tensor));
  }
  return p;
}

struct ForwardOptions {
  bool train_mode = false;
  std::mt19937_64* rng = nullptr;  // dropout source; required for dropout in train mode
};

/// x: [B,T,n_features], pad_mask: [B,T] -> tanh outputs [B,T,n_labels].
template <typename T>
Var<T> forward(const ModelParams<T>& p, const BasicTensor<T>& x, const BasicTensor<T>& pad_mask,
               const ForwardOptions& opts = {}) {
  const ModelConfig& c = p.config;
  if (x.rank() != 3) throw ShapeError("model input must be [B,T,F], got " + shape_str(x.shape()));
  if (x.dim(2) != static_cast<std::size_t>(c.n_features)) {
    throw ShapeError("model expects " + std::to_string(c.n_features) + " features, got input " +
                     shape_str(x.shape()));
  }
  if (x.dim(1) > static_cast<std::size_t>(c.n_positions)) {
    throw ShapeError("sequence length " + std::to_string(x.dim(1)) + " exceeds n_positions " +
                     std::to_string(c.n_positions));
  }
  const double rate = opts.train_mode ? c.dropout : 0.0;
  std::mt19937_64* rng = opts.train_mode ? opts.rng : nullptr;
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const auto npos = static_cast<std::size_t>(c.n_positions);

  auto h = linear(constant(x), p[0], p[1]);
  h = add_positional(h, p[2]);
  h = dropout(h, rate, rng);
  for (int i = 0; i < c.transformers_layers; ++i) {
    const std::size_t b = 3 + 12 * static_cast<std::size_t>(i);
    auto a = layer_norm(h, p[b + 0], p[b + 1]);
    a = causal_self_attention(a, AttentionParams<T>{p[b + 2], p[b + 3], p[b + 4], p[b + 5]}, heads,
                              pad_mask, npos, rate, rng);
    h = add(h, a);
    auto m = layer_norm(h, p[b + 6], p[b + 7]);
    m = gelu(linear(m, p[b + 8], p[b + 9]));
    m = linear(m, p[b + 10], p[b + 11]);
    m = dropout(m, rate, rng);
    h = add(h, m);
  }
  const std::size_t t = 3 + 12 * static_cast<std::size_t>(c.transformers_layers);
  h = layer_norm(h, p[t + 0], p[t + 1]);
  h = linear(h, p[t + 2], p[t + 3]);
  h = linear(h, p[t + 4], p[t + 5]);
  return tanh(h);
}

/// Positive iff the tanh output is strictly above zero.
template <typename T>
BasicTensor<T> predict(const BasicTensor<T>& y) {
  BasicTensor<T> out(y.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) out[i] = y[i] > T{0} ? T{1} : T{0};
  return out;
}

}  // namespace fedhar
