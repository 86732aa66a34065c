#pragma once

// Reverse-mode automatic differentiation over BasicTensor<T>.
//
// Every op returns a Var whose node keeps its parents alive and a closure that
// pushes the node's gradient into them. The graph is owned by whoever holds the
// output Var; nothing is global, so independent training loops can run in
// separate threads.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fedhar/errors.hpp"
#include "fedhar/tensor.hpp"

namespace fedhar {

template <typename T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  BasicTensor<T>& grad_buffer() {
    if (grad.empty()) grad = BasicTensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const BasicTensor<T>& value() const { return node_->value; }
  BasicTensor<T>& mutable_value() { return node_->value; }
  const BasicTensor<T>& grad() const { return node_->grad; }
  BasicTensor<T>& mutable_grad() { return node_->grad_buffer(); }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T{0});
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> parameter(BasicTensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> constant(BasicTensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

namespace detail {

template <typename T>
Var<T> make_op(BasicTensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->is_leaf = false;
  for (const auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
    n->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(n));
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

}  // namespace detail

namespace kernels {

// c[M,N] += a[M,K] * b[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[K,N] += a[M,K]^T * b[M,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,K] += a[M,N] * b[K,N]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm_nn(a, bt.data(), c, m, n, k);
}

}  // namespace kernels

/// Reverse sweep from a single-element loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed each time.
template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.valid() || loss.value().numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     (loss.valid() ? shape_str(loss.shape()) : std::string("<null>")));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf && !n->grad.empty()) n->grad.fill(T{0});
  }
  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw ShapeError("matmul shape mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  BasicTensor<T> out({m, n});
  kernels::gemm_nn(a.value().ptr(), b.value().ptr(), out.ptr(), m, k, n);
  return detail::make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    if (detail::wants_grad(self, 0)) {
      kernels::gemm_nt(self.grad.ptr(), B.ptr(), self.parents[0]->grad_buffer().ptr(), m, n, k);
    }
    if (detail::wants_grad(self, 1)) {
      kernels::gemm_tn(A.ptr(), self.grad.ptr(), self.parents[1]->grad_buffer().ptr(), m, k, n);
    }
  });
}

/// y = x w + b over the last axis of x. w is [in, out], b is [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& ws = w.shape();
  if (ws.size() != 2 || x.value().last_dim() != ws[0] || x.shape().empty()) {
    throw ShapeError("linear shape mismatch: " + shape_str(x.shape()) + " x " + shape_str(ws));
  }
  if (b.shape().size() != 1 || b.shape()[0] != ws[1]) {
    throw ShapeError("linear bias shape " + shape_str(b.shape()) + " does not match weight " +
                     shape_str(ws));
  }
  const std::size_t in = ws[0], outd = ws[1];
  const std::size_t m = x.value().numel() / in;
  Shape oshape = x.shape();
  oshape.back() = outd;
  BasicTensor<T> out(oshape);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(b.value().ptr(), b.value().ptr() + outd, out.ptr() + i * outd);
  }
  kernels::gemm_nn(x.value().ptr(), w.value().ptr(), out.ptr(), m, in, outd);
  return detail::make_op<T>(std::move(out), {x, w, b}, [m, in, outd](Node<T>& self) {
    const auto& X = self.parents[0]->value;
    const auto& W = self.parents[1]->value;
    const T* dy = self.grad.ptr();
    if (detail::wants_grad(self, 0)) {
      kernels::gemm_nt(dy, W.ptr(), self.parents[0]->grad_buffer().ptr(), m, outd, in);
    }
    if (detail::wants_grad(self, 1)) {
      kernels::gemm_tn(X.ptr(), dy, self.parents[1]->grad_buffer().ptr(), m, in, outd);
    }
    if (detail::wants_grad(self, 2)) {
      std::vector<double> acc(outd, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < outd; ++j) acc[j] += dy[i * outd + j];
      }
      auto& db = self.parents[2]->grad_buffer();
      for (std::size_t j = 0; j < outd; ++j) db[j] += static_cast<T>(acc[j]);
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants_grad(self, p)) continue;
      auto& g = self.parents[p]->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

/// x[B,T,H] + table[0:T, H], broadcast over the batch axis.
template <typename T>
Var<T> add_positional(const Var<T>& x, const Var<T>& table) {
  const auto& xs = x.shape();
  const auto& ts = table.shape();
  if (xs.size() != 3 || ts.size() != 2 || xs[2] != ts[1]) {
    throw ShapeError("positional add shape mismatch: " + shape_str(xs) + " + " + shape_str(ts));
  }
  if (xs[1] > ts[0]) {
    throw ShapeError("sequence length " + std::to_string(xs[1]) + " exceeds n_positions " +
                     std::to_string(ts[0]));
  }
  const std::size_t bsz = xs[0], len = xs[1], h = xs[2];
  BasicTensor<T> out = x.value();
  for (std::size_t b = 0; b < bsz; ++b) {
    T* row = out.ptr() + b * len * h;
    for (std::size_t i = 0; i < len * h; ++i) row[i] += table.value()[i];
  }
  return detail::make_op<T>(std::move(out), {x, table}, [bsz, len, h](Node<T>& self) {
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < len * h; ++i) {
        double acc = 0.0;
        for (std::size_t b = 0; b < bsz; ++b) acc += self.grad[b * len * h + i];
        g[i] += static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * B[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * A[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i];
  return detail::make_op<T>(BasicTensor<T>::scalar(static_cast<T>(acc)), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T d = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += d;
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  BasicTensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  return detail::make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * (T{1} - y * y);
    }
  });
}

/// GPT-2's tanh approximation of GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = static_cast<T>(0.044715);
  BasicTensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = out[i];
    out[i] = T{0.5} * v * (T{1} + std::tanh(c * (v + k * v * v * v)));
  }
  return detail::make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    const auto& X = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T v = X[i];
      const T th = std::tanh(c * (v + k * v * v * v));
      const T d = T{0.5} * (T{1} + th) +
                  T{0.5} * v * (T{1} - th * th) * c * (T{1} + T{3} * k * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

/// Inverted dropout. With rate 0 or no generator this is the identity.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, std::mt19937_64* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  BasicTensor<T> mask(x.shape());
  BasicTensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    mask[i] = u(*rng) >= rate ? keep : T{0};
    out[i] *= mask[i];
  }
  return detail::make_op<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  const std::size_t n = x.value().last_dim();
  const std::size_t rows = x.value().numel() / n;
  BasicTensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.ptr() + r * n;
    const T mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] = static_cast<T>(row[j] / s);
  }
  return detail::make_op<T>(std::move(out), {x}, [n, rows](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.ptr() + r * n;
      const T* dy = self.grad.ptr() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(y[j]) * dy[j];
      for (std::size_t j = 0; j < n; ++j) {
        g[r * n + j] += static_cast<T>(y[j] * (dy[j] - dot));
      }
    }
  });
}

/// Normalizes each last-axis slice to zero mean and unit variance, then applies
/// gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps = 1e-5) {
  const std::size_t h = x.value().last_dim();
  if (gain.shape() != Shape{h} || bias.shape() != Shape{h}) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gain " +
                     shape_str(gain.shape()) + " and bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.value().numel() / h;
  BasicTensor<T> xhat(x.shape());
  std::vector<double> rstd(rows);
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().ptr() + r * h;
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += in[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double d = in[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(h);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      const T xh = static_cast<T>((in[j] - mean) * rstd[r]);
      xhat[r * h + j] = xh;
      out[r * h + j] = xh * gain.value()[j] + bias.value()[j];
    }
  }
  return detail::make_op<T>(
      std::move(out), {x, gain, bias},
      [h, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const auto& G = self.parents[1]->value;
        const T* dy = self.grad.ptr();
        if (detail::wants_grad(self, 1) || detail::wants_grad(self, 2)) {
          std::vector<double> dg(h, 0.0), db(h, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < h; ++j) {
              dg[j] += static_cast<double>(dy[r * h + j]) * xhat[r * h + j];
              db[j] += dy[r * h + j];
            }
          }
          if (detail::wants_grad(self, 1)) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t j = 0; j < h; ++j) g[j] += static_cast<T>(dg[j]);
          }
          if (detail::wants_grad(self, 2)) {
            auto& g = self.parents[2]->grad_buffer();
            for (std::size_t j = 0; j < h; ++j) g[j] += static_cast<T>(db[j]);
          }
        }
        if (detail::wants_grad(self, 0)) {
          auto& gx = self.parents[0]->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
              const double dxh = static_cast<double>(dy[r * h + j]) * G[j];
              m1 += dxh;
              m2 += dxh * xhat[r * h + j];
            }
            m1 /= static_cast<double>(h);
            m2 /= static_cast<double>(h);
            for (std::size_t j = 0; j < h; ++j) {
              const double dxh = static_cast<double>(dy[r * h + j]) * G[j];
              gx[r * h + j] += static_cast<T>(rstd[r] * (dxh - m1 - xhat[r * h + j] * m2));
            }
          }
        }
      });
}

/// Multi-head causal attention core. qkv is [B,T,3H] laid out as q|k|v with
/// head h owning columns [h*d, (h+1)*d) of each section. Position t attends to
/// positions s <= t with pad_mask[b,s] == 1; a query with no admissible key
/// outputs zeros. Returns [B,T,H].
template <typename T>
Var<T> causal_attention_core(const Var<T>& qkv, const BasicTensor<T>& pad_mask, std::size_t n_heads,
                             double attn_dropout = 0.0, std::mt19937_64* rng = nullptr) {
  const auto& s = qkv.shape();
  if (s.size() != 3 || s[2] % 3 != 0) {
    throw ShapeError("attention expects qkv of shape [B,T,3H], got " + shape_str(s));
  }
  const std::size_t bsz = s[0], len = s[1], h3 = s[2], h = h3 / 3;
  if (n_heads == 0 || h % n_heads != 0) {
    throw ConfigError("hidden size " + std::to_string(h) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (pad_mask.shape() != Shape{bsz, len}) {
    throw ShapeError("pad mask shape " + shape_str(pad_mask.shape()) + " does not match [B,T] = " +
                     shape_str({bsz, len}));
  }
  const std::size_t d = h / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const bool drop = attn_dropout > 0.0 && rng != nullptr;
  const T keep = static_cast<T>(drop ? 1.0 / (1.0 - attn_dropout) : 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // probs: softmax weights; dprobs: after dropout (identical when no dropout).
  BasicTensor<T> probs({bsz, n_heads, len, len});
  BasicTensor<T> dprobs;
  if (drop) dprobs = BasicTensor<T>({bsz, n_heads, len, len});
  BasicTensor<T> out({bsz, len, h});
  const T* q = qkv.value().ptr();
  std::vector<double> sc(len);

  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      T* P = probs.ptr() + ((b * n_heads + hd) * len) * len;
      T* PD = drop ? dprobs.ptr() + ((b * n_heads + hd) * len) * len : P;
      for (std::size_t t = 0; t < len; ++t) {
        const T* qt = q + (b * len + t) * h3 + hd * d;
        double mx = -INFINITY;
        bool any = false;
        for (std::size_t j = 0; j <= t; ++j) {
          if (pad_mask.at(b, j) == T{0}) continue;
          const T* kj = q + (b * len + j) * h3 + h + hd * d;
          double dot = 0.0;
          for (std::size_t e = 0; e < d; ++e) dot += static_cast<double>(qt[e]) * kj[e];
          sc[j] = dot * scale;
          mx = std::max(mx, sc[j]);
          any = true;
        }
        if (!any) continue;
        double z = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          if (pad_mask.at(b, j) == T{0}) continue;
          sc[j] = std::exp(sc[j] - mx);
          z += sc[j];
        }
        T* o = out.ptr() + (b * len + t) * h + hd * d;
        for (std::size_t j = 0; j <= t; ++j) {
          if (pad_mask.at(b, j) == T{0}) continue;
          P[t * len + j] = static_cast<T>(sc[j] / z);
          if (drop) PD[t * len + j] = u(*rng) >= attn_dropout ? P[t * len + j] * keep : T{0};
          const T w = PD[t * len + j];
          const T* vj = q + (b * len + j) * h3 + 2 * h + hd * d;
          for (std::size_t e = 0; e < d; ++e) o[e] += w * vj[e];
        }
      }
    }
  }

  return detail::make_op<T>(
      std::move(out), {qkv},
      [bsz, len, h, h3, d, n_heads, scale, drop, keep, probs = std::move(probs),
       dprobs = std::move(dprobs)](Node<T>& self) {
        const T* q = self.parents[0]->value.ptr();
        T* gq = self.parents[0]->grad_buffer().ptr();
        const T* dout = self.grad.ptr();
        std::vector<double> dp(len), ds(len);
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t hd = 0; hd < n_heads; ++hd) {
            const T* P = probs.ptr() + ((b * n_heads + hd) * len) * len;
            const T* PD = drop ? dprobs.ptr() + ((b * n_heads + hd) * len) * len : P;
            for (std::size_t t = 0; t < len; ++t) {
              const T* dot_ = dout + (b * len + t) * h + hd * d;
              const T* qt = q + (b * len + t) * h3 + hd * d;
              T* gqt = gq + (b * len + t) * h3 + hd * d;
              double row_dot = 0.0;
              for (std::size_t j = 0; j <= t; ++j) {
                const T p = P[t * len + j];
                if (p == T{0}) {
                  dp[j] = 0.0;
                  continue;
                }
                const T* vj = q + (b * len + j) * h3 + 2 * h + hd * d;
                T* gvj = gq + (b * len + j) * h3 + 2 * h + hd * d;
                const T w = PD[t * len + j];
                double acc = 0.0;
                for (std::size_t e = 0; e < d; ++e) {
                  acc += static_cast<double>(dot_[e]) * vj[e];
                  gvj[e] += w * dot_[e];
                }
                if (drop) acc = (PD[t * len + j] == T{0}) ? 0.0 : acc * keep;
                dp[j] = acc;
                row_dot += acc * p;
              }
              for (std::size_t j = 0; j <= t; ++j) {
                const T p = P[t * len + j];
                if (p == T{0}) continue;
                ds[j] = p * (dp[j] - row_dot) * scale;
                const T* kj = q + (b * len + j) * h3 + h + hd * d;
                T* gkj = gq + (b * len + j) * h3 + h + hd * d;
                const T dsj = static_cast<T>(ds[j]);
                for (std::size_t e = 0; e < d; ++e) {
                  gqt[e] += dsj * kj[e];
                  gkj[e] += dsj * qt[e];
                }
              }
            }
          }
        }
      });
}

template <typename T>
struct AttentionParams {
  Var<T> qkv_w;  // [H, 3H]
  Var<T> qkv_b;  // [3H]
  Var<T> out_w;  // [H, H]
  Var<T> out_b;  // [H]
};

/// Full attention sublayer: qkv projection, causal multi-head attention with
/// scores scaled by 1/sqrt(H/n_heads), output projection.
template <typename T>
Var<T> causal_self_attention(const Var<T>& x, const AttentionParams<T>& p, std::size_t n_heads,
                             const BasicTensor<T>& pad_mask, std::size_t n_positions,
                             double attn_dropout = 0.0, std::mt19937_64* rng = nullptr) {
  if (x.shape().size() != 3) {
    throw ShapeError("attention input must be [B,T,H], got " + shape_str(x.shape()));
  }
  const std::size_t h = x.shape()[2];
  if (n_heads == 0 || h % n_heads != 0) {
    throw ConfigError("hidden size " + std::to_string(h) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (x.shape()[1] > n_positions) {
    throw ShapeError("sequence length " + std::to_string(x.shape()[1]) + " exceeds n_positions " +
                     std::to_string(n_positions));
  }
  auto qkv = linear(x, p.qkv_w, p.qkv_b);
  auto att = causal_attention_core(qkv, pad_mask, n_heads, attn_dropout, rng);
  return linear(att, p.out_w, p.out_b);
}

/// Masked, positive-weighted binary cross-entropy on tanh outputs y in (-1, 1):
/// p = (1 + y) / 2, loss = -sum m*(w*t*ln p + (1-t)*ln(1-p)) / sum m*(w*t + 1 - t).
template <typename T>
Var<T> masked_weighted_loss(const Var<T>& y, const BasicTensor<T>& targets, const BasicTensor<T>& mask,
                            const BasicTensor<T>& pos_weight) {
  const std::size_t labels = y.value().last_dim();
  if (targets.shape() != y.shape() || mask.shape() != y.shape()) {
    throw ShapeError("loss shape mismatch: output " + shape_str(y.shape()) + ", targets " +
                     shape_str(targets.shape()) + ", mask " + shape_str(mask.shape()));
  }
  if (pos_weight.shape() != Shape{labels}) {
    throw ShapeError("pos_weight shape " + shape_str(pos_weight.shape()) + " does not match " +
                     std::to_string(labels) + " labels");
  }
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  const std::size_t n = y.value().numel();
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == T{0}) continue;
    const double w = pos_weight[i % labels];
    const double t = targets[i];
    const double p = std::clamp(0.5 * (1.0 + static_cast<double>(y.value()[i])), lo, hi);
    num -= mask[i] * (w * t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    den += mask[i] * (w * t + (1.0 - t));
  }
  if (den <= 0.0) throw DegenerateError("loss over an all-zero mask");
  return detail::make_op<T>(
      BasicTensor<T>::scalar(static_cast<T>(num / den)), {y},
      [targets, mask, pos_weight, labels, den, n](Node<T>& self) {
        const auto& Y = self.parents[0]->value;
        auto& g = self.parents[0]->grad_buffer();
        const double scale = self.grad[0] / den;
        for (std::size_t i = 0; i < n; ++i) {
          if (mask[i] == T{0}) continue;
          const double praw = 0.5 * (1.0 + static_cast<double>(Y[i]));
          if (praw <= lo || praw >= hi) continue;
          const double w = pos_weight[i % labels];
          const double t = targets[i];
          const double dldp = -mask[i] * (w * t / praw - (1.0 - t) / (1.0 - praw));
          g[i] += static_cast<T>(scale * 0.5 * dldp);
        }
      });
}

}  // namespace fedhar
