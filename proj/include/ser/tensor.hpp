#pragma once

#include <bit>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

namespace ser {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GradientError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty means "no gradient populated"
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Shaped real array with optional reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Operations
/// treat the last dimension as columns and everything before it as rows.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape.empty()) shape = {1};
    if (numel_of(shape) != values.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t cols() const { return node_->shape.back(); }
  std::size_t rows() const { return numel() / cols(); }

  std::span<const T> values() const { return node_->value; }
  // Only meaningful on leaves (parameters, inputs); graph outputs are read-only.
  std::span<T> mutable_values() {
    if (!node_->is_leaf) throw GradientError("cannot mutate the output of a recorded operation");
    return node_->value;
  }
  const std::vector<T>& data() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw GradientError("requires_grad can only be changed on leaves");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  bool is_leaf() const { return node_->is_leaf; }

  // Detached deep copy (new leaf, no gradient).
  Tensor clone() const { return Tensor(shape(), node_->value, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  // An all-ones exponent field marks inf or nan; the integer test vectorizes.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  Bits bad = 0;
  for (const T x : v) bad |= static_cast<Bits>((std::bit_cast<Bits>(x) & mask) == mask);
  if (bad) throw NumericError(std::string("non-finite value produced by ") + op);
}

// Builds an op output. The backward closure is only retained when the graph
// is being recorded and some input needs a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  check_finite(values, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  node->is_leaf = false;
  bool needs = false;
  if (grad_mode()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
inline T madd(T a, T b, T c) {
#ifdef __FMA__
  return std::fma(a, b, c);
#else
  return a * b + c;
#endif
}

// C[m x n] += A[m x k] * B[k x n]. Each output element accumulates over k in
// ascending order, so a row's result never depends on the other rows.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  // Every c[i][j] is updated as c = madd(a[i][p], b[p][j], c) for p = 0, 1, ...
  // on all paths, so a row's result never depends on m or on its position.
  constexpr std::size_t NR = 128 / sizeof(T);
  auto block = [&]<std::size_t MR>(std::size_t i, std::size_t j) {
    T acc[MR][NR];
    for (std::size_t r = 0; r < MR; ++r)
      for (std::size_t jj = 0; jj < NR; ++jj) acc[r][jj] = c[(i + r) * n + j + jj];
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n + j;
      for (std::size_t r = 0; r < MR; ++r) {
        const T av = a[(i + r) * k + p];
        for (std::size_t jj = 0; jj < NR; ++jj) acc[r][jj] = madd(av, brow[jj], acc[r][jj]);
      }
    }
    for (std::size_t r = 0; r < MR; ++r)
      for (std::size_t jj = 0; jj < NR; ++jj) c[(i + r) * n + j + jj] = acc[r][jj];
  };
  const std::size_t n_full = n / NR * NR;
  std::size_t i = 0;
  for (; i + 8 <= m; i += 8)
    for (std::size_t j = 0; j < n_full; j += NR) block.template operator()<8>(i, j);
  for (; i < m; ++i)
    for (std::size_t j = 0; j < n_full; j += NR) block.template operator()<1>(i, j);
  if (n_full == n) return;
  for (std::size_t r = 0; r < m; ++r) {
    T* crow = c + r * n;
    const T* arow = a + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = n_full; j < n; ++j) crow[j] = madd(av, brow[j], crow[j]);
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  }
  return t;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {an, bn},
                                [an, bn, m, k, n](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                    const auto bt = detail::transposed(bn->value.data(), k, n);
                                    detail::gemm_acc(self.grad.data(), bt.data(),
                                                     an->ensure_grad().data(), m, n, k);
                                  }
                                  if (bn->requires_grad) {
                                    const auto at = detail::transposed(an->value.data(), m, k);
                                    detail::gemm_acc(at.data(), self.grad.data(),
                                                     bn->ensure_grad().data(), k, m, n);
                                  }
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.shape().size() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  auto xn = x.node();
  return detail::make_result<T>("transpose", {c, r}, detail::transposed(x.data().data(), r, c), {xn},
                                [xn, r, c](detail::Node<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < c; ++i)
                                    for (std::size_t j = 0; j < r; ++j) g[j * c + i] += self.grad[i * r + j];
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("add", a.shape(), std::move(out), {an, bn},
                                [an, bn](detail::Node<T>& self) {
                                  for (auto* p : {an.get(), bn.get()}) {
                                    if (!p->requires_grad) continue;
                                    auto& g = p->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("sub", a.shape(), std::move(out), {an, bn},
                                [an, bn](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                    auto& g = an->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                    auto& g = bn->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("mul", a.shape(), std::move(out), {an, bn},
                                [an, bn](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                    auto& g = an->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * bn->value[i];
                                  }
                                  if (bn->requires_grad) {
                                    auto& g = bn->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * an->value[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto xn = x.node();
  return detail::make_result<T>("scale", x.shape(), std::move(out), {xn},
                                [xn, factor](detail::Node<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i] * factor;
                                });
}

// Row-wise bias add: x[... x n] + bias[n].
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = x.cols();
  if (bias.numel() != n) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match width " +
                     std::to_string(n));
  }
  const std::size_t rows = x.rows();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] + bias[c];
  }
  auto xn = x.node(), bn = bias.node();
  return detail::make_result<T>("add_bias", x.shape(), std::move(out), {xn, bn},
                                [xn, bn, rows, n](detail::Node<T>& self) {
                                  if (xn->requires_grad) {
                                    auto& g = xn->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                    auto& g = bn->ensure_grad();
                                    for (std::size_t r = 0; r < rows; ++r) {
                                      for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add_bias(matmul(x, weight), bias);
}

inline constexpr double kGeluCoeff = 0.7978845608;  // sqrt(2/pi)

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T c = static_cast<T>(kGeluCoeff);
  const T a = static_cast<T>(0.044715);
  std::vector<T> out(x.numel()), th(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    // tanh(u) = 1 - 2 / (exp(2u) + 1); saturates correctly when exp overflows.
    th[i] = T(1) - T(2) / (std::exp(T(2) * c * (v + a * v * v * v)) + T(1));
    out[i] = T(0.5) * v * (T(1) + th[i]);
  }
  auto xn = x.node();
  return detail::make_result<T>("gelu", x.shape(), std::move(out), {xn},
                                [xn, c, a, th = std::move(th)](detail::Node<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const T v = xn->value[i];
                                    const T t = th[i];
                                    const T d = T(0.5) * (T(1) + t) +
                                                T(0.5) * v * (T(1) - t * t) * c *
                                                    (T(1) + T(3) * a * v * v);
                                    g[i] += self.grad[i] * d;
                                  }
                                });
}

namespace detail {

template <typename T>
void softmax_row(const T* in, T* out, std::size_t n) {
  T mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  T sum = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}

}  // namespace detail

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t n = x.cols(), rows = x.rows();
  detail::check_finite(x.data(), "softmax_lastdim input");
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(x.data().data() + r * n, out.data() + r * n, n);
  auto xn = x.node();
  return detail::make_result<T>("softmax_lastdim", x.shape(), std::move(out), {xn},
                                [xn, rows, n](detail::Node<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  const auto& y = self.value;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    T dot = T(0);
                                    for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * y[r * n + j];
                                    for (std::size_t j = 0; j < n; ++j)
                                      g[r * n + j] += y[r * n + j] * (self.grad[r * n + j] - dot);
                                  }
                                });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(1e-5)) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine width mismatch");
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mean) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](detail::Node<T>& self) {
        const auto& dy = self.grad;
        if (gn->requires_grad || bn->requires_grad) {
          auto* gg = gn->requires_grad ? &gn->ensure_grad() : nullptr;
          auto* gb = bn->requires_grad ? &bn->ensure_grad() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              if (gg) (*gg)[j] += dy[r * d + j] * xhat[r * d + j];
              if (gb) (*gb)[j] += dy[r * d + j];
            }
          }
        }
        if (xn->requires_grad) {
          auto& gx = xn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = dy[r * d + j] * gn->value[j];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat[r * d + j];
            }
            mean_dxhat /= static_cast<T>(d);
            mean_dxhat_xhat /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = dy[r * d + j] * gn->value[j];
              gx[r * d + j] += rstd[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
            }
          }
        }
      });
}

/// Mean over rows of -log softmax(logits[t])[targets[t]].
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::span<const int> targets) {
  const std::size_t v = logits.cols(), t = logits.rows();
  if (targets.size() != t) {
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(t) + " rows");
  }
  for (const int id : targets) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::out_of_range("cross_entropy_logits: target id " + std::to_string(id) +
                              " outside [0," + std::to_string(v) + ")");
    }
  }
  std::vector<T> probs(logits.numel());
  T loss = T(0);
  for (std::size_t r = 0; r < t; ++r) {
    const T* row = logits.data().data() + r * v;
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    const T lse = mx + std::log(sum);
    loss += lse - row[targets[r]];
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<T>(t);
  auto ln = logits.node();
  std::vector<int> tg(targets.begin(), targets.end());
  return detail::make_result<T>("cross_entropy_logits", {1}, {loss}, {ln},
                                [ln, probs = std::move(probs), tg = std::move(tg), t, v](detail::Node<T>& self) {
                                  auto& g = ln->ensure_grad();
                                  const T s = self.grad[0] / static_cast<T>(t);
                                  for (std::size_t r = 0; r < t; ++r) {
                                    for (std::size_t j = 0; j < v; ++j) {
                                      const T onehot = static_cast<int>(j) == tg[r] ? T(1) : T(0);
                                      g[r * v + j] += s * (probs[r * v + j] - onehot);
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (const T v : x.data()) s += v;
  auto xn = x.node();
  return detail::make_result<T>("sum", {1}, {s}, {xn}, [xn](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  T s = T(0);
  for (const T v : x.data()) s += v * v;
  auto xn = x.node();
  return detail::make_result<T>("sum_squares", {1}, {s}, {xn}, [xn](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * xn->value[i] * self.grad[0];
  });
}

// Mean squared error against a constant target.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, std::span<const std::type_identity_t<T>> target) {
  if (target.size() != pred.numel()) throw ShapeError("mse: target size mismatch");
  const std::size_t n = pred.numel();
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  s /= static_cast<T>(n);
  auto pn = pred.node();
  std::vector<T> tg(target.begin(), target.end());
  return detail::make_result<T>("mse", {1}, {s}, {pn}, [pn, tg = std::move(tg), n](detail::Node<T>& self) {
    auto& g = pn->ensure_grad();
    const T k = T(2) * self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += k * (pn->value[i] - tg[i]);
  });
}

// Stacks 2-D tensors vertically (all share the column count).
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(rows * n);
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    nodes.push_back(p.node());
  }
  return detail::make_result<T>("concat_rows", {rows, n}, std::move(out), nodes,
                                [nodes](detail::Node<T>& self) {
                                  std::size_t off = 0;
                                  for (const auto& p : nodes) {
                                    const std::size_t len = p->value.size();
                                    if (p->requires_grad) {
                                      auto& g = p->ensure_grad();
                                      for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
                                    }
                                    off += len;
                                  }
                                });
}

// Joins 2-D tensors along the channel (column) dimension.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<T> out(rows * total);
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.data().begin() + r * w, w, out.begin() + r * total + off);
    }
    off += w;
    nodes.push_back(p.node());
  }
  return detail::make_result<T>("concat_cols", {rows, total}, std::move(out), nodes,
                                [nodes, rows, total](detail::Node<T>& self) {
                                  std::size_t off = 0;
                                  for (const auto& p : nodes) {
                                    const std::size_t w = p->shape.back();
                                    if (p->requires_grad) {
                                      auto& g = p->ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                        for (std::size_t c = 0; c < w; ++c)
                                          g[r * w + c] += self.grad[r * total + off + c];
                                      }
                                    }
                                    off += w;
                                  }
                                });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t n = x.cols();
  if (count == 0 || begin + count > x.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") outside " + std::to_string(x.rows()) + " rows");
  }
  std::vector<T> out(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n);
  auto xn = x.node();
  return detail::make_result<T>("slice_rows", {count, n}, std::move(out), {xn},
                                [xn, begin, n](detail::Node<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
                                });
}

// Gathers rows of table[V x d] by id.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  const std::size_t v = table.rows(), d = table.cols();
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside [0," + std::to_string(v) + ")");
    }
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::make_result<T>("embedding", {ids.size(), d}, std::move(out), {tn},
                                [tn, idv = std::move(idv), d](detail::Node<T>& self) {
                                  auto& g = tn->ensure_grad();
                                  for (std::size_t i = 0; i < idv.size(); ++i) {
                                    for (std::size_t c = 0; c < d; ++c) g[idv[i] * d + c] += self.grad[i * d + c];
                                  }
                                });
}

/// Head-averaged attention probabilities captured during a forward pass.
template <typename T>
struct AttentionCapture {
  std::size_t query_rows = 0;
  std::size_t key_rows = 0;
  std::vector<T> probs;  // query_rows x key_rows
};

/// Fused multi-head scaled dot-product attention.
///
/// q: [Tq x d], k/v: [Tk x d]. With `causal`, query row i sits at absolute
/// position (Tk - Tq + i) and sees keys 0..that position; this covers both a
/// full causal pass (Tq == Tk) and incremental decoding against a cache.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               bool causal, AttentionCapture<T>* capture = nullptr) {
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != tk) throw ShapeError("attention: q/k/v shape mismatch");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (causal && tq > tk) throw ShapeError("attention: more queries than keys in causal mode");
  const std::size_t dh = d / heads;
  const std::size_t offset = tk - tq;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  auto visible = [&](std::size_t i) { return causal ? offset + i + 1 : tk; };

  std::vector<T> out(tq * d, T(0));
  std::vector<T> probs(heads * tq * tk, T(0));
  std::vector<T> qh(tq * dh), kt(dh * tk), vh(tk * dh), scores(tq * tk), oh(tq * dh);
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) std::copy_n(qd + i * d + h * dh, dh, qh.begin() + i * dh);
    for (std::size_t j = 0; j < tk; ++j) {
      for (std::size_t c = 0; c < dh; ++c) kt[c * tk + j] = kd[j * d + h * dh + c];
      std::copy_n(vd + j * d + h * dh, dh, vh.begin() + j * dh);
    }
    std::fill(scores.begin(), scores.end(), T(0));
    detail::gemm_acc(qh.data(), kt.data(), scores.data(), tq, dh, tk);
    T* ph = probs.data() + h * tq * tk;
    for (std::size_t i = 0; i < tq; ++i) {
      const std::size_t n = visible(i);
      for (std::size_t j = 0; j < n; ++j) scores[i * tk + j] *= scl;
      detail::softmax_row(scores.data() + i * tk, ph + i * tk, n);
    }
    std::fill(oh.begin(), oh.end(), T(0));
    detail::gemm_acc(ph, vh.data(), oh.data(), tq, tk, dh);
    for (std::size_t i = 0; i < tq; ++i) std::copy_n(oh.begin() + i * dh, dh, out.begin() + i * d + h * dh);
  }
  if (capture) {
    capture->query_rows = tq;
    capture->key_rows = tk;
    capture->probs.assign(tq * tk, T(0));
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tq * tk; ++i) capture->probs[i] += probs[h * tq * tk + i];
    }
    for (auto& p : capture->probs) p /= static_cast<T>(heads);
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  return detail::make_result<T>(
      "multi_head_attention", {tq, d}, std::move(out), {qn, kn, vn},
      [qn, kn, vn, probs = std::move(probs), tq, tk, d, dh, heads, scl](detail::Node<T>& self) {
        std::vector<T> doh(tq * dh), vt(dh * tk), dp(tq * tk), kh(tk * dh), qh(tq * dh), pt(tk * tq),
            dst(tk * tq), buf_q(tq * dh), buf_k(tk * dh), buf_v(tk * dh);
        for (std::size_t h = 0; h < heads; ++h) {
          const T* ph = probs.data() + h * tq * tk;
          for (std::size_t i = 0; i < tq; ++i) {
            std::copy_n(self.grad.begin() + i * d + h * dh, dh, doh.begin() + i * dh);
            std::copy_n(qn->value.begin() + i * d + h * dh, dh, qh.begin() + i * dh);
          }
          for (std::size_t j = 0; j < tk; ++j) {
            std::copy_n(kn->value.begin() + j * d + h * dh, dh, kh.begin() + j * dh);
            for (std::size_t c = 0; c < dh; ++c) vt[c * tk + j] = vn->value[j * d + h * dh + c];
          }
          if (vn->requires_grad) {
            for (std::size_t i = 0; i < tq; ++i)
              for (std::size_t j = 0; j < tk; ++j) pt[j * tq + i] = ph[i * tk + j];
            std::fill(buf_v.begin(), buf_v.end(), T(0));
            detail::gemm_acc(pt.data(), doh.data(), buf_v.data(), tk, tq, dh);
            auto& gv = vn->ensure_grad();
            for (std::size_t j = 0; j < tk; ++j)
              for (std::size_t c = 0; c < dh; ++c) gv[j * d + h * dh + c] += buf_v[j * dh + c];
          }
          if (!qn->requires_grad && !kn->requires_grad) continue;
          std::fill(dp.begin(), dp.end(), T(0));
          detail::gemm_acc(doh.data(), vt.data(), dp.data(), tq, dh, tk);
          // dS = P * (dP - rowdot(dP, P)) * scale; masked entries have P == 0.
          for (std::size_t i = 0; i < tq; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < tk; ++j) dot += dp[i * tk + j] * ph[i * tk + j];
            for (std::size_t j = 0; j < tk; ++j) dp[i * tk + j] = ph[i * tk + j] * (dp[i * tk + j] - dot) * scl;
          }
          if (qn->requires_grad) {
            std::fill(buf_q.begin(), buf_q.end(), T(0));
            detail::gemm_acc(dp.data(), kh.data(), buf_q.data(), tq, tk, dh);
            auto& gq = qn->ensure_grad();
            for (std::size_t i = 0; i < tq; ++i)
              for (std::size_t c = 0; c < dh; ++c) gq[i * d + h * dh + c] += buf_q[i * dh + c];
          }
          if (kn->requires_grad) {
            for (std::size_t i = 0; i < tq; ++i)
              for (std::size_t j = 0; j < tk; ++j) dst[j * tq + i] = dp[i * tk + j];
            std::fill(buf_k.begin(), buf_k.end(), T(0));
            detail::gemm_acc(dst.data(), qh.data(), buf_k.data(), tk, tq, dh);
            auto& gk = kn->ensure_grad();
            for (std::size_t j = 0; j < tk; ++j)
              for (std::size_t c = 0; c < dh; ++c) gk[j * d + h * dh + c] += buf_k[j * dh + c];
          }
        }
      });
}

/// Populates gradients on every requires_grad leaf reachable from `loss`.
///
/// Leaves must start without a gradient: a second backward pass before
/// zero_grad() throws instead of silently accumulating.
template <typename T>
void backward(const Tensor<T>& loss) {
  using NodeT = detail::Node<T>;
  if (loss.numel() != 1) throw GradientError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw GradientError("backward: loss does not depend on any tracked tensor");

  std::vector<NodeT*> order;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  std::vector<NodeT*> in_progress;
  // 0 = unvisited, 1 = on stack, 2 = done; kept in a side table keyed by node.
  std::unordered_map<NodeT*, int> state;
  stack.emplace_back(loss.node().get(), 0);
  state[loss.node().get()] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* p = node->parents[next++].get();
      if (!p->requires_grad) continue;
      int& s = state[p];
      if (s == 1) throw GradientError("backward: cycle in recorded computation");
      if (s == 0) {
        s = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      state[node] = 2;
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (NodeT* n : order) {
    if (n->is_leaf && !n->grad.empty()) {
      throw GradientError("backward: gradient already populated; call zero_grad() before another pass");
    }
  }
  loss.node()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (NodeT* n : order) {
    if (!n->is_leaf) std::vector<T>().swap(n->grad);
  }
}

/// Central finite differences of a scalar function, one coordinate at a time.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T epsilon = static_cast<T>(1e-5)) {
  if (!(epsilon > T(0))) throw std::invalid_argument("finite_diff_grad: epsilon must be positive");
  NoGradGuard guard;
  std::vector<T> base(x.data());
  std::vector<T> g(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<T> plus = base, minus = base;
    plus[i] += epsilon;
    minus[i] -= epsilon;
    const T fp = static_cast<T>(f(Tensor<T>(x.shape(), std::move(plus))));
    const T fm = static_cast<T>(f(Tensor<T>(x.shape(), std::move(minus))));
    g[i] = (fp - fm) / (T(2) * epsilon);
  }
  return Tensor<T>(x.shape(), std::move(g));
}

}  // namespace ser
