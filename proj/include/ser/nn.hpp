#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ser/rng.hpp"
#include "ser/tensor.hpp"

namespace ser {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

inline constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> normal_param(Shape shape, Rng& rng, double stddev = kInitStd) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(normal_param<T>({in, out}, rng)), bias(Tensor<T>::zeros({out}, true)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  std::size_t in() const { return weight.shape()[0]; }
  std::size_t out() const { return weight.shape()[1]; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gamma(Tensor<T>::filled({d}, T(1), true)), beta(Tensor<T>::zeros({d}, true)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

// Append-only key/value rows for one attention layer.
template <typename T>
struct KVLayer {
  Tensor<T> keys;
  Tensor<T> values;
  std::size_t length() const { return keys.defined() ? keys.rows() : 0; }
};

/// Pre-norm transformer block. The same block serves the vision encoder,
/// the fusion stack, the reconstruction decoder (bidirectional) and the
/// language model (causal).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  Linear<T> wq, wk, wv, wo;
  Linear<T> fc, proj;
  std::size_t heads = 1;

  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t heads_, std::size_t ffn_mult, Rng& rng)
      : ln1(d), ln2(d), wq(d, d, rng), wk(d, d, rng), wv(d, d, rng), wo(d, d, rng),
        fc(d, d * ffn_mult, rng), proj(d * ffn_mult, d, rng), heads(heads_) {}

  Tensor<T> forward(const Tensor<T>& x, bool causal, KVLayer<T>* cache = nullptr,
                    AttentionCapture<T>* capture = nullptr) const {
    const Tensor<T> h = ln1(x);
    Tensor<T> k = wk(h);
    Tensor<T> v = wv(h);
    if (cache) {
      if (cache->keys.defined()) {
        k = concat_rows<T>({cache->keys, k});
        v = concat_rows<T>({cache->values, v});
      }
      cache->keys = k;
      cache->values = v;
    }
    const Tensor<T> att = multi_head_attention(wq(h), k, v, heads, causal, capture);
    const Tensor<T> x1 = add(x, wo(att));
    return add(x1, proj(gelu(fc(ln2(x1)))));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    ln1.collect(prefix + ".ln1", out);
    wq.collect(prefix + ".attn.q", out);
    wk.collect(prefix + ".attn.k", out);
    wv.collect(prefix + ".attn.v", out);
    wo.collect(prefix + ".attn.o", out);
    ln2.collect(prefix + ".ln2", out);
    fc.collect(prefix + ".mlp.fc", out);
    proj.collect(prefix + ".mlp.proj", out);
  }
};

template <typename T>
void set_trainable(const ParamList<T>& params, bool on) {
  for (auto p : params) p.tensor.set_requires_grad(on);
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto p : params) p.tensor.zero_grad();
}

// Rows [begin, begin + count) of a row-major matrix as a detached tensor.
template <typename T>
Tensor<T> row_block(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t n = x.cols();
  return Tensor<T>({count, n}, std::vector<T>(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n));
}

}  // namespace ser
