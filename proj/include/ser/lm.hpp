#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ser/nn.hpp"
#include "ser/tensor.hpp"

namespace ser {

struct LmConfig {
  std::size_t vocab_size = 0;  // filled from the vocabulary
  std::size_t d_lm = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t max_seq = 112;
  std::size_t ffn_mult = 4;

  void validate() const {
    if (heads == 0 || d_lm % heads != 0) throw std::invalid_argument("lm: d_lm must be divisible by heads");
    if (vocab_size == 0) throw std::invalid_argument("lm: empty vocabulary");
  }
};

class SequenceOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Token string <-> id bijection with the task/control tokens first.
class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kCaptionTask = 2;
  static constexpr int kRefineTask = 3;
  static constexpr int kSep = 4;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const char* s : {"<bos>", "<eos>", "<caption>", "<refine>", "<sep>"}) push(s);
    for (const auto& w : words) push(w);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw std::out_of_range("vocabulary: unknown token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }
  int id(const std::string& word) const {
    const auto it = ids_.find(word);
    if (it == ids_.end()) throw std::out_of_range("vocabulary: unknown word '" + word + "'");
    return it->second;
  }
  bool contains(const std::string& word) const { return ids_.contains(word); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }
  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    for (const int i : ids) out.push_back(token(i));
    return out;
  }

 private:
  void push(const std::string& w) {
    if (ids_.contains(w)) throw std::invalid_argument("vocabulary: duplicate token '" + w + "'");
    ids_.emplace(w, static_cast<int>(tokens_.size()));
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

/// Per-layer key/value rows of one decode; grows append-only.
template <typename T>
struct KVCache {
  std::vector<KVLayer<T>> layers;
  std::size_t length() const { return layers.empty() ? 0 : layers.front().length(); }
};

/// Decoder-only LM over [visual prefix || token embeddings] with a full
/// causal mask and an output head tied to the token embedding.
template <typename T>
class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(const LmConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    token_embedding_ = normal_param<T>({cfg.vocab_size, cfg.d_lm}, rng);
    positions_ = normal_param<T>({cfg.max_seq, cfg.d_lm}, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) blocks_.emplace_back(cfg.d_lm, cfg.heads, cfg.ffn_mult, rng);
    final_norm_ = LayerNorm<T>(cfg.d_lm);
  }

  const LmConfig& config() const { return cfg_; }
  const Tensor<T>& token_embedding() const { return token_embedding_; }

  Tensor<T> embed(std::span<const int> ids) const { return embedding<T>(token_embedding_, ids); }

  /// Runs the stack over the new rows [prefix || tokens] and returns logits
  /// for the token rows. With a cache, the rows continue the cached sequence.
  /// Either part may be empty, not both.
  Tensor<T> forward(const Tensor<T>& prefix, std::span<const int> tokens, KVCache<T>* cache = nullptr,
                    AttentionCapture<T>* final_capture = nullptr) const {
    const std::size_t prefix_rows = prefix.defined() ? prefix.rows() : 0;
    const std::size_t start = cache ? cache->length() : 0;
    const std::size_t n = prefix_rows + tokens.size();
    if (n == 0) throw std::invalid_argument("lm_forward: nothing to run");
    if (start + n > cfg_.max_seq) {
      throw SequenceOverflow("lm_forward: sequence of " + std::to_string(start + n) + " exceeds max_seq " +
                             std::to_string(cfg_.max_seq));
    }
    if (prefix_rows && prefix.cols() != cfg_.d_lm) throw ShapeError("lm_forward: prefix width mismatch");
    for (const int id : tokens) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
        throw std::out_of_range("lm_forward: unknown token id " + std::to_string(id));
    }

    Tensor<T> x;
    if (prefix_rows && !tokens.empty()) x = concat_rows<T>({prefix, embed(tokens)});
    else if (prefix_rows) x = prefix;
    else x = embed(tokens);
    std::vector<int> pos(n);
    std::iota(pos.begin(), pos.end(), static_cast<int>(start));
    x = add(x, embedding<T>(positions_, pos));

    if (cache && cache->layers.empty()) cache->layers.resize(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      x = blocks_[l].forward(x, /*causal=*/true, cache ? &cache->layers[l] : nullptr,
                             l + 1 == blocks_.size() ? final_capture : nullptr);
    }
    if (tokens.empty()) return {};
    const Tensor<T> text = prefix_rows ? slice_rows(x, prefix_rows, tokens.size()) : x;
    return matmul(final_norm_(text), transpose(token_embedding_));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".token_embedding", token_embedding_});
    out.push_back({prefix + ".positions", positions_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".blocks." + std::to_string(i + 1), out);
    final_norm_.collect(prefix + ".final_norm", out);
  }

 private:
  LmConfig cfg_;
  Tensor<T> token_embedding_;
  Tensor<T> positions_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> final_norm_;
};

// Lowest id wins ties.
template <typename T>
int argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  const T* r = logits.data().data() + row * v;
  std::size_t best = 0;
  for (std::size_t j = 1; j < v; ++j) {
    if (r[j] > r[best]) best = j;
  }
  return static_cast<int>(best);
}

/// Greedy decoding; stops at EOS (not emitted) or after max_new tokens.
template <typename T>
std::vector<int> decode_greedy(const LanguageModel<T>& lm, const Tensor<T>& prefix, const std::vector<int>& prompt,
                               std::size_t max_new, bool use_cache) {
  const std::size_t prefix_rows = prefix.defined() ? prefix.rows() : 0;
  if (prompt.empty()) throw std::invalid_argument("decode_greedy: empty prompt");
  if (prefix_rows + prompt.size() + max_new > lm.config().max_seq) {
    throw SequenceOverflow("decode_greedy: budget " + std::to_string(prefix_rows + prompt.size() + max_new) +
                           " exceeds max_seq " + std::to_string(lm.config().max_seq));
  }
  NoGradGuard no_grad;
  std::vector<int> out;
  if (max_new == 0) return out;
  if (use_cache) {
    KVCache<T> cache;
    Tensor<T> logits = lm.forward(prefix, prompt, &cache);
    int next = argmax_row(logits, logits.rows() - 1);
    while (next != Vocabulary::kEos) {
      out.push_back(next);
      if (out.size() == max_new) break;
      const int tok[1] = {next};
      logits = lm.forward(Tensor<T>{}, tok, &cache);
      next = argmax_row(logits, 0);
    }
  } else {
    std::vector<int> seq = prompt;
    while (out.size() < max_new) {
      const Tensor<T> logits = lm.forward(prefix, seq);
      const int next = argmax_row(logits, logits.rows() - 1);
      if (next == Vocabulary::kEos) break;
      out.push_back(next);
      seq.push_back(next);
    }
  }
  return out;
}

/// Temperature sampling (not used by the deterministic pipeline).
template <typename T>
std::vector<int> decode_sample(const LanguageModel<T>& lm, const Tensor<T>& prefix, const std::vector<int>& prompt,
                               std::size_t max_new, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw std::invalid_argument("decode_sample: temperature must be positive");
  NoGradGuard no_grad;
  KVCache<T> cache;
  std::vector<int> out;
  Tensor<T> logits = lm.forward(prefix, prompt, &cache);
  while (out.size() < max_new) {
    const std::size_t v = logits.cols();
    const T* row = logits.data().data() + (logits.rows() - 1) * v;
    std::vector<double> p(v);
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max<double>(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += p[j] = std::exp((row[j] - mx) / temperature);
    double u = rng.uniform() * total;
    int next = static_cast<int>(v - 1);
    for (std::size_t j = 0; j < v; ++j) {
      if ((u -= p[j]) < 0.0) {
        next = static_cast<int>(j);
        break;
      }
    }
    if (next == Vocabulary::kEos) break;
    out.push_back(next);
    const int tok[1] = {next};
    logits = lm.forward(Tensor<T>{}, tok, &cache);
  }
  return out;
}

/// Teacher-forced sum of log-probabilities of `continuation` after `context`.
template <typename T>
double sequence_logprob(const LanguageModel<T>& lm, const Tensor<T>& prefix, const std::vector<int>& context,
                        const std::vector<int>& continuation) {
  if (context.empty()) throw std::invalid_argument("sequence_logprob: context must hold at least one token");
  if (continuation.empty()) return 0.0;
  NoGradGuard no_grad;
  std::vector<int> seq = context;
  seq.insert(seq.end(), continuation.begin(), continuation.end() - 1);
  const Tensor<T> logits = lm.forward(prefix, seq);
  const std::size_t v = logits.cols();
  double total = 0.0;
  for (std::size_t j = 0; j < continuation.size(); ++j) {
    const T* row = logits.data().data() + (context.size() - 1 + j) * v;
    double mx = row[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max<double>(mx, row[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < v; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
    total += static_cast<double>(row[continuation[j]]) - mx - std::log(s);
  }
  return total;
}

}  // namespace ser
