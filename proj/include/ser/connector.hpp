#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ser/nn.hpp"
#include "ser/vision.hpp"

namespace ser {

/// Baseline projector: four affine layers d_v -> d_lm with GELU between.
template <typename T>
class MlpConnector {
 public:
  static constexpr std::size_t kLayers = 4;

  MlpConnector() = default;
  MlpConnector(std::size_t d_v, std::size_t d_lm, Rng& rng) {
    layers_.emplace_back(d_v, d_lm, rng);
    for (std::size_t i = 1; i < kLayers; ++i) layers_.emplace_back(d_lm, d_lm, rng);
  }

  Tensor<T> operator()(const Tensor<T>& features) const {
    if (features.cols() != layers_.front().in()) {
      throw ShapeError("mlp_connect: feature width " + std::to_string(features.cols()) + ", expected " +
                       std::to_string(layers_.front().in()));
    }
    Tensor<T> x = layers_[0](features);
    for (std::size_t i = 1; i < kLayers; ++i) x = layers_[i](gelu(x));
    return x;
  }

  std::size_t out_width() const { return layers_.back().out(); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".fc" + std::to_string(i + 1), out);
  }

 private:
  std::vector<Linear<T>> layers_;
};

struct DeepLensConfig {
  std::vector<Fraction> tap_fractions = default_tap_fractions();
  std::size_t fusion_blocks = 2;
  std::size_t t_max = 20;  // longest caption the fusion stack accepts
};

inline std::vector<std::size_t> canonical_taps(std::vector<std::size_t> taps) {
  std::sort(taps.begin(), taps.end());
  taps.erase(std::unique(taps.begin(), taps.end()), taps.end());
  return taps;
}

/// Refinement connector. Tapped block features are concatenated along
/// channels, projected to the LM width, joined with caption embeddings and
/// fused by bidirectional encoder blocks; only the visual rows are returned.
template <typename T>
class DeepLens {
 public:
  DeepLens() = default;
  DeepLens(std::vector<std::size_t> taps, std::size_t d_v, std::size_t d_lm, std::size_t num_patches,
           std::size_t t_max, std::size_t fusion_blocks, std::size_t heads, std::size_t ffn_mult, Rng& rng)
      : taps_(canonical_taps(std::move(taps))), num_patches_(num_patches), t_max_(t_max) {
    if (taps_.empty()) throw std::invalid_argument("deeplens: empty tap set");
    if (taps_.front() == 0) throw std::invalid_argument("deeplens: taps are 1-based");
    projection_ = Linear<T>(taps_.size() * d_v, d_lm, rng);
    positions_ = normal_param<T>({num_patches + t_max, d_lm}, rng);
    segments_ = normal_param<T>({2, d_lm}, rng);
    for (std::size_t i = 0; i < fusion_blocks; ++i) blocks_.emplace_back(d_lm, heads, ffn_mult, rng);
  }

  const std::vector<std::size_t>& taps() const { return taps_; }
  std::size_t t_max() const { return t_max_; }

  Tensor<T> operator()(const VisionFeatureSet<T>& features, const Tensor<T>& caption_embeddings) const {
    return forward(features, taps_, caption_embeddings);
  }

  /// `caption_embeddings` may be undefined for the caption-free (T = 0) mode.
  Tensor<T> forward(const VisionFeatureSet<T>& features, std::vector<std::size_t> taps,
                    const Tensor<T>& caption_embeddings) const {
    taps = canonical_taps(std::move(taps));
    if (taps.empty()) throw std::invalid_argument("deeplens: empty tap set");
    if (taps.size() != taps_.size()) {
      throw std::invalid_argument("deeplens: " + std::to_string(taps.size()) + " taps given, projection expects " +
                                  std::to_string(taps_.size()));
    }
    std::vector<Tensor<T>> tapped;
    for (const std::size_t t : taps) {
      if (t == 0 || t > features.blocks()) throw std::invalid_argument("deeplens: tap " + std::to_string(t) + " invalid");
      tapped.push_back(features.block(t));
    }
    const Tensor<T> visual = projection_(tapped.size() == 1 ? tapped.front() : concat_cols(tapped));
    if (visual.rows() != num_patches_) throw ShapeError("deeplens: patch count mismatch");

    const std::size_t text_rows = caption_embeddings.defined() ? caption_embeddings.rows() : 0;
    if (text_rows > t_max_) {
      throw std::invalid_argument("deeplens: caption of " + std::to_string(text_rows) + " tokens exceeds t_max " +
                                  std::to_string(t_max_));
    }
    Tensor<T> x = text_rows ? concat_rows<T>({visual, caption_embeddings}) : visual;
    const std::size_t n = num_patches_ + text_rows;
    std::vector<int> pos_ids(n), seg_ids(n, 0);
    std::iota(pos_ids.begin(), pos_ids.end(), 0);
    std::fill(seg_ids.begin() + static_cast<std::ptrdiff_t>(num_patches_), seg_ids.end(), 1);
    x = add(add(x, embedding<T>(positions_, pos_ids)), embedding<T>(segments_, seg_ids));
    for (const auto& b : blocks_) x = b.forward(x, /*causal=*/false);
    return text_rows ? slice_rows(x, 0, num_patches_) : x;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    projection_.collect(prefix + ".channel_projection", out);
    out.push_back({prefix + ".positions", positions_});
    out.push_back({prefix + ".segments", segments_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".fusion." + std::to_string(i + 1), out);
  }

 private:
  std::vector<std::size_t> taps_;
  std::size_t num_patches_ = 0;
  std::size_t t_max_ = 0;
  Linear<T> projection_;
  Tensor<T> positions_;
  Tensor<T> segments_;
  std::vector<TransformerBlock<T>> blocks_;
};

}  // namespace ser
