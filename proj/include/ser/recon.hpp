#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ser/nn.hpp"
#include "ser/vision.hpp"

namespace ser {

struct ReconConfig {
  std::size_t d_dec = 64;
  std::size_t blocks = 1;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
};

/// MAE-style pixel decoder: per-token input projection, learned positions,
/// a few bidirectional blocks, then a linear head to patch pixels.
template <typename T>
class ReconDecoder {
 public:
  ReconDecoder() = default;
  ReconDecoder(std::size_t d_in, const ReconConfig& cfg, const VisionConfig& vcfg, Rng& rng) {
    in_proj_ = Linear<T>(d_in, cfg.d_dec, rng);
    positions_ = normal_param<T>({vcfg.num_patches(), cfg.d_dec}, rng);
    for (std::size_t i = 0; i < cfg.blocks; ++i) blocks_.emplace_back(cfg.d_dec, cfg.heads, cfg.ffn_mult, rng);
    norm_ = LayerNorm<T>(cfg.d_dec);
    head_ = Linear<T>(cfg.d_dec, vcfg.patch_dim(), rng);
  }

  std::size_t in_width() const { return in_proj_.in(); }

  // features: [N_v x d_in] -> predicted patches [N_v x patch_dim]
  Tensor<T> operator()(const Tensor<T>& features) const {
    Tensor<T> x = add(in_proj_(features), positions_);
    for (const auto& b : blocks_) x = b.forward(x, /*causal=*/false);
    return head_(norm_(x));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    in_proj_.collect(prefix + ".in_proj", out);
    out.push_back({prefix + ".positions", positions_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".blocks." + std::to_string(i + 1), out);
    norm_.collect(prefix + ".norm", out);
    head_.collect(prefix + ".head", out);
  }

 private:
  Linear<T> in_proj_;
  Tensor<T> positions_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> norm_;
  Linear<T> head_;
};

}  // namespace ser
