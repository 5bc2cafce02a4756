#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ser/nn.hpp"
#include "ser/tensor.hpp"

namespace ser {

struct VisionConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t d_v = 64;
  std::size_t layers = 8;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
      throw std::invalid_argument("vision: image_size must be divisible by patch_size");
    if (heads == 0 || d_v % heads != 0) throw std::invalid_argument("vision: d_v must be divisible by heads");
    if (layers == 0) throw std::invalid_argument("vision: at least one block required");
  }
};

/// Square RGB image, row-major, channel-last, values in [0, 1].
struct Image {
  std::size_t size = 0;
  std::vector<float> pixels;  // size * size * 3

  Image() = default;
  explicit Image(std::size_t s, float fill = 1.0f) : size(s), pixels(s * s * 3, fill) {}

  float& at(std::size_t row, std::size_t col, std::size_t ch) { return pixels[(row * size + col) * 3 + ch]; }
  float at(std::size_t row, std::size_t col, std::size_t ch) const { return pixels[(row * size + col) * 3 + ch]; }
  bool operator==(const Image&) const = default;
};

/// Cuts an image into raster-ordered, non-overlapping patches, each flattened
/// channel-last (row, col, channel).
template <typename T>
Tensor<T> patchify(const Image& image, const VisionConfig& cfg) {
  if (image.size != cfg.image_size || image.pixels.size() != image.size * image.size * 3) {
    throw std::invalid_argument("patchify: expected " + std::to_string(cfg.image_size) + "x" +
                                std::to_string(cfg.image_size) + "x3 image, got size " + std::to_string(image.size));
  }
  for (const float v : image.pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("patchify: pixel value outside [0,1]");
  }
  const std::size_t p = cfg.patch_size, g = cfg.grid(), dim = cfg.patch_dim();
  std::vector<T> out(cfg.num_patches() * dim);
  for (std::size_t pr = 0; pr < g; ++pr) {
    for (std::size_t pc = 0; pc < g; ++pc) {
      T* dst = out.data() + (pr * g + pc) * dim;
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          for (std::size_t ch = 0; ch < 3; ++ch) {
            *dst++ = static_cast<T>(image.at(pr * p + y, pc * p + x, ch));
          }
        }
      }
    }
  }
  return Tensor<T>({cfg.num_patches(), dim}, std::move(out));
}

/// Inverse of patchify for a [N_v x patch_dim] matrix.
template <typename T>
Image unpatchify(std::span<const T> patches, const VisionConfig& cfg) {
  const std::size_t p = cfg.patch_size, g = cfg.grid(), dim = cfg.patch_dim();
  if (patches.size() != cfg.num_patches() * dim) throw std::invalid_argument("unpatchify: size mismatch");
  Image img(cfg.image_size, 0.0f);
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      const T* src = patches.data() + (pr * g + pc) * dim;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch) img.at(pr * p + y, pc * p + x, ch) = static_cast<float>(*src++);
    }
  return img;
}

/// Every block output of one image. Block indices are 1-based; block(L_v)
/// is the final encoder output.
template <typename T>
struct VisionFeatureSet {
  std::int64_t image_id = -1;
  std::vector<Tensor<T>> per_block;

  std::size_t blocks() const { return per_block.size(); }
  const Tensor<T>& block(std::size_t index) const {
    if (index == 0 || index > per_block.size()) {
      throw std::out_of_range("feature set: block " + std::to_string(index) + " outside 1.." +
                              std::to_string(per_block.size()));
    }
    return per_block[index - 1];
  }
  const Tensor<T>& last() const { return per_block.back(); }
};

struct Fraction {
  std::int64_t num = 1;
  std::int64_t den = 1;
  bool operator==(const Fraction&) const = default;
};

inline std::vector<Fraction> default_tap_fractions() { return {{13, 24}, {18, 24}, {23, 24}}; }

/// Tap indices ceil(L * f) for each fraction, sorted and deduplicated.
inline std::vector<std::size_t> select_taps(std::size_t layers, const std::vector<Fraction>& fractions) {
  std::set<std::size_t> taps;
  for (const auto& f : fractions) {
    if (f.den <= 0 || f.num <= 0 || f.num > f.den) {
      throw std::invalid_argument("select_taps: fraction " + std::to_string(f.num) + "/" + std::to_string(f.den) +
                                  " outside (0, 1]");
    }
    const auto l = static_cast<std::int64_t>(layers);
    taps.insert(static_cast<std::size_t>((l * f.num + f.den - 1) / f.den));
  }
  taps.erase(0);
  if (taps.empty()) throw std::invalid_argument("select_taps: empty tap set");
  return {taps.begin(), taps.end()};
}

struct EncoderCounters {
  std::atomic<std::uint64_t> encodes{0};
  std::atomic<std::uint64_t> block_forwards{0};
};

/// Toy ViT: linear patch embedding, learned absolute positions, pre-norm
/// blocks. No class token.
template <typename T>
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(const VisionConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    patch_embed_ = Linear<T>(cfg.patch_dim(), cfg.d_v, rng);
    positions_ = normal_param<T>({cfg.num_patches(), cfg.d_v}, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) blocks_.emplace_back(cfg.d_v, cfg.heads, cfg.ffn_mult, rng);
  }

  const VisionConfig& config() const { return cfg_; }

  VisionFeatureSet<T> encode(const Image& image, std::int64_t image_id = -1) const {
    counters_->encodes.fetch_add(1, std::memory_order_relaxed);
    VisionFeatureSet<T> out;
    out.image_id = image_id;
    Tensor<T> x = add(patch_embed_(patchify<T>(image, cfg_)), positions_);
    for (std::size_t i = 1; i <= blocks_.size(); ++i) {
      x = run_block(i, x);
      out.per_block.push_back(x);
    }
    return out;
  }

  // Runs block `index` (1-based) on its input.
  Tensor<T> run_block(std::size_t index, const Tensor<T>& x) const {
    counters_->block_forwards.fetch_add(1, std::memory_order_relaxed);
    return blocks_.at(index - 1).forward(x, /*causal=*/false);
  }

  const EncoderCounters& counters() const { return *counters_; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    patch_embed_.collect(prefix + ".patch_embed", out);
    out.push_back({prefix + ".positions", positions_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".blocks." + std::to_string(i + 1), out);
  }

 private:
  VisionConfig cfg_;
  Linear<T> patch_embed_;
  Tensor<T> positions_;
  std::vector<TransformerBlock<T>> blocks_;
  std::shared_ptr<EncoderCounters> counters_ = std::make_shared<EncoderCounters>();
};

}  // namespace ser
