#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ser/train.hpp"

namespace ser {

enum class Pass { Initial, Refine };

inline const char* pass_name(Pass p) { return p == Pass::Initial ? "initial" : "refine"; }

struct AttentionMap {
  std::vector<double> weights;  // one per patch, raster order
  std::size_t token_index = 0;
  Pass pass = Pass::Initial;
};

/// Head-averaged attention of the final LM block from the position that
/// generates caption[token_index], restricted to the visual prefix and
/// renormalized. For the refine pass, `refine_input` is the caption being
/// refined (defaults to `caption`).
template <typename T>
AttentionMap attention_map(const ModelBundle<T>& m, const VisionFeatureSet<T>& features, const std::vector<int>& caption,
                           std::size_t token_index, Pass pass, std::optional<std::vector<int>> refine_input = {}) {
  if (token_index >= caption.size()) {
    throw std::out_of_range("attention_map: token index " + std::to_string(token_index) + " outside caption of " +
                            std::to_string(caption.size()));
  }
  NoGradGuard no_grad;
  Tensor<T> prefix;
  std::vector<int> inputs;
  if (pass == Pass::Initial) {
    prefix = glance_prefix(m, features, GlanceMode::Mlp);
    inputs = caption_context();
  } else {
    const auto in = refine_input.value_or(caption);
    prefix = refine_prefix(m, features, in);
    inputs = refine_context(in);
  }
  const std::size_t context = inputs.size();
  inputs.insert(inputs.end(), caption.begin(), caption.begin() + static_cast<std::ptrdiff_t>(token_index));
  AttentionCapture<T> cap;
  m.lm.forward(prefix, inputs, nullptr, &cap);
  const std::size_t n_v = prefix.rows();
  const std::size_t row = n_v + context - 1 + token_index;
  AttentionMap map;
  map.token_index = token_index;
  map.pass = pass;
  double total = 0.0;
  for (std::size_t j = 0; j < n_v; ++j) total += static_cast<double>(cap.probs[row * cap.key_rows + j]);
  map.weights.resize(n_v);
  for (std::size_t j = 0; j < n_v; ++j)
    map.weights[j] = total > 0.0 ? static_cast<double>(cap.probs[row * cap.key_rows + j]) / total : 1.0 / n_v;
  return map;
}

/// Shannon entropy in nats; 0 ln 0 counts as 0.
inline double attention_entropy(const std::vector<double>& weights) {
  double h = 0.0;
  for (const double w : weights) {
    if (w < 0.0) throw std::invalid_argument("attention_entropy: negative weight");
    if (w > 0.0) h -= w * std::log(w);
  }
  return h;
}

inline double attention_entropy(const AttentionMap& map) { return attention_entropy(map.weights); }

/// Binary PGM (P5), one pixel per patch scaled so the largest weight is 255,
/// each patch magnified `zoom` times.
inline void write_pgm(const AttentionMap& map, std::size_t grid, const std::string& path, std::size_t zoom = 8) {
  if (map.weights.size() != grid * grid) throw std::invalid_argument("write_pgm: map does not fill the grid");
  double mx = 0.0;
  for (const double w : map.weights) mx = std::max(mx, w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "'");
  const std::size_t side = grid * zoom;
  out << "P5\n" << side << ' ' << side << "\n255\n";
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double w = map.weights[(y / zoom) * grid + x / zoom];
      out.put(static_cast<char>(static_cast<unsigned char>(mx > 0.0 ? std::lround(255.0 * w / mx) : 0)));
    }
  }
}

enum class FeatureMode { LastLayer, MultiLayer };

inline const char* feature_mode_name(FeatureMode m) { return m == FeatureMode::LastLayer ? "LF" : "MF"; }

struct ReconTrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  double warmup_ratio = 0.03;
};

template <typename T>
struct ReconProbe {
  FeatureMode mode = FeatureMode::LastLayer;
  std::vector<std::size_t> layers;  // block indices fed to the decoder
  ReconDecoder<T> decoder;
  double heldout_mse = 0.0;
  std::vector<double> epoch_losses;
};

template <typename T>
std::vector<std::size_t> probe_layers(const ModelBundle<T>& m, FeatureMode mode) {
  if (mode == FeatureMode::LastLayer) return {m.config.vision.layers};
  return select_taps(m.config.vision.layers, default_tap_fractions());
}

// Decoder input for one image: the last block, or the taps joined along channels.
template <typename T>
Tensor<T> probe_input(const VisionFeatureSet<T>& f, const std::vector<std::size_t>& layers) {
  if (layers.size() == 1) return f.block(layers.front());
  std::vector<Tensor<T>> parts;
  for (const auto l : layers) parts.push_back(f.block(l));
  return concat_cols(parts);
}

template <typename T>
std::vector<Tensor<T>> probe_inputs(const ModelBundle<T>& m, const std::vector<Image>& images,
                                    const std::vector<std::size_t>& layers) {
  NoGradGuard g;
  std::vector<Tensor<T>> out;
  for (const auto& img : images) out.push_back(probe_input(m.vision.encode(img), layers));
  return out;
}

/// Mean squared error per pixel and channel, averaged over images.
template <typename T>
double recon_mse(const ReconProbe<T>& probe, const ModelBundle<T>& m, const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("recon_mse: no images");
  NoGradGuard g;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& img : images) {
    const auto pred = probe.decoder(probe_input(m.vision.encode(img), probe.layers));
    const auto target = patchify<T>(img, m.config.vision);
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
      total += d * d;
    }
    count += pred.numel();
  }
  return total / static_cast<double>(count);
}

/// Trains a fresh pixel decoder on frozen features (last block or taps).
template <typename T>
ReconProbe<T> recon_train(FeatureMode mode, const ModelBundle<T>& m, const std::vector<Image>& train_images,
                          const std::vector<Image>& heldout, const ReconTrainConfig& cfg, std::uint64_t seed) {
  const auto vision_before = group_checksum(m.group("vision"));
  m.set_trainable_groups({});
  ReconProbe<T> probe;
  probe.mode = mode;
  probe.layers = probe_layers(m, mode);
  Rng init(mix_seed(seed, 300));
  probe.decoder =
      ReconDecoder<T>(probe.layers.size() * m.config.vision.d_v, m.config.recon, m.config.vision, init);
  ParamList<T> params;
  probe.decoder.collect("probe", params);

  const auto inputs = probe_inputs(m, train_images, probe.layers);
  std::vector<Tensor<T>> targets;
  for (const auto& img : train_images) targets.push_back(patchify<T>(img, m.config.vision));

  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  const std::size_t per_epoch = (inputs.size() + bs - 1) / bs;
  const std::size_t total = per_epoch * cfg.epochs;
  const std::size_t warm = warmup_steps(total, cfg.warmup_ratio);
  AdamState<T> state;
  Rng rng(mix_seed(seed, 301));
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(inputs.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * bs, hi = std::min(inputs.size(), lo + bs);
      Tensor<T> loss;
      try {
        for (std::size_t i = lo; i < hi; ++i) {
          const auto l = mse(probe.decoder(inputs[order[i]]), std::span<const T>(targets[order[i]].data()));
          loss = loss.defined() ? add(loss, l) : l;
        }
        loss = scale(loss, T(1) / static_cast<T>(hi - lo));
        backward(loss);
      } catch (const NumericError& err) {
        throw TrainingDiverged(std::string("reconstruction probe diverged: ") + err.what());
      }
      epoch_loss += loss.item() * static_cast<double>(hi - lo);
      adamw_step(params, state,
                 AdamHyper{lr_at(step + 1, total, cfg.learning_rate, warm), cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});
      zero_grads(params);
      ++step;
    }
    probe.epoch_losses.push_back(epoch_loss / static_cast<double>(inputs.size()));
  }
  if (group_checksum(m.group("vision")) != vision_before) throw FrozenGroupChanged("probe training touched the encoder");
  probe.heldout_mse = heldout.empty() ? 0.0 : recon_mse(probe, m, heldout);
  return probe;
}

/// Baseline that predicts the per-pixel training mean for every image.
inline double pixel_mean_mse(const std::vector<Image>& train_images, const std::vector<Image>& heldout) {
  if (train_images.empty() || heldout.empty()) throw std::invalid_argument("pixel_mean_mse: no images");
  std::vector<double> mean(train_images.front().pixels.size(), 0.0);
  for (const auto& img : train_images)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += img.pixels[i];
  for (auto& v : mean) v /= static_cast<double>(train_images.size());
  double total = 0.0;
  for (const auto& img : heldout)
    for (std::size_t i = 0; i < mean.size(); ++i) total += (img.pixels[i] - mean[i]) * (img.pixels[i] - mean[i]);
  return total / static_cast<double>(heldout.size() * mean.size());
}

}  // namespace ser
