#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "ser/connector.hpp"
#include "ser/data.hpp"
#include "ser/lm.hpp"
#include "ser/recon.hpp"
#include "ser/vision.hpp"

namespace ser {

struct ModelConfig {
  VisionConfig vision;
  LmConfig lm;
  DeepLensConfig deeplens;
  ReconConfig recon;
};

inline const std::vector<std::string>& parameter_groups() {
  static const std::vector<std::string> g{"vision", "recon", "mlp", "deeplens", "lm"};
  return g;
}

/// Every parameter of the captioner: frozen eyes, both connectors, the LM,
/// and the reconstruction decoder used to pretrain the eyes.
template <typename T>
struct ModelBundle {
  ModelConfig config;
  Vocabulary vocab;
  VisionEncoder<T> vision;
  ReconDecoder<T> recon;
  MlpConnector<T> mlp;
  DeepLens<T> deeplens;
  LanguageModel<T> lm;

  std::vector<std::size_t> taps() const { return deeplens.taps(); }

  ParamList<T> group(const std::string& name) const {
    ParamList<T> out;
    if (name == "vision") vision.collect("vision", out);
    else if (name == "recon") recon.collect("recon", out);
    else if (name == "mlp") mlp.collect("mlp", out);
    else if (name == "deeplens") deeplens.collect("deeplens", out);
    else if (name == "lm") lm.collect("lm", out);
    else throw std::invalid_argument("unknown parameter group '" + name + "'");
    return out;
  }

  ParamList<T> all_parameters() const {
    ParamList<T> out;
    for (const auto& g : parameter_groups()) {
      auto part = group(g);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }

  // Makes exactly the listed groups trainable.
  void set_trainable_groups(const std::vector<std::string>& groups) const {
    for (const auto& g : parameter_groups()) {
      const bool on = std::find(groups.begin(), groups.end(), g) != groups.end();
      set_trainable(group(g), on);
    }
  }
};

template <typename T>
ModelBundle<T> make_model(ModelConfig cfg, std::uint64_t seed) {
  ModelBundle<T> m;
  m.vocab = shapes_vocabulary();
  cfg.lm.vocab_size = m.vocab.size();
  const auto& v = cfg.vision;
  v.validate();
  cfg.lm.validate();
  const std::size_t needed = v.num_patches() + 2 * cfg.deeplens.t_max + 4;
  if (cfg.lm.max_seq < needed) {
    throw std::invalid_argument("lm.max_seq " + std::to_string(cfg.lm.max_seq) + " below N_v + 2*t_max + 4 = " +
                                std::to_string(needed));
  }
  Rng vision_rng(mix_seed(seed, 101)), recon_rng(mix_seed(seed, 102)), mlp_rng(mix_seed(seed, 103)),
      lens_rng(mix_seed(seed, 104)), lm_rng(mix_seed(seed, 105));
  m.vision = VisionEncoder<T>(v, vision_rng);
  m.recon = ReconDecoder<T>(v.d_v, cfg.recon, v, recon_rng);
  m.mlp = MlpConnector<T>(v.d_v, cfg.lm.d_lm, mlp_rng);
  m.deeplens = DeepLens<T>(select_taps(v.layers, cfg.deeplens.tap_fractions), v.d_v, cfg.lm.d_lm, v.num_patches(),
                           cfg.deeplens.t_max, cfg.deeplens.fusion_blocks, cfg.lm.heads, cfg.lm.ffn_mult, lens_rng);
  m.lm = LanguageModel<T>(cfg.lm, lm_rng);
  m.config = cfg;
  return m;
}

/// FNV-1a over the raw bytes of every tensor in a group, in order.
template <typename T>
std::uint64_t group_checksum(const ParamList<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    for (const T v : p.tensor.data()) {
      const float f = static_cast<float>(v);
      unsigned char bytes[sizeof(float)];
      std::memcpy(bytes, &f, sizeof f);
      for (const unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

template <typename T>
std::map<std::string, std::uint64_t> all_group_checksums(const ModelBundle<T>& m) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& g : parameter_groups()) out[g] = group_checksum(m.group(g));
  return out;
}

}  // namespace ser
