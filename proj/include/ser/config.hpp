#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "ser/probes.hpp"

namespace ser {

struct DataConfig {
  std::size_t train_scenes = 2000;
  std::size_t heldout_scenes = 200;
};

struct EvalConfig {
  std::size_t iterations = 1;
  std::size_t max_iterations = 4;
};

/// Everything a run depends on besides the seed-derived data.
struct RunConfig {
  ModelConfig model;
  TrainConfig stage0 = default_train_config(0);
  TrainConfig stage1 = default_train_config(1);
  TrainConfig stage2 = default_train_config(2);
  ReconTrainConfig probe;
  DataConfig data;
  EvalConfig eval;
  std::uint64_t seed = 0;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// Reads known keys from one JSON object and rejects the rest.
class StrictObject {
 public:
  StrictObject(const nlohmann::ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }
  ~StrictObject() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) throw ConfigError("config: unknown key '" + path_ + "." + k + "'");
    }
  }

  template <typename V>
  void read(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + path_ + "." + key + "': " + e.what());
    }
  }

  const nlohmann::ordered_json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string path(const char* key) const { return path_ + "." + key; }

 private:
  const nlohmann::ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::ordered_json train_to_json(const TrainConfig& t) {
  nlohmann::ordered_json j;
  j["learning_rate"] = t.learning_rate;
  j["warmup_ratio"] = t.warmup_ratio;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["eps"] = t.eps;
  j["weight_decay"] = t.weight_decay;
  j["clip_norm"] = t.clip_norm;
  j["self_generated_inputs"] = t.self_generated_inputs;
  j["single_glance_samples"] = t.single_glance_samples;
  return j;
}

inline void train_from_json(const nlohmann::ordered_json& j, const std::string& path, TrainConfig& t) {
  detail::StrictObject o(j, path);
  o.read("learning_rate", t.learning_rate);
  o.read("warmup_ratio", t.warmup_ratio);
  o.read("epochs", t.epochs);
  o.read("batch_size", t.batch_size);
  o.read("beta1", t.beta1);
  o.read("beta2", t.beta2);
  o.read("eps", t.eps);
  o.read("weight_decay", t.weight_decay);
  o.read("clip_norm", t.clip_norm);
  o.read("self_generated_inputs", t.self_generated_inputs);
  o.read("single_glance_samples", t.single_glance_samples);
  if (t.learning_rate < 0.0 || t.warmup_ratio < 0.0 || t.warmup_ratio > 1.0)
    throw ConfigError("config: '" + path + "' has an invalid schedule");
}

/// Resolved config with every default spelled out, in a fixed key order.
inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  const auto& v = c.model.vision;
  j["vision"] = {{"image_size", v.image_size}, {"patch_size", v.patch_size}, {"d_v", v.d_v},
                 {"layers", v.layers},         {"heads", v.heads},           {"ffn_mult", v.ffn_mult}};
  const auto& l = c.model.lm;
  j["lm"] = {{"d_lm", l.d_lm}, {"layers", l.layers}, {"heads", l.heads}, {"max_seq", l.max_seq}, {"ffn_mult", l.ffn_mult}};
  nlohmann::ordered_json taps = nlohmann::ordered_json::array();
  for (const auto& f : c.model.deeplens.tap_fractions) taps.push_back({f.num, f.den});
  j["deeplens"] = {{"tap_fractions", taps},
                   {"fusion_blocks", c.model.deeplens.fusion_blocks},
                   {"t_max", c.model.deeplens.t_max}};
  const auto& r = c.model.recon;
  j["recon"] = {{"d_dec", r.d_dec}, {"blocks", r.blocks}, {"heads", r.heads}, {"ffn_mult", r.ffn_mult}};
  j["train"]["stage0"] = train_to_json(c.stage0);
  j["train"]["stage1"] = train_to_json(c.stage1);
  j["train"]["stage2"] = train_to_json(c.stage2);
  const auto& p = c.probe;
  j["probe"] = {{"learning_rate", p.learning_rate}, {"beta1", p.beta1},           {"beta2", p.beta2},
                {"weight_decay", p.weight_decay},   {"batch_size", p.batch_size}, {"epochs", p.epochs},
                {"warmup_ratio", p.warmup_ratio}};
  j["data"] = {{"train_scenes", c.data.train_scenes}, {"heldout_scenes", c.data.heldout_scenes}};
  j["eval"] = {{"iterations", c.eval.iterations}, {"max_iterations", c.eval.max_iterations}};
  j["seed"] = c.seed;
  return j;
}

/// Overlays `j` on the defaults; unknown keys anywhere are errors.
inline RunConfig config_from_json(const nlohmann::ordered_json& j) {
  RunConfig c;
  detail::StrictObject root(j, "config");
  if (const auto* v = root.child("vision")) {
    detail::StrictObject o(*v, "config.vision");
    auto& x = c.model.vision;
    o.read("image_size", x.image_size);
    o.read("patch_size", x.patch_size);
    o.read("d_v", x.d_v);
    o.read("layers", x.layers);
    o.read("heads", x.heads);
    o.read("ffn_mult", x.ffn_mult);
  }
  if (const auto* v = root.child("lm")) {
    detail::StrictObject o(*v, "config.lm");
    auto& x = c.model.lm;
    o.read("d_lm", x.d_lm);
    o.read("layers", x.layers);
    o.read("heads", x.heads);
    o.read("max_seq", x.max_seq);
    o.read("ffn_mult", x.ffn_mult);
  }
  if (const auto* v = root.child("deeplens")) {
    detail::StrictObject o(*v, "config.deeplens");
    auto& x = c.model.deeplens;
    if (const auto* taps = o.child("tap_fractions")) {
      x.tap_fractions.clear();
      for (const auto& f : *taps) {
        if (!f.is_array() || f.size() != 2) throw ConfigError("config: tap fractions are [numerator, denominator] pairs");
        x.tap_fractions.push_back({f[0].get<std::int64_t>(), f[1].get<std::int64_t>()});
      }
    }
    o.read("fusion_blocks", x.fusion_blocks);
    o.read("t_max", x.t_max);
  }
  if (const auto* v = root.child("recon")) {
    detail::StrictObject o(*v, "config.recon");
    auto& x = c.model.recon;
    o.read("d_dec", x.d_dec);
    o.read("blocks", x.blocks);
    o.read("heads", x.heads);
    o.read("ffn_mult", x.ffn_mult);
  }
  if (const auto* v = root.child("train")) {
    detail::StrictObject o(*v, "config.train");
    if (const auto* s = o.child("stage0")) train_from_json(*s, "config.train.stage0", c.stage0);
    if (const auto* s = o.child("stage1")) train_from_json(*s, "config.train.stage1", c.stage1);
    if (const auto* s = o.child("stage2")) train_from_json(*s, "config.train.stage2", c.stage2);
  }
  if (const auto* v = root.child("probe")) {
    detail::StrictObject o(*v, "config.probe");
    auto& x = c.probe;
    o.read("learning_rate", x.learning_rate);
    o.read("beta1", x.beta1);
    o.read("beta2", x.beta2);
    o.read("weight_decay", x.weight_decay);
    o.read("batch_size", x.batch_size);
    o.read("epochs", x.epochs);
    o.read("warmup_ratio", x.warmup_ratio);
  }
  if (const auto* v = root.child("data")) {
    detail::StrictObject o(*v, "config.data");
    o.read("train_scenes", c.data.train_scenes);
    o.read("heldout_scenes", c.data.heldout_scenes);
  }
  if (const auto* v = root.child("eval")) {
    detail::StrictObject o(*v, "config.eval");
    o.read("iterations", c.eval.iterations);
    o.read("max_iterations", c.eval.max_iterations);
  }
  root.read("seed", c.seed);
  c.stage0.stage = 0;
  c.stage1.stage = 1;
  c.stage2.stage = 2;
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace ser
