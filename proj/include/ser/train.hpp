#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ser/pipeline.hpp"

namespace ser {

struct TrainConfig {
  int stage = 1;
  double learning_rate = 1e-3;
  double warmup_ratio = 0.03;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
  // Stage 2 only: use the stage-1 model's own captions as refinement inputs
  // instead of pseudo-initials.
  bool self_generated_inputs = false;
  // Stage 2 only: also train the caption-free DeepLens glance.
  bool single_glance_samples = false;
};

inline TrainConfig default_train_config(int stage) {
  TrainConfig c;
  c.stage = stage;
  if (stage == 0) {
    c.learning_rate = 1e-3;
    c.epochs = 4;
    c.beta2 = 0.95;
    c.weight_decay = 0.05;
  } else if (stage == 2) {
    c.epochs = 2;
  }
  return c;
}

inline std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio) {
  return static_cast<std::size_t>(std::llround(warmup_ratio * static_cast<double>(total_steps)));
}

/// Linear warmup to `peak`, then cosine decay to zero at `total_steps`.
inline double lr_at(std::size_t step, std::size_t total_steps, double peak, std::size_t warmup) {
  if (step > total_steps) throw std::out_of_range("lr_at: step beyond schedule");
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps <= warmup) return peak;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return std::max(0.0, peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

template <typename T>
struct AdamState {
  std::map<std::string, std::vector<T>> m, v;
  std::uint64_t step = 0;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam with bias-corrected moments. Parameters
/// without a gradient are left untouched.
template <typename T>
void adamw_step(const ParamList<T>& params, AdamState<T>& state, const AdamHyper& h) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (auto p : params) {
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_values();
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.empty()) {
      m.assign(w.size(), T(0));
      v.assign(w.size(), T(0));
    }
    if (m.size() != w.size() || g.size() != w.size()) throw ShapeError("adamw_step: state shape mismatch for " + p.name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(h.beta1 * m[i] + (1.0 - h.beta1) * gi);
      v[i] = static_cast<T>(h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi);
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      double wi = w[i];
      wi -= h.lr * h.weight_decay * wi;
      wi -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
      w[i] = static_cast<T>(wi);
    }
  }
}

template <typename T>
double global_grad_norm(const ParamList<T>& params) {
  double s = 0.0;
  for (const auto& p : params)
    for (const T g : p.tensor.grad()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LogRecord {
  int stage = 0;
  std::size_t step = 0;
  double lr = 0.0;
  std::optional<double> loss;
  std::optional<double> mean_delta;
};

using LogSink = std::function<void(const LogRecord&)>;

/// Keeps only the blocks a stage reads (taps and the last block).
template <typename T>
VisionFeatureSet<T> prune_features(VisionFeatureSet<T> f, const std::vector<std::size_t>& keep) {
  for (std::size_t i = 1; i <= f.per_block.size(); ++i) {
    if (i != f.per_block.size() && std::find(keep.begin(), keep.end(), i) == keep.end()) f.per_block[i - 1] = Tensor<T>{};
  }
  return f;
}

template <typename T>
std::vector<VisionFeatureSet<T>> encode_all(const ModelBundle<T>& m, const std::vector<DatasetRecord>& records) {
  NoGradGuard no_grad;
  std::vector<VisionFeatureSet<T>> out;
  out.reserve(records.size());
  const auto taps = m.taps();
  for (const auto& r : records)
    out.push_back(prune_features(m.vision.encode(render(r.scene, m.config.vision.image_size), r.scene.id), taps));
  return out;
}

/// Teacher-forced caption loss for the initial glance: targets are the
/// caption tokens followed by EOS.
template <typename T>
Tensor<T> caption_loss(const ModelBundle<T>& m, const VisionFeatureSet<T>& f, const std::vector<int>& caption,
                       GlanceMode mode = GlanceMode::Mlp) {
  const Tensor<T> prefix = glance_prefix(m, f, mode);
  std::vector<int> inputs = caption_context();
  inputs.insert(inputs.end(), caption.begin(), caption.end());
  const Tensor<T> logits = m.lm.forward(prefix, inputs);
  const auto targets = with_eos(caption);
  return cross_entropy_logits(logits, targets);
}

/// Mean token cross-entropy of the ground truth given image features and a
/// pseudo-initial caption, with the refinement wiring of the pipeline.
template <typename T>
Tensor<T> refinement_loss(const ModelBundle<T>& m, const VisionFeatureSet<T>& f, const std::vector<int>& initial,
                          const std::vector<int>& target) {
  if (initial.empty()) throw std::invalid_argument("refinement_loss: empty initial caption");
  const Tensor<T> prefix = refine_prefix(m, f, initial);
  std::vector<int> inputs = refine_context(initial);
  inputs.insert(inputs.end(), target.begin(), target.end());
  const Tensor<T> logits = m.lm.forward(prefix, inputs);
  const auto targets = with_eos(target);
  // The SEP row predicts the first target token.
  const std::size_t first = initial.size() + 1;
  return cross_entropy_logits(slice_rows(logits, first, targets.size()), targets);
}

/// log p(target | image, initial) - log p(initial | image, initial), both
/// scored as continuations of the same refinement context.
template <typename T>
double margin_delta(const ModelBundle<T>& m, const VisionFeatureSet<T>& f, const std::vector<int>& initial,
                    const std::vector<int>& target) {
  const Tensor<T> prefix = [&] {
    NoGradGuard g;
    return refine_prefix(m, f, initial);
  }();
  const auto ctx = refine_context(initial);
  return sequence_logprob(m.lm, prefix, ctx, with_eos(target)) - sequence_logprob(m.lm, prefix, ctx, with_eos(initial));
}

struct TrainSample {
  std::size_t feature_index = 0;
  std::vector<int> initial;  // empty for caption samples
  std::vector<int> target;
  bool single_glance = false;
};

template <typename T>
class StageRunner {
 public:
  StageRunner(ModelBundle<T>& model, const TrainConfig& cfg, LogSink log)
      : model_(model), cfg_(cfg), log_(std::move(log)) {}

  // Runs mini-batch AdamW over `samples` with the cosine schedule.
  template <typename LossFn, typename EpochHook>
  std::vector<double> run(std::vector<TrainSample> samples, const std::vector<std::string>& trainable, LossFn&& loss_fn,
                          std::uint64_t shuffle_seed, EpochHook&& on_epoch) {
    if (samples.empty()) throw std::invalid_argument("training: no samples");
    model_.set_trainable_groups(trainable);
    ParamList<T> params;
    for (const auto& g : trainable) {
      auto part = model_.group(g);
      params.insert(params.end(), part.begin(), part.end());
    }
    const std::size_t bs = std::max<std::size_t>(1, cfg_.batch_size);
    const std::size_t per_epoch = (samples.size() + bs - 1) / bs;
    const std::size_t total = per_epoch * cfg_.epochs;
    const std::size_t warm = warmup_steps(total, cfg_.warmup_ratio);
    AdamState<T> state;
    Rng rng(shuffle_seed);
    std::vector<double> epoch_losses;
    std::size_t step = 0;
    if (const std::optional<double> d = on_epoch(std::size_t{0}); d && log_) {
      log_(LogRecord{cfg_.stage, 0, 0.0, std::nullopt, d});
    }
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::vector<std::size_t> order(samples.size());
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);
      double epoch_loss = 0.0;
      for (std::size_t b = 0; b < per_epoch; ++b) {
        const std::size_t lo = b * bs, hi = std::min(samples.size(), lo + bs);
        double batch_loss = 0.0;
        try {
          Tensor<T> total_loss;
          for (std::size_t i = lo; i < hi; ++i) {
            const Tensor<T> l = loss_fn(samples[order[i]]);
            total_loss = total_loss.defined() ? add(total_loss, l) : l;
          }
          total_loss = scale(total_loss, T(1) / static_cast<T>(hi - lo));
          batch_loss = total_loss.item();
          backward(total_loss);
        } catch (const NumericError& e) {
          zero_grads(params);
          throw TrainingDiverged("stage " + std::to_string(cfg_.stage) + " diverged at step " + std::to_string(step) +
                                 ": " + e.what());
        }
        const double lr = lr_at(step + 1, total, cfg_.learning_rate, warm);
        if (cfg_.clip_norm > 0.0) clip_gradients(params, cfg_.clip_norm);
        adamw_step(params, state, AdamHyper{lr, cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.weight_decay});
        zero_grads(params);
        ++step;
        epoch_loss += batch_loss * static_cast<double>(hi - lo);
        LogRecord rec{cfg_.stage, step, lr, batch_loss, std::nullopt};
        if (b + 1 == per_epoch) rec.mean_delta = on_epoch(epoch + 1);
        if (log_) log_(rec);
      }
      epoch_losses.push_back(epoch_loss / static_cast<double>(samples.size()));
    }
    model_.set_trainable_groups({});
    return epoch_losses;
  }

 private:
  static void clip_gradients(const ParamList<T>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (!std::isfinite(norm)) throw TrainingDiverged("gradient norm is not finite");
    if (norm <= max_norm) return;
    const T factor = static_cast<T>(max_norm / norm);
    for (auto p : params) {
      if (!p.tensor.has_grad()) continue;
      // Gradients are only reachable read-only; rebuild via the node.
      for (auto& g : p.tensor.node()->grad) g *= factor;
    }
  }

  ModelBundle<T>& model_;
  TrainConfig cfg_;
  LogSink log_;
};

struct StageReport {
  std::vector<double> epoch_losses;
  std::vector<double> mean_deltas;  // stage 2: before training and after each epoch
  std::map<std::string, std::uint64_t> checksums_before, checksums_after;
};

class FrozenGroupChanged : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
void verify_unchanged(const ModelBundle<T>& m, const std::vector<std::string>& groups,
                      const std::map<std::string, std::uint64_t>& before) {
  for (const auto& g : groups) {
    if (group_checksum(m.group(g)) != before.at(g)) throw FrozenGroupChanged("frozen group '" + g + "' was modified");
  }
}

/// Reconstruction pretraining of the eyes, which are frozen afterwards.
template <typename T>
StageReport stage0_pretrain_vision(ModelBundle<T>& m, const std::vector<Image>& images, const TrainConfig& cfg,
                                   std::uint64_t seed, LogSink log = {}) {
  StageReport rep;
  rep.checksums_before = all_group_checksums(m);
  std::vector<TrainSample> samples(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) samples[i].feature_index = i;
  std::vector<Tensor<T>> targets;
  for (const auto& img : images) targets.push_back(patchify<T>(img, m.config.vision));
  StageRunner<T> runner(m, cfg, std::move(log));
  rep.epoch_losses = runner.run(
      samples, {"vision", "recon"},
      [&](const TrainSample& s) {
        const auto f = m.vision.encode(images[s.feature_index]);
        return mse(m.recon(f.last()), std::span<const T>(targets[s.feature_index].data()));
      },
      mix_seed(seed, 200), [](std::size_t) { return std::optional<double>{}; });
  verify_unchanged(m, {"mlp", "deeplens", "lm"}, rep.checksums_before);
  rep.checksums_after = all_group_checksums(m);
  return rep;
}

/// Initial-caption fine-tuning of the MLP connector and the LM.
template <typename T>
StageReport stage1_finetune(ModelBundle<T>& m, const std::vector<DatasetRecord>& records,
                            const std::vector<VisionFeatureSet<T>>& features, const TrainConfig& cfg,
                            std::uint64_t seed, LogSink log = {}) {
  StageReport rep;
  rep.checksums_before = all_group_checksums(m);
  std::vector<TrainSample> samples;
  for (std::size_t i = 0; i < records.size(); ++i)
    samples.push_back({i, {}, m.vocab.encode(records[i].caption.tokens), false});
  StageRunner<T> runner(m, cfg, std::move(log));
  rep.epoch_losses = runner.run(
      samples, {"mlp", "lm"},
      [&](const TrainSample& s) { return caption_loss(m, features[s.feature_index], s.target); },
      mix_seed(seed, 201), [](std::size_t) { return std::optional<double>{}; });
  verify_unchanged(m, {"vision", "recon", "deeplens"}, rep.checksums_before);
  rep.checksums_after = all_group_checksums(m);
  return rep;
}

template <typename T>
double mean_margin(const ModelBundle<T>& m, const std::vector<VisionFeatureSet<T>>& features,
                   const std::vector<TrainSample>& triples) {
  if (triples.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : triples) s += margin_delta(m, features[t.feature_index], t.initial, t.target);
  return s / static_cast<double>(triples.size());
}

/// Refinement triples: every pseudo-initial of every record (or, with
/// self_generated_inputs, the current model's own glance).
template <typename T>
std::vector<TrainSample> refinement_samples(const ModelBundle<T>& m, const std::vector<DatasetRecord>& records,
                                            const std::vector<VisionFeatureSet<T>>& features, bool self_generated) {
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto target = m.vocab.encode(records[i].caption.tokens);
    if (self_generated) {
      NoGradGuard g;
      auto ids = decode_greedy(m.lm, glance_prefix(m, features[i], GlanceMode::Mlp), caption_context(),
                               m.deeplens.t_max(), true);
      if (!ids.empty()) out.push_back({i, std::move(ids), target, false});
      continue;
    }
    for (const auto& p : records[i].pseudo_initials)
      out.push_back({i, m.vocab.encode(p.pseudo_initial.tokens), target, false});
  }
  return out;
}

/// Refinement fine-tuning of DeepLens and the LM; the MLP connector and the
/// eyes stay frozen.
template <typename T>
StageReport stage2_finetune(ModelBundle<T>& m, const std::vector<DatasetRecord>& records,
                            const std::vector<VisionFeatureSet<T>>& features, const TrainConfig& cfg,
                            std::uint64_t seed, LogSink log = {}, std::size_t margin_probe_size = 64) {
  StageReport rep;
  rep.checksums_before = all_group_checksums(m);
  auto samples = refinement_samples(m, records, features, cfg.self_generated_inputs);
  std::vector<TrainSample> probe;
  for (const auto& s : samples) {
    if (probe.size() >= margin_probe_size) break;
    if (s.initial != s.target) probe.push_back(s);
  }
  if (cfg.single_glance_samples) {
    for (std::size_t i = 0; i < records.size(); ++i)
      samples.push_back({i, {}, m.vocab.encode(records[i].caption.tokens), true});
  }
  StageRunner<T> runner(m, cfg, std::move(log));
  rep.epoch_losses = runner.run(
      samples, {"deeplens", "lm"},
      [&](const TrainSample& s) {
        if (s.single_glance) return caption_loss(m, features[s.feature_index], s.target, GlanceMode::SingleGlanceMultiLayer);
        return refinement_loss(m, features[s.feature_index], s.initial, s.target);
      },
      mix_seed(seed, 202),
      [&](std::size_t) {
        const double d = mean_margin(m, features, probe);
        rep.mean_deltas.push_back(d);
        return std::optional<double>(d);
      });
  verify_unchanged(m, {"vision", "recon", "mlp"}, rep.checksums_before);
  rep.checksums_after = all_group_checksums(m);
  return rep;
}

}  // namespace ser
