#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ser/checkpoint.hpp"
#include "ser/eval.hpp"

namespace ser {

// Held-out scene ids start here so they never collide with training ids.
inline constexpr std::int64_t kHeldoutIdBase = 1'000'000;

struct SplitData {
  std::vector<DatasetRecord> train, heldout;
};

inline SplitData make_split(const RunConfig& cfg, std::uint64_t seed) {
  return {generate_records(seed, 0, cfg.data.train_scenes),
          generate_records(seed, kHeldoutIdBase, cfg.data.heldout_scenes)};
}

inline std::vector<Image> render_all(const std::vector<DatasetRecord>& records, std::size_t image_size) {
  std::vector<Image> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(render(r.scene, image_size));
  return out;
}

inline std::uint64_t init_seed(std::uint64_t seed) { return mix_seed(seed, 11); }

inline CheckpointMeta stage_meta(const RunConfig& cfg, int stage, std::map<std::string, std::uint64_t> seeds) {
  CheckpointMeta meta;
  meta.config = cfg;
  meta.stage = stage;
  meta.seeds = std::move(seeds);
  meta.frozen = frozen_groups_after(stage);
  return meta;
}

/// JSONL training log writer; empty path disables logging.
inline LogSink jsonl_log(std::shared_ptr<std::ofstream> out) {
  if (!out) return {};
  return [out](const LogRecord& r) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["step"] = r.step;
    j["lr"] = r.lr;
    if (r.loss) j["loss"] = *r.loss;
    if (r.mean_delta) j["mean_delta"] = *r.mean_delta;
    *out << j.dump() << '\n';
  };
}

enum class EvalMode { Initial, Refined, SingleGlance2 };

inline const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::Initial: return "initial";
    case EvalMode::Refined: return "refined";
    case EvalMode::SingleGlance2: return "single-glance-2";
  }
  return "?";
}

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "initial") return EvalMode::Initial;
  if (s == "refined") return EvalMode::Refined;
  if (s == "single-glance-2") return EvalMode::SingleGlance2;
  throw std::invalid_argument("unknown eval mode '" + s + "'");
}

struct EvalSummary {
  EvalMode mode = EvalMode::Initial;
  std::size_t images = 0;
  std::size_t iterations = 0;
  double bleu4 = 0.0;
  double cider = 0.0;
  SlotScore slots;
  std::size_t parse_failures = 0;
};

struct EvalReport {
  std::vector<std::string> candidates;
  std::vector<SlotScore> per_image_slots;
  CiderResult cider;
  EvalSummary summary;
};

inline nlohmann::ordered_json slots_json(const SlotScore& s) {
  nlohmann::ordered_json j;
  auto put = [&](const char* k, const SlotCount& c) {
    const auto r = c.ratio();
    j[k] = r ? nlohmann::ordered_json(*r) : nlohmann::ordered_json(nullptr);
  };
  put("entity", s.entity);
  put("attribute", s.attribute);
  put("relation", s.relation);
  j["overall"] = s.overall();
  return j;
}

/// Captions every held-out scene in the given mode and scores the corpus.
template <typename T>
EvalReport evaluate(const ModelBundle<T>& m, const std::vector<DatasetRecord>& records, EvalMode mode,
                    std::size_t iterations = 1) {
  if (records.empty()) throw std::invalid_argument("evaluate: no records");
  PipelineOptions opts;
  opts.glance_mode = mode == EvalMode::SingleGlance2 ? GlanceMode::SingleGlanceMultiLayer : GlanceMode::Mlp;
  Pipeline<T> pipe(m, opts);
  const std::size_t iters = mode == EvalMode::Refined ? iterations : 0;
  EvalReport rep;
  EvalCorpus corpus;
  for (const auto& r : records) {
    const auto res = pipe.caption(render(r.scene, m.config.vision.image_size), iters, r.scene.id);
    const std::string cand = iters > 0 ? res.o_refined.back() : res.o_initial;
    rep.candidates.push_back(cand);
    corpus.push_back({r.scene.id, cand, {join_words(r.caption.tokens)}});
    const auto s = slot_accuracy(cand, r.scene);
    rep.per_image_slots.push_back(s);
    rep.summary.slots += s;
    rep.summary.parse_failures += s.parse_failure;
  }
  rep.summary.mode = mode;
  rep.summary.images = records.size();
  rep.summary.iterations = iters;
  rep.summary.bleu4 = bleu4(corpus);
  if (corpus.size() >= 2) {
    rep.cider = cider(corpus);
    rep.summary.cider = rep.cider.mean;
  }
  return rep;
}

/// Line-delimited report: one record per image, then the summary with the
/// resolved config.
inline std::string report_jsonl(const EvalReport& rep, const std::vector<DatasetRecord>& records,
                                const RunConfig& cfg) {
  std::string out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    nlohmann::ordered_json j;
    j["image_id"] = records[i].scene.id;
    j["candidate"] = rep.candidates[i];
    j["cider"] = rep.cider.per_image.empty() ? 0.0 : rep.cider.per_image[i];
    j["slots"] = slots_json(rep.per_image_slots[i]);
    j["parse_failure"] = rep.per_image_slots[i].parse_failure;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json s;
  s["summary"] = true;
  s["mode"] = eval_mode_name(rep.summary.mode);
  s["iterations"] = rep.summary.iterations;
  s["images"] = rep.summary.images;
  s["bleu4"] = rep.summary.bleu4;
  s["cider"] = rep.summary.cider;
  s["slots"] = slots_json(rep.summary.slots);
  s["parse_failures"] = rep.summary.parse_failures;
  s["config"] = config_to_json(cfg);
  out += s.dump() + "\n";
  return out;
}

/// Mean margin over held-out pseudo-initials with at least one edit.
template <typename T>
std::pair<double, std::size_t> heldout_margin(const ModelBundle<T>& m, const std::vector<DatasetRecord>& records,
                                              const std::vector<VisionFeatureSet<T>>& features) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto target = m.vocab.encode(records[i].caption.tokens);
    for (const auto& p : records[i].pseudo_initials) {
      if (p.edit_count == 0) continue;
      sum += margin_delta(m, features[i], m.vocab.encode(p.pseudo_initial.tokens), target);
      ++n;
    }
  }
  return {n ? sum / static_cast<double>(n) : 0.0, n};
}

struct EntropyReport {
  double initial = 0.0, refine = 0.0;
  std::size_t initial_tokens = 0, refine_tokens = 0;
};

/// Mean attention entropy over generated tokens, initial glance vs refine
/// pass (refining the model's own initial caption).
template <typename T>
EntropyReport attention_entropy_report(const ModelBundle<T>& m, const std::vector<DatasetRecord>& records) {
  Pipeline<T> pipe(m);
  EntropyReport rep;
  for (const auto& r : records) {
    auto g = pipe.glance(render(r.scene, m.config.vision.image_size), r.scene.id);
    for (std::size_t t = 0; t < g.ids.size(); ++t) {
      rep.initial += attention_entropy(attention_map(m, g.buffer.features, g.ids, t, Pass::Initial));
      ++rep.initial_tokens;
    }
    if (g.ids.empty()) continue;
    const auto refined = pipe.refine(g.buffer, g.ids);
    for (std::size_t t = 0; t < refined.size(); ++t) {
      rep.refine += attention_entropy(attention_map(m, g.buffer.features, refined, t, Pass::Refine, g.ids));
      ++rep.refine_tokens;
    }
  }
  if (rep.initial_tokens) rep.initial /= static_cast<double>(rep.initial_tokens);
  if (rep.refine_tokens) rep.refine /= static_cast<double>(rep.refine_tokens);
  return rep;
}

/// Everything one seed of the scaled experiment produces.
struct SeedOutcome {
  std::uint64_t seed = 0;
  EvalSummary initial, refined;
  double heldout_margin = 0.0;
  std::size_t margin_triples = 0;
  std::vector<double> train_margins;
  double stage0_heldout_mse = 0.0, untrained_heldout_mse = 0.0;
  double mse_lf = 0.0, mse_mf = 0.0, mse_pixel_mean = 0.0;
  std::map<std::string, std::uint64_t> checksums_stage1, checksums_stage2;
  std::vector<std::string> stage2_reload_errors;
  double seconds = 0.0;
};

struct ExperimentHooks {
  // Called after stage 1 with the trained model; may return a reloaded copy.
  std::function<ModelBundle<float>(ModelBundle<float>)> after_stage1;
  bool run_probes = true;
  std::function<void(const std::string&)> progress;
};

/// Stages 0-2, held-out evaluation, margins and reconstruction probes for
/// one seed.
inline SeedOutcome run_seed(const RunConfig& cfg, std::uint64_t seed, const ExperimentHooks& hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  auto say = [&](const std::string& s) {
    if (hooks.progress) hooks.progress("seed " + std::to_string(seed) + ": " + s);
  };
  SeedOutcome out;
  out.seed = seed;
  const auto data = make_split(cfg, seed);
  const auto train_images = render_all(data.train, cfg.model.vision.image_size);
  const auto heldout_images = render_all(data.heldout, cfg.model.vision.image_size);

  auto m = make_model<float>(cfg.model, init_seed(seed));
  {
    // Reference: reconstruction from an untrained encoder/decoder pair.
    ReconProbe<float> untrained{FeatureMode::LastLayer, {cfg.model.vision.layers}, m.recon, 0.0, {}};
    out.untrained_heldout_mse = recon_mse(untrained, m, heldout_images);
  }
  say("stage 0");
  stage0_pretrain_vision(m, train_images, cfg.stage0, seed);
  {
    ReconProbe<float> trained{FeatureMode::LastLayer, {cfg.model.vision.layers}, m.recon, 0.0, {}};
    out.stage0_heldout_mse = recon_mse(trained, m, heldout_images);
  }
  const auto features = encode_all(m, data.train);
  say("stage 1");
  stage1_finetune(m, data.train, features, cfg.stage1, seed);
  out.checksums_stage1 = all_group_checksums(m);
  if (hooks.after_stage1) m = hooks.after_stage1(std::move(m));
  say("stage 2");
  const auto rep2 = stage2_finetune(m, data.train, features, cfg.stage2, seed);
  out.train_margins = rep2.mean_deltas;
  out.checksums_stage2 = all_group_checksums(m);

  say("evaluation");
  out.initial = evaluate(m, data.heldout, EvalMode::Initial).summary;
  out.refined = evaluate(m, data.heldout, EvalMode::Refined, 1).summary;
  const auto heldout_features = encode_all(m, data.heldout);
  std::tie(out.heldout_margin, out.margin_triples) = heldout_margin(m, data.heldout, heldout_features);

  if (hooks.run_probes) {
    say("reconstruction probes");
    out.mse_lf = recon_train(FeatureMode::LastLayer, m, train_images, heldout_images, cfg.probe, seed).heldout_mse;
    out.mse_mf = recon_train(FeatureMode::MultiLayer, m, train_images, heldout_images, cfg.probe, seed).heldout_mse;
    out.mse_pixel_mean = pixel_mean_mse(train_images, heldout_images);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// Runs seeds on up to `threads` worker threads; results are in seed order
/// and do not depend on the thread count.
inline std::vector<SeedOutcome> run_seeds(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                          std::size_t threads, const ExperimentHooks& hooks = {}) {
  std::vector<SeedOutcome> out(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  threads = std::max<std::size_t>(1, std::min(threads, seeds.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        out[i] = run_seed(cfg, seeds[i], hooks);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace ser
