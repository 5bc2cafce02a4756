// ser: data generation, staged training, captioning, evaluation and probes.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ser/experiment.hpp"
#include "ser/image_io.hpp"

namespace fs = std::filesystem;
using namespace ser;

namespace {

// Failure with a stable machine-readable kind.
class CliError : public std::runtime_error {
 public:
  CliError(std::string kind, const std::string& msg) : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

int fail(const std::string& kind, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
  return kind == "usage" ? 2 : 1;
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool out_required) {
  app->add_option("--config", c.config_path, "run configuration (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "seed, overrides the config");
  auto* o = app->add_option("--out", c.out, "output path");
  if (out_required) o->required();
}

// Config from --config (or defaults) with --seed applied.
RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

// A checkpoint's own config, unless --config is given, in which case the
// model sections must agree.
RunConfig config_for_checkpoint(const Common& c, const CheckpointMeta& meta) {
  RunConfig cfg = meta.config;
  if (!c.config_path.empty()) {
    const RunConfig given = load_config(c.config_path);
    const auto a = config_to_json(given), b = config_to_json(meta.config);
    for (const char* k : {"vision", "lm", "deeplens", "recon"}) {
      if (a[k] != b[k])
        throw CliError("config_mismatch", std::string("--config '") + k + "' section differs from the checkpoint");
    }
    cfg = given;
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

LoadedCheckpoint<float> load_ckpt(const std::string& path) {
  if (!fs::exists(path)) throw CliError("missing_input", "checkpoint '" + path + "' does not exist");
  try {
    return load_checkpoint<float>(path);
  } catch (const CheckpointError& e) {
    throw CliError("bad_checkpoint", e.what());
  }
}

std::vector<DatasetRecord> load_records(const std::string& path) {
  if (!fs::exists(path)) throw CliError("missing_input", "dataset '" + path + "' does not exist");
  try {
    return read_dataset(path);
  } catch (const DatasetError& e) {
    throw CliError("bad_dataset", e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CliError("io", "cannot write '" + path + "'");
  out << text;
}

void cmd_gen_data(const Common& c) {
  const RunConfig cfg = resolve_config(c);
  fs::create_directories(c.out);
  const auto split = make_split(cfg, cfg.seed);
  write_dataset(split.train, (fs::path(c.out) / "train.jsonl").string());
  write_dataset(split.heldout, (fs::path(c.out) / "heldout.jsonl").string());
  write_text((fs::path(c.out) / "config.json").string(), config_to_json(cfg).dump(2) + "\n");
}

void cmd_train(const Common& c, int stage, const std::string& dataset, const std::string& ckpt_in,
               const std::string& log_path) {
  if (stage < 0 || stage > 2) throw CliError("usage", "--stage must be 0, 1 or 2");
  const auto records = load_records(dataset);
  if (records.empty()) throw CliError("bad_dataset", "dataset '" + dataset + "' is empty");
  auto log_file = log_path.empty() ? nullptr : std::make_shared<std::ofstream>(log_path, std::ios::trunc);
  const LogSink log = jsonl_log(log_file);

  if (stage == 0) {
    const RunConfig cfg = resolve_config(c);
    auto m = make_model<float>(cfg.model, init_seed(cfg.seed));
    stage0_pretrain_vision(m, render_all(records, cfg.model.vision.image_size), cfg.stage0, cfg.seed, log);
    save_checkpoint(m, stage_meta(cfg, 0, {{"init", init_seed(cfg.seed)}, {"stage0", cfg.seed}}), c.out);
    return;
  }
  if (ckpt_in.empty()) {
    throw CliError("missing_prerequisite", "stage " + std::to_string(stage) + " needs a stage-" +
                                               std::to_string(stage - 1) + " checkpoint (--checkpoint)");
  }
  auto loaded = load_ckpt(ckpt_in);
  if (loaded.meta.stage != stage - 1) {
    throw CliError("missing_prerequisite", "stage " + std::to_string(stage) + " needs a stage-" +
                                               std::to_string(stage - 1) + " checkpoint, '" + ckpt_in +
                                               "' is stage " + std::to_string(loaded.meta.stage));
  }
  const RunConfig cfg = config_for_checkpoint(c, loaded.meta);
  auto& m = loaded.model;
  const auto features = encode_all(m, records);
  auto seeds = loaded.meta.seeds;
  seeds["stage" + std::to_string(stage)] = cfg.seed;
  if (stage == 1) stage1_finetune(m, records, features, cfg.stage1, cfg.seed, log);
  else stage2_finetune(m, records, features, cfg.stage2, cfg.seed, log);
  save_checkpoint(m, stage_meta(cfg, stage, seeds), c.out);
}

void cmd_caption(const Common& c, const std::string& ckpt, const std::string& image_path,
                 std::optional<std::int64_t> scene_id, std::optional<std::size_t> iterations) {
  auto loaded = load_ckpt(ckpt);
  const RunConfig cfg = config_for_checkpoint(c, loaded.meta);
  Image img;
  std::int64_t id = -1;
  if (!image_path.empty()) {
    if (!fs::exists(image_path)) throw CliError("missing_input", "image '" + image_path + "' does not exist");
    img = read_ppm(image_path);
  } else {
    id = *scene_id;
    img = render(make_record(mix_seed(cfg.seed, static_cast<std::uint64_t>(id)), id).scene,
                 cfg.model.vision.image_size);
  }
  PipelineOptions opts;
  opts.max_iterations = cfg.eval.max_iterations;
  Pipeline<float> pipe(loaded.model, opts);
  const auto r = pipe.caption(img, iterations.value_or(cfg.eval.iterations), id);
  nlohmann::ordered_json j;
  j["image_id"] = id;
  j["o_initial"] = r.o_initial;
  j["o_refined"] = r.o_refined;
  j["initial_logprob"] = r.initial_logprob;
  j["refined_logprob"] = r.refined_logprob;
  j["encoder_forward_count"] = r.encoder_forward_count;
  write_text(c.out, j.dump() + "\n");
}

void cmd_eval(const Common& c, const std::string& ckpt, const std::string& dataset, const std::string& mode,
              std::optional<std::size_t> iterations) {
  auto loaded = load_ckpt(ckpt);
  const RunConfig cfg = config_for_checkpoint(c, loaded.meta);
  const auto records = load_records(dataset);
  const auto m = parse_eval_mode(mode);
  const std::size_t iters = iterations.value_or(cfg.eval.iterations);
  if (iters > cfg.eval.max_iterations) throw CliError("usage", "--iterations exceeds eval.max_iterations");
  const auto rep = evaluate(loaded.model, records, m, iters);
  write_text(c.out, report_jsonl(rep, records, cfg));
}

void cmd_probe_attention(const Common& c, const std::string& ckpt, const std::string& dataset, std::size_t limit) {
  auto loaded = load_ckpt(ckpt);
  const RunConfig cfg = config_for_checkpoint(c, loaded.meta);
  auto records = load_records(dataset);
  if (records.size() > limit) records.resize(limit);
  fs::create_directories(c.out);
  const auto& m = loaded.model;
  Pipeline<float> pipe(m);
  const std::size_t grid = cfg.model.vision.image_size / cfg.model.vision.patch_size;
  std::ofstream index(fs::path(c.out) / "index.jsonl", std::ios::trunc);
  EntropyReport ent;
  for (const auto& r : records) {
    auto g = pipe.glance(render(r.scene, cfg.model.vision.image_size), r.scene.id);
    const std::vector<int> refined = g.ids.empty() ? std::vector<int>{} : pipe.refine(g.buffer, g.ids);
    for (const Pass pass : {Pass::Initial, Pass::Refine}) {
      const auto& ids = pass == Pass::Initial ? g.ids : refined;
      for (std::size_t t = 0; t < ids.size(); ++t) {
        const auto map = attention_map(m, g.buffer.features, ids, t, pass,
                                       pass == Pass::Refine ? std::optional(g.ids) : std::nullopt);
        const std::string file =
            "scene" + std::to_string(r.scene.id) + "_" + pass_name(pass) + "_t" + std::to_string(t) + ".pgm";
        write_pgm(map, grid, (fs::path(c.out) / file).string());
        const double h = attention_entropy(map);
        (pass == Pass::Initial ? ent.initial : ent.refine) += h;
        ++(pass == Pass::Initial ? ent.initial_tokens : ent.refine_tokens);
        nlohmann::ordered_json j;
        j["image_id"] = r.scene.id;
        j["pass"] = pass_name(pass);
        j["token_index"] = t;
        j["token"] = m.vocab.token(ids[t]);
        j["entropy"] = h;
        j["file"] = file;
        index << j.dump() << '\n';
      }
    }
  }
  nlohmann::ordered_json s;
  s["summary"] = true;
  s["images"] = records.size();
  s["mean_entropy_initial"] = ent.initial_tokens ? ent.initial / static_cast<double>(ent.initial_tokens) : 0.0;
  s["mean_entropy_refine"] = ent.refine_tokens ? ent.refine / static_cast<double>(ent.refine_tokens) : 0.0;
  s["config"] = config_to_json(cfg);
  index << s.dump() << '\n';
}

void cmd_probe_recon(const Common& c, const std::string& ckpt, const std::string& dataset,
                     const std::string& heldout_path) {
  auto loaded = load_ckpt(ckpt);
  const RunConfig cfg = config_for_checkpoint(c, loaded.meta);
  const auto train = render_all(load_records(dataset), cfg.model.vision.image_size);
  const auto heldout = render_all(load_records(heldout_path), cfg.model.vision.image_size);
  nlohmann::ordered_json j;
  for (const auto mode : {FeatureMode::LastLayer, FeatureMode::MultiLayer}) {
    const auto probe = recon_train(mode, loaded.model, train, heldout, cfg.probe, cfg.seed);
    j[feature_mode_name(mode)] = {{"layers", probe.layers}, {"heldout_mse", probe.heldout_mse},
                                  {"epoch_losses", probe.epoch_losses}};
  }
  j["pixel_mean_mse"] = pixel_mean_mse(train, heldout);
  j["config"] = config_to_json(cfg);
  write_text(c.out, j.dump() + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Glance-and-refine captioning on a synthetic shapes world"};
  app.require_subcommand(1);

  Common gen_c, train_c, cap_c, eval_c, att_c, rec_c;
  auto* gen = app.add_subcommand("gen-data", "write train.jsonl and heldout.jsonl into --out");
  add_common(gen, gen_c, true);

  int stage = -1;
  std::string train_dataset, train_ckpt, train_log;
  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, train_c, true);
  train->add_option("--stage", stage, "0, 1 or 2")->required();
  train->add_option("--dataset", train_dataset, "training records (JSONL)")->required();
  train->add_option("--checkpoint", train_ckpt, "checkpoint of the previous stage");
  train->add_option("--log", train_log, "training log (JSONL)");

  std::string cap_ckpt, cap_image;
  std::optional<std::int64_t> cap_scene;
  std::optional<std::size_t> cap_iters;
  auto* cap = app.add_subcommand("caption", "caption one image");
  add_common(cap, cap_c, false);
  cap->add_option("--checkpoint", cap_ckpt)->required();
  auto* img_opt = cap->add_option("--image", cap_image, "binary PPM image");
  auto* scene_opt = cap->add_option("--scene-id", cap_scene, "scene regenerated from --seed");
  img_opt->excludes(scene_opt);
  cap->add_option("--iterations", cap_iters, "refinement iterations");

  std::string eval_ckpt, eval_dataset, eval_mode = "refined";
  std::optional<std::size_t> eval_iters;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset");
  add_common(ev, eval_c, false);
  ev->add_option("--checkpoint", eval_ckpt)->required();
  ev->add_option("--dataset", eval_dataset)->required();
  ev->add_option("--mode", eval_mode)->check(CLI::IsMember({"initial", "refined", "single-glance-2"}));
  ev->add_option("--iterations", eval_iters);

  auto* probe = app.add_subcommand("probe", "diagnostic probes");
  probe->require_subcommand(1);
  std::string att_ckpt, att_dataset;
  std::size_t att_limit = 200;
  auto* att = probe->add_subcommand("attention", "dump attention maps (PGM) and entropies");
  add_common(att, att_c, true);
  att->add_option("--checkpoint", att_ckpt)->required();
  att->add_option("--dataset", att_dataset)->required();
  att->add_option("--limit", att_limit, "number of images");
  std::string rec_ckpt, rec_dataset, rec_heldout;
  auto* rec = probe->add_subcommand("recon", "last-layer vs multi-layer reconstruction probes");
  add_common(rec, rec_c, false);
  rec->add_option("--checkpoint", rec_ckpt)->required();
  rec->add_option("--dataset", rec_dataset, "training images (JSONL)")->required();
  rec->add_option("--heldout", rec_heldout, "held-out images (JSONL)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*gen) cmd_gen_data(gen_c);
    else if (*train) cmd_train(train_c, stage, train_dataset, train_ckpt, train_log);
    else if (*cap) {
      if (cap_image.empty() && !cap_scene) throw CliError("usage", "caption needs --image or --scene-id");
      cmd_caption(cap_c, cap_ckpt, cap_image, cap_scene, cap_iters);
    } else if (*ev) cmd_eval(eval_c, eval_ckpt, eval_dataset, eval_mode, eval_iters);
    else if (*att) cmd_probe_attention(att_c, att_ckpt, att_dataset, att_limit);
    else if (*rec) cmd_probe_recon(rec_c, rec_ckpt, rec_dataset, rec_heldout);
  } catch (const CliError& e) {
    return fail(e.kind(), e.what());
  } catch (const ConfigError& e) {
    return fail("bad_config", e.what());
  } catch (const CheckpointError& e) {
    return fail("bad_checkpoint", e.what());
  } catch (const DatasetError& e) {
    return fail("bad_dataset", e.what());
  } catch (const TrainingDiverged& e) {
    return fail("diverged", e.what());
  } catch (const std::invalid_argument& e) {
    return fail("invalid_argument", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
