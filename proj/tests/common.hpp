#pragma once

#include "ser/config.hpp"

namespace testing_support {

// Small enough for per-test model builds; keeps the 32-px image so the
// renderer's glyphs still fit their cells.
inline ser::ModelConfig tiny_model_config() {
  ser::ModelConfig c;
  c.vision.image_size = 32;
  c.vision.patch_size = 8;
  c.vision.d_v = 16;
  c.vision.layers = 4;
  c.vision.heads = 2;
  c.vision.ffn_mult = 2;
  c.lm.d_lm = 16;
  c.lm.layers = 2;
  c.lm.heads = 2;
  c.lm.ffn_mult = 2;
  c.lm.max_seq = 64;
  c.deeplens.fusion_blocks = 1;
  c.recon.d_dec = 16;
  c.recon.heads = 2;
  c.recon.ffn_mult = 2;
  return c;
}

// Tiny model plus a few scenes and one epoch per stage: CLI smoke runs.
inline ser::RunConfig tiny_run_config() {
  ser::RunConfig c;
  c.model = tiny_model_config();
  c.data.train_scenes = 24;
  c.data.heldout_scenes = 6;
  for (auto* s : {&c.stage0, &c.stage1, &c.stage2}) {
    s->epochs = 1;
    s->batch_size = 8;
  }
  c.probe.epochs = 1;
  c.probe.batch_size = 8;
  return c;
}

}  // namespace testing_support
