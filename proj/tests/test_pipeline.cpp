#include <gtest/gtest.h>

#include "common.hpp"
#include "oracles.hpp"
#include "ser/data.hpp"
#include "ser/pipeline.hpp"

using namespace ser;

namespace {

// Random weights scaled up so the untrained captioner emits non-trivial text.
ModelBundle<float> random_model(std::uint64_t seed) {
  auto m = make_model<float>(testing_support::tiny_model_config(), seed);
  Rng rng(seed + 1);
  for (const auto& g : {"mlp", "deeplens", "lm"}) {
    for (auto p : m.group(g))
      for (auto& v : p.tensor.mutable_values()) v = static_cast<float>(rng.normal() * 0.3);
  }
  return m;
}

}  // namespace

TEST(Pipeline, OneEncoderPassForAnyIterationCount) {
  const auto m = random_model(1);
  const Pipeline<float> pipe(m);
  const auto img = render(gen_scene(3));
  for (const std::size_t it : {0, 1, 2, 4}) {
    const auto before = m.vision.counters().encodes.load();
    const auto r = pipe.caption(img, it);
    EXPECT_EQ(r.encoder_forward_count, 1u);
    EXPECT_EQ(m.vision.counters().encodes.load() - before, 1u);
    EXPECT_EQ(r.refine_block_forwards, 0u);
    EXPECT_EQ(r.o_refined.size(), it);
    EXPECT_EQ(r.refined_logprob.size(), it);
  }
}

TEST(Pipeline, ZeroIterationsIsInitialOnly) {
  const auto m = random_model(2);
  const auto r = Pipeline<float>(m).caption(render(gen_scene(4)), 0);
  EXPECT_TRUE(r.o_refined.empty());
  EXPECT_LE(r.initial_logprob, 0.0);
}

TEST(Pipeline, Deterministic) {
  const auto m = random_model(3);
  const Pipeline<float> pipe(m);
  const auto img = render(gen_scene(5));
  const auto a = pipe.caption(img, 2), b = pipe.caption(img, 2);
  EXPECT_EQ(a.o_initial, b.o_initial);
  EXPECT_EQ(a.o_refined, b.o_refined);
  EXPECT_EQ(a.initial_logprob, b.initial_logprob);
  EXPECT_EQ(pipe.glance(img).ids, pipe.glance(img).ids);
}

TEST(Pipeline, GlanceThenRefineKeepsBuffer) {
  const auto m = random_model(4);
  const Pipeline<float> pipe(m);
  auto g = pipe.glance(render(gen_scene(6)), 6);
  EXPECT_EQ(g.buffer.encoder_forward_count, 1u);
  EXPECT_EQ(g.buffer.features.image_id, 6);
  const auto encodes = m.vision.counters().encodes.load();
  const auto blocks = m.vision.counters().block_forwards.load();
  const auto out = pipe.refine(g.buffer, std::string("a small red circle"));
  EXPECT_LE(out.size(), pipe.max_new());
  EXPECT_EQ(m.vision.counters().encodes.load(), encodes);
  EXPECT_EQ(m.vision.counters().block_forwards.load(), blocks);
  EXPECT_EQ(g.buffer.encoder_forward_count, 1u);
}

TEST(Pipeline, RefineErrors) {
  const auto m = random_model(5);
  const Pipeline<float> pipe(m);
  EXPECT_THROW(pipe.refine(FeatureBuffer<float>{}, std::vector<int>{7}), std::invalid_argument);
  auto g = pipe.glance(render(gen_scene(7)));
  EXPECT_THROW(pipe.refine(g.buffer, std::vector<int>{}), std::invalid_argument);
}

TEST(Pipeline, IterationLimit) {
  const auto m = random_model(6);
  const Pipeline<float> pipe(m, PipelineOptions{GlanceMode::Mlp, 4});
  EXPECT_THROW(pipe.caption(render(gen_scene(1)), 5), std::invalid_argument);
}

TEST(Pipeline, RefinedEntriesRepeatAfterFixedPoint) {
  const auto m = random_model(7);
  const Pipeline<float> pipe(m);
  const auto r = pipe.caption(render(gen_scene(8)), 4);
  for (std::size_t i = 1; i < r.o_refined.size(); ++i) {
    if (i >= 2 && r.o_refined[i - 1] == r.o_refined[i - 2]) EXPECT_EQ(r.o_refined[i], r.o_refined[i - 1]);
  }
}

TEST(Pipeline, RefineContextLayout) {
  const std::vector<int> ids{7, 8};
  EXPECT_EQ(refine_context(ids), (std::vector<int>{Vocabulary::kRefineTask, 7, 8, Vocabulary::kSep}));
  EXPECT_EQ(caption_context(), (std::vector<int>{Vocabulary::kCaptionTask}));
}

TEST(Pipeline, SingleGlanceModeUsesDeepLens) {
  const auto m = random_model(8);
  const auto f = m.vision.encode(render(gen_scene(9)));
  const auto a = glance_prefix(m, f, GlanceMode::SingleGlanceMultiLayer);
  EXPECT_EQ(a.data(), m.deeplens(f, Tensor<float>{}).data());
  const auto r = Pipeline<float>(m, PipelineOptions{GlanceMode::SingleGlanceMultiLayer, 4}).caption(render(gen_scene(9)), 1);
  EXPECT_EQ(r.encoder_forward_count, 1u);
}

TEST(Pipeline, LogprobsMatchDirectScoring) {
  const auto m = random_model(9);
  const Pipeline<float> pipe(m);
  auto g = pipe.glance(render(gen_scene(10)));
  const std::vector<int> caption = m.vocab.encode({"a", "large", "blue", "square"});
  const double lp = pipe.initial_logprob(g.buffer, caption);
  const auto prefix = glance_prefix(m, g.buffer.features, GlanceMode::Mlp);
  EXPECT_EQ(lp, sequence_logprob(m.lm, prefix, caption_context(), with_eos(caption)));
}
