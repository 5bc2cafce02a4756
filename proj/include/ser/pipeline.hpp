#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ser/model.hpp"

namespace ser {

enum class GlanceMode { Mlp, SingleGlanceMultiLayer };

/// Buffered vision features of the image being captioned.
template <typename T>
struct FeatureBuffer {
  VisionFeatureSet<T> features;
  std::uint64_t encoder_forward_count = 0;
  bool populated() const { return !features.per_block.empty(); }
};

struct CaptionResult {
  std::string o_initial;
  std::vector<std::string> o_refined;  // one entry per requested iteration
  double initial_logprob = 0.0;
  std::vector<double> refined_logprob;
  std::uint64_t encoder_forward_count = 0;
  std::uint64_t refine_block_forwards = 0;  // vision blocks run during refinement
};

// Visual prefix for the initial pass.
template <typename T>
Tensor<T> glance_prefix(const ModelBundle<T>& m, const VisionFeatureSet<T>& f, GlanceMode mode) {
  if (mode == GlanceMode::Mlp) return m.mlp(f.last());
  return m.deeplens(f, Tensor<T>{});
}

// Visual prefix for refinement: DeepLens conditioned on the input caption.
template <typename T>
Tensor<T> refine_prefix(const ModelBundle<T>& m, const VisionFeatureSet<T>& f, const std::vector<int>& caption_ids) {
  return m.deeplens(f, m.lm.embed(caption_ids));
}

inline std::vector<int> caption_context(const std::vector<int>& = {}) { return {Vocabulary::kCaptionTask}; }

inline std::vector<int> refine_context(const std::vector<int>& caption_ids) {
  std::vector<int> ctx{Vocabulary::kRefineTask};
  ctx.insert(ctx.end(), caption_ids.begin(), caption_ids.end());
  ctx.push_back(Vocabulary::kSep);
  return ctx;
}

inline std::vector<int> with_eos(std::vector<int> ids) {
  ids.push_back(Vocabulary::kEos);
  return ids;
}

struct PipelineOptions {
  GlanceMode glance_mode = GlanceMode::Mlp;
  std::size_t max_iterations = 4;
};

/// Glance, then refine against the buffered features.
template <typename T>
class Pipeline {
 public:
  explicit Pipeline(const ModelBundle<T>& model, PipelineOptions opts = {}) : model_(model), opts_(opts) {}

  const ModelBundle<T>& model() const { return model_; }
  std::size_t max_new() const { return model_.deeplens.t_max(); }

  struct Glance {
    std::vector<int> ids;
    FeatureBuffer<T> buffer;
  };

  Glance glance(const Image& image, std::int64_t image_id = -1) const {
    NoGradGuard no_grad;
    Glance g;
    g.buffer.features = model_.vision.encode(image, image_id);
    g.buffer.encoder_forward_count = 1;
    const Tensor<T> prefix = glance_prefix(model_, g.buffer.features, opts_.glance_mode);
    g.ids = decode_greedy(model_.lm, prefix, caption_context(), max_new(), /*use_cache=*/true);
    return g;
  }

  std::vector<int> refine(const FeatureBuffer<T>& buffer, const std::vector<int>& caption_in) const {
    if (!buffer.populated()) throw std::invalid_argument("refine: feature buffer is empty");
    if (caption_in.empty()) throw std::invalid_argument("refine: empty input caption");
    NoGradGuard no_grad;
    const Tensor<T> prefix = refine_prefix(model_, buffer.features, caption_in);
    return decode_greedy(model_.lm, prefix, refine_context(caption_in), max_new(), /*use_cache=*/true);
  }

  std::vector<int> refine(const FeatureBuffer<T>& buffer, const std::string& caption_in) const {
    return refine(buffer, model_.vocab.encode(split_words(caption_in)));
  }

  double initial_logprob(const FeatureBuffer<T>& buffer, const std::vector<int>& ids) const {
    const Tensor<T> prefix = [&] {
      NoGradGuard g;
      return glance_prefix(model_, buffer.features, opts_.glance_mode);
    }();
    return sequence_logprob(model_.lm, prefix, caption_context(), with_eos(ids));
  }

  double refined_logprob(const FeatureBuffer<T>& buffer, const std::vector<int>& in, const std::vector<int>& out) const {
    const Tensor<T> prefix = [&] {
      NoGradGuard g;
      return refine_prefix(model_, buffer.features, in);
    }();
    return sequence_logprob(model_.lm, prefix, refine_context(in), with_eos(out));
  }

  /// One encoder pass, then `iterations` refinements each fed the previous
  /// output. A fixed point (or an empty caption) ends the loop early; the
  /// remaining entries repeat the last caption.
  CaptionResult caption(const Image& image, std::size_t iterations, std::int64_t image_id = -1) const {
    if (iterations > opts_.max_iterations) {
      throw std::invalid_argument("caption: " + std::to_string(iterations) + " iterations exceeds maximum " +
                                  std::to_string(opts_.max_iterations));
    }
    CaptionResult r;
    Glance g = glance(image, image_id);
    r.o_initial = join_words(model_.vocab.decode(g.ids));
    r.initial_logprob = initial_logprob(g.buffer, g.ids);
    const std::uint64_t blocks_before = model_.vision.counters().block_forwards.load();
    std::vector<int> current = g.ids;
    double current_lp = r.initial_logprob;
    bool settled = current.empty();
    for (std::size_t it = 0; it < iterations; ++it) {
      if (!settled) {
        std::vector<int> next = refine(g.buffer, current);
        current_lp = refined_logprob(g.buffer, current, next);
        settled = next == current || next.empty();
        current = std::move(next);
      }
      r.o_refined.push_back(join_words(model_.vocab.decode(current)));
      r.refined_logprob.push_back(current_lp);
    }
    r.refine_block_forwards = model_.vision.counters().block_forwards.load() - blocks_before;
    r.encoder_forward_count = g.buffer.encoder_forward_count;
    return r;
  }

 private:
  const ModelBundle<T>& model_;
  PipelineOptions opts_;
};

}  // namespace ser
