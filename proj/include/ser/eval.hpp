#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ser/data.hpp"

namespace ser {

struct EvalItem {
  std::int64_t image_id = 0;
  std::string candidate;
  std::vector<std::string> references;
};

using EvalCorpus = std::vector<EvalItem>;

using NGram = std::vector<std::string>;
using NGramCounts = std::map<NGram, double>;

inline NGramCounts ngram_counts(const std::vector<std::string>& words, std::size_t n) {
  NGramCounts out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) out[NGram(words.begin() + i, words.begin() + i + n)] += 1.0;
  return out;
}

inline void validate_corpus(const EvalCorpus& corpus) {
  if (corpus.empty()) throw std::invalid_argument("eval: empty corpus");
  for (const auto& item : corpus) {
    if (item.references.empty())
      throw std::invalid_argument("eval: image " + std::to_string(item.image_id) + " has no reference");
  }
}

/// Corpus BLEU-4: clipped n-gram precisions pooled over the corpus,
/// geometric mean, brevity penalty against the closest reference length.
/// No smoothing, so any empty precision gives 0.
inline double bleu4(const EvalCorpus& corpus) {
  validate_corpus(corpus);
  double matched[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  double cand_len = 0.0, ref_len = 0.0;
  for (const auto& item : corpus) {
    const auto cand = split_words(item.candidate);
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : item.references) refs.push_back(split_words(r));
    cand_len += static_cast<double>(cand.size());
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
      const auto diff = [&](std::size_t len) {
        return std::abs(static_cast<long>(len) - static_cast<long>(cand.size()));
      };
      if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cc = ngram_counts(cand, n);
      NGramCounts max_ref;
      for (const auto& r : refs)
        for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
      for (const auto& [g, c] : cc) {
        total[n - 1] += c;
        const auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (total[n] == 0.0 || matched[n] == 0.0) return 0.0;
    log_sum += std::log(matched[n] / total[n]);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / 4.0);
}

struct CiderParams {
  double sigma = 6.0;
  double scale = 10.0;
  std::size_t max_n = 4;
};

struct CiderResult {
  double mean = 0.0;
  std::vector<double> per_image;
};

/// CIDEr-D: clipped TF-IDF cosine per n-gram order with a Gaussian length
/// penalty, averaged over orders and references, times 10. IDF comes from
/// the reference sets of the whole corpus. Orders for which a reference has
/// no n-grams (captions shorter than n) are left out of that reference's
/// average.
inline CiderResult cider(const EvalCorpus& corpus, const CiderParams& params = {}) {
  validate_corpus(corpus);
  if (corpus.size() < 2) throw std::invalid_argument("cider: need at least two images for document frequencies");
  const std::size_t orders = params.max_n;
  std::vector<std::map<NGram, double>> df(orders);
  for (const auto& item : corpus) {
    for (std::size_t n = 1; n <= orders; ++n) {
      std::set<NGram> seen;
      for (const auto& r : item.references)
        for (const auto& [g, c] : ngram_counts(split_words(r), n)) seen.insert(g);
      for (const auto& g : seen) df[n - 1][g] += 1.0;
    }
  }
  const double log_docs = std::log(static_cast<double>(corpus.size()));

  struct Vec {
    std::map<NGram, double> w;
    double norm = 0.0;
  };
  auto vectorize = [&](const std::vector<std::string>& words) {
    std::vector<Vec> out(orders);
    for (std::size_t n = 1; n <= orders; ++n) {
      for (const auto& [g, tf] : ngram_counts(words, n)) {
        const auto it = df[n - 1].find(g);
        const double d = it == df[n - 1].end() ? 0.0 : it->second;
        const double weight = tf * (log_docs - std::log(std::max(1.0, d)));
        out[n - 1].w[g] = weight;
        out[n - 1].norm += weight * weight;
      }
      out[n - 1].norm = std::sqrt(out[n - 1].norm);
    }
    return out;
  };

  CiderResult result;
  for (const auto& item : corpus) {
    const auto cand_words = split_words(item.candidate);
    const auto cand = vectorize(cand_words);
    double score = 0.0;
    for (const auto& ref_text : item.references) {
      const auto ref_words = split_words(ref_text);
      const auto ref = vectorize(ref_words);
      const double delta = static_cast<double>(cand_words.size()) - static_cast<double>(ref_words.size());
      const double penalty = std::exp(-(delta * delta) / (2.0 * params.sigma * params.sigma));
      double sum = 0.0;
      std::size_t used = 0;
      for (std::size_t n = 0; n < orders; ++n) {
        if (ref[n].w.empty()) continue;
        ++used;
        double val = 0.0;
        for (const auto& [g, wc] : cand[n].w) {
          const auto it = ref[n].w.find(g);
          if (it != ref[n].w.end()) val += std::min(wc, it->second) * it->second;
        }
        if (cand[n].norm != 0.0 && ref[n].norm != 0.0) val /= cand[n].norm * ref[n].norm;
        sum += val * penalty;
      }
      if (used) score += sum / static_cast<double>(used);
    }
    score = score / static_cast<double>(item.references.size()) * params.scale;
    result.per_image.push_back(score);
    result.mean += score;
  }
  result.mean /= static_cast<double>(corpus.size());
  return result;
}

struct SlotCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::optional<double> ratio() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(total);
  }
  SlotCount& operator+=(const SlotCount& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
};

struct SlotScore {
  SlotCount entity, attribute, relation;
  bool parse_failure = false;

  SlotCount overall_count() const {
    SlotCount s = entity;
    s += attribute;
    s += relation;
    return s;
  }
  double overall() const { return overall_count().ratio().value_or(0.0); }
  SlotScore& operator+=(const SlotScore& o) {
    entity += o.entity;
    attribute += o.attribute;
    relation += o.relation;
    return *this;
  }
};

struct ParsedObject {
  std::string size, color, shape;
};

struct ParsedCaption {
  std::vector<ParsedObject> objects;
  std::optional<std::string> relation;  // connector between the first two objects
};

/// Greedy left-to-right parse against the shapes grammar; stops at the
/// first token that does not fit.
inline ParsedCaption parse_caption(const std::vector<std::string>& words) {
  auto in = [](const std::vector<std::string>& list, const std::string& w) {
    return std::find(list.begin(), list.end(), w) != list.end();
  };
  ParsedCaption out;
  std::size_t p = 0;
  while (p + 4 <= words.size() && words[p] == "a" && in(size_words(), words[p + 1]) &&
         in(color_words(), words[p + 2]) && in(shape_words(), words[p + 3])) {
    out.objects.push_back({words[p + 1], words[p + 2], words[p + 3]});
    p += 4;
    if (p >= words.size()) break;
    if (out.objects.size() == 1 && in(relation_words(), words[p])) out.relation = words[p];
    else if (out.objects.size() == 1 || words[p] != "and") break;
    ++p;
  }
  return out;
}

/// Fraction of the scene's grammar slots the candidate verbalizes correctly,
/// objects aligned by raster order.
inline SlotScore slot_accuracy(const std::string& candidate, const Scene& scene) {
  scene.validate();
  SlotScore s;
  const auto parsed = parse_caption(split_words(candidate));
  s.parse_failure = parsed.objects.empty();
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    const ParsedObject* got = i < parsed.objects.size() ? &parsed.objects[i] : nullptr;
    s.attribute.total += 2;
    s.entity.total += 1;
    if (!got) continue;
    s.attribute.correct += got->size == size_words()[static_cast<std::size_t>(o.size)];
    s.attribute.correct += got->color == color_words()[static_cast<std::size_t>(o.color)];
    s.entity.correct += got->shape == shape_words()[static_cast<std::size_t>(o.shape)];
  }
  if (scene.objects.size() >= 2) {
    s.relation.total = 1;
    s.relation.correct = parsed.relation && *parsed.relation == relation_between(scene.objects[0], scene.objects[1]);
  }
  return s;
}

}  // namespace ser
