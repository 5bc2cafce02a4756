#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ser/lm.hpp"
#include "ser/rng.hpp"
#include "ser/vision.hpp"

namespace ser {

// Shapes-world grammar and rendering.
inline const std::vector<std::string>& shape_words() {
  static const std::vector<std::string> v{"circle", "square", "triangle"};
  return v;
}
inline const std::vector<std::string>& color_words() {
  static const std::vector<std::string> v{"red", "green", "blue", "yellow"};
  return v;
}
inline const std::vector<std::string>& size_words() {
  static const std::vector<std::string> v{"small", "large"};
  return v;
}
// Single-token relations so substitutions keep caption length.
inline const std::vector<std::string>& relation_words() {
  static const std::vector<std::string> v{"left-of", "right-of", "above", "below"};
  return v;
}

inline constexpr std::size_t kGridCells = 4;
inline constexpr std::size_t kMaxObjects = 4;

enum class Shape3 : std::uint8_t { Circle, Square, Triangle };
enum class Color : std::uint8_t { Red, Green, Blue, Yellow };
enum class Size : std::uint8_t { Small, Large };

struct SceneObject {
  Shape3 shape = Shape3::Circle;
  Color color = Color::Red;
  Size size = Size::Small;
  std::size_t cell = 0;  // row * 4 + col on the 4x4 grid
  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::int64_t id = 0;
  std::vector<SceneObject> objects;  // raster order by cell
  bool operator==(const Scene&) const = default;

  void validate() const {
    if (objects.empty() || objects.size() > kMaxObjects) throw std::invalid_argument("scene: 1-4 objects required");
    std::set<std::size_t> cells;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      if (objects[i].cell >= kGridCells * kGridCells) throw std::invalid_argument("scene: cell out of range");
      if (!cells.insert(objects[i].cell).second) throw std::invalid_argument("scene: duplicate cell");
      if (i && objects[i].cell < objects[i - 1].cell) throw std::invalid_argument("scene: objects not in raster order");
    }
  }
};

enum class SlotTag : std::uint8_t { None, Entity, Attribute, Relation, Action };

inline const char* tag_name(SlotTag t) {
  switch (t) {
    case SlotTag::Entity: return "ENTITY";
    case SlotTag::Attribute: return "ATTRIBUTE";
    case SlotTag::Relation: return "RELATION";
    case SlotTag::Action: return "ACTION";
    case SlotTag::None: break;
  }
  return "NONE";
}

inline SlotTag parse_tag(const std::string& s) {
  if (s == "NONE") return SlotTag::None;
  if (s == "ENTITY") return SlotTag::Entity;
  if (s == "ATTRIBUTE") return SlotTag::Attribute;
  if (s == "RELATION") return SlotTag::Relation;
  if (s == "ACTION") return SlotTag::Action;
  throw std::invalid_argument("unknown slot tag '" + s + "'");
}

struct TaggedCaption {
  std::vector<std::string> tokens;
  std::vector<SlotTag> tags;
  bool operator==(const TaggedCaption&) const = default;

  std::string text() const {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) s += (i ? " " : "") + tokens[i];
    return s;
  }
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(w));
  }
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) s += (i ? " " : "") + words[i];
  return s;
}

inline Vocabulary shapes_vocabulary() {
  std::vector<std::string> words{"a", "and"};
  for (const auto* list : {&size_words(), &color_words(), &shape_words(), &relation_words()})
    words.insert(words.end(), list->begin(), list->end());
  return Vocabulary(words);
}

// Longest caption: 4 objects x 4 words + relation + 2 joiners.
inline constexpr std::size_t kMaxCaptionTokens = kMaxObjects * 4 + (kMaxObjects - 1);

inline Scene gen_scene(std::uint64_t seed, std::int64_t id = 0) {
  Rng rng(seed);
  Scene s;
  s.id = id;
  const std::size_t count = 1 + static_cast<std::size_t>(rng.below(kMaxObjects));
  std::array<std::size_t, kGridCells * kGridCells> cells{};
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(cells.size() - i));
    std::swap(cells[i], cells[j]);
    SceneObject o;
    o.shape = static_cast<Shape3>(rng.below(3));
    o.color = static_cast<Color>(rng.below(4));
    o.size = static_cast<Size>(rng.below(2));
    o.cell = cells[i];
    s.objects.push_back(o);
  }
  std::sort(s.objects.begin(), s.objects.end(), [](const auto& a, const auto& b) { return a.cell < b.cell; });
  return s;
}

inline std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::Red: return {1.0f, 0.0f, 0.0f};
    case Color::Green: return {0.0f, 0.75f, 0.0f};
    case Color::Blue: return {0.0f, 0.0f, 1.0f};
    case Color::Yellow: return {1.0f, 0.85f, 0.0f};
  }
  return {0.0f, 0.0f, 0.0f};
}

inline constexpr std::size_t kSmallGlyph = 4;
inline constexpr std::size_t kLargeGlyph = 7;

// Whether glyph pixel (y, x) of an s-pixel glyph is inked.
inline bool glyph_covers(Shape3 shape, std::size_t s, std::size_t y, std::size_t x) {
  const double cy = y + 0.5, cx = x + 0.5, half = s / 2.0;
  switch (shape) {
    case Shape3::Square: return true;
    case Shape3::Circle: return (cy - half) * (cy - half) + (cx - half) * (cx - half) <= half * half + 0.25;
    case Shape3::Triangle: return std::abs(cx - half) <= half * (y + 1) / static_cast<double>(s);
  }
  return false;
}

/// White background, one glyph centered in each occupied 8x8 cell.
inline Image render(const Scene& scene, std::size_t image_size = 32) {
  scene.validate();
  Image img(image_size, 1.0f);
  const std::size_t cell_px = image_size / kGridCells;
  for (const auto& o : scene.objects) {
    const std::size_t s = o.size == Size::Small ? kSmallGlyph : kLargeGlyph;
    const std::size_t oy = (o.cell / kGridCells) * cell_px + (cell_px - s) / 2;
    const std::size_t ox = (o.cell % kGridCells) * cell_px + (cell_px - s) / 2;
    const auto rgb = color_rgb(o.color);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        if (glyph_covers(o.shape, s, y, x))
          for (std::size_t ch = 0; ch < 3; ++ch) img.at(oy + y, ox + x, ch) = rgb[ch];
  }
  return img;
}

/// Spatial relation of the first object to the second (first precedes second in raster order).
inline const std::string& relation_between(const SceneObject& first, const SceneObject& second) {
  const auto r1 = static_cast<long>(first.cell / kGridCells), c1 = static_cast<long>(first.cell % kGridCells);
  const auto r2 = static_cast<long>(second.cell / kGridCells), c2 = static_cast<long>(second.cell % kGridCells);
  const long drow = r2 - r1, dcol = c2 - c1;
  const auto& rel = relation_words();
  if (drow == 0 || std::abs(dcol) > drow) return dcol > 0 ? rel[0] : rel[1];
  return rel[2];
}

inline TaggedCaption caption_of(const Scene& scene) {
  scene.validate();
  TaggedCaption c;
  auto push = [&](const std::string& w, SlotTag t) {
    c.tokens.push_back(w);
    c.tags.push_back(t);
  };
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (i == 1) push(relation_between(scene.objects[0], scene.objects[1]), SlotTag::Relation);
    else if (i > 1) push("and", SlotTag::None);
    push("a", SlotTag::None);
    push(size_words()[static_cast<std::size_t>(o.size)], SlotTag::Attribute);
    push(color_words()[static_cast<std::size_t>(o.color)], SlotTag::Attribute);
    push(shape_words()[static_cast<std::size_t>(o.shape)], SlotTag::Entity);
  }
  return c;
}

/// Values interchangeable at one slot, e.g. the colors.
struct SlotClass {
  SlotTag tag = SlotTag::None;
  std::vector<std::string> values;
};

inline std::vector<SlotClass> shapes_slot_classes() {
  return {{SlotTag::Attribute, size_words()},
          {SlotTag::Attribute, color_words()},
          {SlotTag::Entity, shape_words()},
          {SlotTag::Relation, relation_words()}};
}

struct RefinementTriple {
  std::int64_t scene_id = -1;
  TaggedCaption target;                  // ground truth c_k
  TaggedCaption pseudo_initial;          // corrupted copy
  std::vector<std::size_t> edit_positions;  // ascending
  std::size_t edit_count = 0;
  std::vector<SlotTag> categories;       // tag of each edited position, same order
};

inline const std::array<double, 4>& edit_count_weights() {
  static const std::array<double, 4> w{0.15, 0.40, 0.30, 0.15};
  return w;
}

// Positions whose token can be swapped for another value of its class.
inline std::vector<std::size_t> editable_positions(const TaggedCaption& c, const std::vector<SlotClass>& classes) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.tokens.size(); ++i) {
    if (c.tags[i] == SlotTag::None) continue;
    for (const auto& cls : classes) {
      if (cls.tag == c.tags[i] && cls.values.size() > 1 &&
          std::find(cls.values.begin(), cls.values.end(), c.tokens[i]) != cls.values.end()) {
        out.push_back(i);
        break;
      }
    }
  }
  return out;
}

/// Substitutes `edits` distinct tagged slots (clamped to what is editable).
inline RefinementTriple corrupt_n(const TaggedCaption& caption, std::size_t edits, Rng& rng,
                                  const std::vector<SlotClass>& classes = shapes_slot_classes(),
                                  std::int64_t scene_id = -1) {
  if (caption.tokens.size() != caption.tags.size()) throw std::invalid_argument("corrupt: tokens/tags length mismatch");
  RefinementTriple t;
  t.scene_id = scene_id;
  t.target = caption;
  t.pseudo_initial = caption;
  auto eligible = editable_positions(caption, classes);
  edits = std::min(edits, eligible.size());
  for (std::size_t i = 0; i < edits; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  std::vector<std::size_t> chosen(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(edits));
  std::sort(chosen.begin(), chosen.end());
  for (const std::size_t pos : chosen) {
    const std::string& old = caption.tokens[pos];
    const SlotClass* cls = nullptr;
    for (const auto& c : classes) {
      if (c.tag == caption.tags[pos] && std::find(c.values.begin(), c.values.end(), old) != c.values.end()) {
        cls = &c;
        break;
      }
    }
    std::vector<std::string> alternatives;
    for (const auto& v : cls->values)
      if (v != old) alternatives.push_back(v);
    t.pseudo_initial.tokens[pos] = alternatives[static_cast<std::size_t>(rng.below(alternatives.size()))];
    t.edit_positions.push_back(pos);
    t.categories.push_back(caption.tags[pos]);
  }
  t.edit_count = edits;
  return t;
}

/// Draws an edit count in 0..3 and applies that many substitutions.
inline RefinementTriple corrupt(const TaggedCaption& caption, std::uint64_t seed,
                                const std::vector<SlotClass>& classes = shapes_slot_classes(),
                                std::int64_t scene_id = -1) {
  Rng rng(seed);
  double u = rng.uniform();
  std::size_t e = 0;
  const auto& w = edit_count_weights();
  while (e + 1 < w.size() && u >= w[e]) u -= w[e++];
  return corrupt_n(caption, e, rng, classes, scene_id);
}

inline std::vector<std::size_t> positional_diff(const TaggedCaption& a, const TaggedCaption& b) {
  if (a.tokens.size() != b.tokens.size()) throw std::invalid_argument("positional_diff: length mismatch");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < a.tokens.size(); ++i)
    if (a.tokens[i] != b.tokens[i]) out.push_back(i);
  return out;
}

inline constexpr std::size_t kPseudoInitialsPerCaption = 3;

struct DatasetRecord {
  Scene scene;
  TaggedCaption caption;
  std::vector<RefinementTriple> pseudo_initials;
  std::uint64_t seed = 0;
  bool operator==(const DatasetRecord& o) const {
    if (!(scene == o.scene && caption == o.caption && seed == o.seed &&
          pseudo_initials.size() == o.pseudo_initials.size()))
      return false;
    for (std::size_t i = 0; i < pseudo_initials.size(); ++i) {
      const auto &a = pseudo_initials[i], &b = o.pseudo_initials[i];
      if (!(a.pseudo_initial == b.pseudo_initial && a.edit_positions == b.edit_positions &&
            a.categories == b.categories))
        return false;
    }
    return true;
  }
};

/// Scene, caption and three pseudo-initials, all derived from `seed`.
inline DatasetRecord make_record(std::uint64_t seed, std::int64_t id) {
  DatasetRecord r;
  r.seed = seed;
  r.scene = gen_scene(mix_seed(seed, 0), id);
  r.caption = caption_of(r.scene);
  for (std::size_t k = 0; k < kPseudoInitialsPerCaption; ++k)
    r.pseudo_initials.push_back(corrupt(r.caption, mix_seed(seed, k + 1), shapes_slot_classes(), id));
  return r;
}

inline std::vector<DatasetRecord> generate_records(std::uint64_t base_seed, std::int64_t first_id, std::size_t count) {
  std::vector<DatasetRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::int64_t id = first_id + static_cast<std::int64_t>(i);
    out.push_back(make_record(mix_seed(base_seed, static_cast<std::uint64_t>(id)), id));
  }
  return out;
}

class DatasetError : public std::runtime_error {
 public:
  DatasetError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson tags_json(const std::vector<SlotTag>& tags) {
  ojson a = ojson::array();
  for (const auto t : tags) a.push_back(tag_name(t));
  return a;
}

inline std::vector<SlotTag> tags_from(const ojson& a) {
  std::vector<SlotTag> out;
  for (const auto& t : a) out.push_back(parse_tag(t.get<std::string>()));
  return out;
}

template <typename E>
E word_enum(const std::vector<std::string>& words, const std::string& w) {
  const auto it = std::find(words.begin(), words.end(), w);
  if (it == words.end()) throw std::invalid_argument("unknown value '" + w + "'");
  return static_cast<E>(it - words.begin());
}

}  // namespace detail

inline nlohmann::ordered_json record_to_json(const DatasetRecord& r) {
  using detail::ojson;
  ojson objects = ojson::array();
  for (const auto& o : r.scene.objects) {
    ojson jo;
    jo["shape"] = shape_words()[static_cast<std::size_t>(o.shape)];
    jo["color"] = color_words()[static_cast<std::size_t>(o.color)];
    jo["size"] = size_words()[static_cast<std::size_t>(o.size)];
    jo["cell"] = o.cell;
    objects.push_back(std::move(jo));
  }
  ojson j;
  j["scene"]["objects"] = std::move(objects);
  j["scene"]["id"] = r.scene.id;
  j["caption"]["tokens"] = r.caption.tokens;
  j["caption"]["tags"] = detail::tags_json(r.caption.tags);
  ojson pis = ojson::array();
  for (const auto& p : r.pseudo_initials) {
    ojson jp;
    jp["tokens"] = p.pseudo_initial.tokens;
    jp["tags"] = detail::tags_json(p.pseudo_initial.tags);
    jp["edit_positions"] = p.edit_positions;
    jp["categories"] = detail::tags_json(p.categories);
    pis.push_back(std::move(jp));
  }
  j["pseudo_initials"] = std::move(pis);
  j["seed"] = r.seed;
  return j;
}

inline DatasetRecord record_from_json(const nlohmann::ordered_json& j) {
  DatasetRecord r;
  for (const auto& jo : j.at("scene").at("objects")) {
    SceneObject o;
    o.shape = detail::word_enum<Shape3>(shape_words(), jo.at("shape").get<std::string>());
    o.color = detail::word_enum<Color>(color_words(), jo.at("color").get<std::string>());
    o.size = detail::word_enum<Size>(size_words(), jo.at("size").get<std::string>());
    o.cell = jo.at("cell").get<std::size_t>();
    r.scene.objects.push_back(o);
  }
  r.scene.id = j.at("scene").at("id").get<std::int64_t>();
  r.scene.validate();
  r.caption.tokens = j.at("caption").at("tokens").get<std::vector<std::string>>();
  r.caption.tags = detail::tags_from(j.at("caption").at("tags"));
  if (r.caption.tokens.size() != r.caption.tags.size()) throw std::invalid_argument("caption tokens/tags mismatch");
  const auto& pis = j.at("pseudo_initials");
  if (pis.size() != kPseudoInitialsPerCaption)
    throw std::invalid_argument("expected 3 pseudo-initials, found " + std::to_string(pis.size()));
  for (const auto& jp : pis) {
    RefinementTriple t;
    t.scene_id = r.scene.id;
    t.target = r.caption;
    t.pseudo_initial.tokens = jp.at("tokens").get<std::vector<std::string>>();
    t.pseudo_initial.tags = detail::tags_from(jp.at("tags"));
    t.edit_positions = jp.at("edit_positions").get<std::vector<std::size_t>>();
    t.categories = detail::tags_from(jp.at("categories"));
    t.edit_count = t.edit_positions.size();
    if (t.pseudo_initial.tokens.size() != r.caption.tokens.size())
      throw std::invalid_argument("pseudo-initial length differs from caption");
    r.pseudo_initials.push_back(std::move(t));
  }
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

inline void write_dataset(const std::vector<DatasetRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

inline std::vector<DatasetRecord> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  std::vector<DatasetRecord> out;
  std::set<std::int64_t> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    DatasetRecord r;
    try {
      r = record_from_json(nlohmann::ordered_json::parse(line));
    } catch (const std::exception& e) {
      throw DatasetError(lineno, std::string("malformed record: ") + e.what());
    }
    if (!ids.insert(r.scene.id).second) throw DatasetError(lineno, "duplicate scene id " + std::to_string(r.scene.id));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ser
