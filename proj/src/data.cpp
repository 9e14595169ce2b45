#include "bcosdiff/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <sstream>

namespace bcosdiff {

const char* word_kind_name(WordKind k) {
  switch (k) {
    case WordKind::kSpecial: return "special";
    case WordKind::kFiller: return "filler";
    case WordKind::kSize: return "size";
    case WordKind::kColor: return "color";
    case WordKind::kShape: return "shape";
  }
  return "?";
}

static WordKind parse_kind(const std::string& s) {
  for (auto k : {WordKind::kSpecial, WordKind::kFiller, WordKind::kSize, WordKind::kColor, WordKind::kShape}) {
    if (s == word_kind_name(k)) return k;
  }
  throw DataError("vocabulary: unknown word kind '" + s + "'");
}

Index Prompt::active() const { return std::count(mask.begin(), mask.end(), 1); }

Vocabulary::Vocabulary(std::vector<Entry> words) : entries_(std::move(words)) {
  if (entries_.size() < 3 || entries_[kPad].word != "[PAD]" || entries_[kSos].word != "[SOS]" || entries_[kEos].word != "[EOS]") {
    throw DataError("vocabulary must start with [PAD], [SOS], [EOS]");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (entries_[i].word == entries_[j].word) throw DataError("vocabulary: duplicate word '" + entries_[i].word + "'");
    }
  }
}

Vocabulary Vocabulary::standard() {
  std::vector<Entry> e{{"[PAD]", WordKind::kSpecial}, {"[SOS]", WordKind::kSpecial}, {"[EOS]", WordKind::kSpecial}};
  for (const char* w : {"a", "the", "with", "on", "photo", "stock", "free", "."}) e.push_back({w, WordKind::kFiller});
  for (auto s : {SizeKind::kSmall, SizeKind::kLarge}) e.push_back({size_name(s), WordKind::kSize});
  for (auto c : kColors) e.push_back({color_name(c), WordKind::kColor});
  for (auto s : kShapes) e.push_back({shape_name(s), WordKind::kShape});
  return Vocabulary(std::move(e));
}

int Vocabulary::id(const std::string& word) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].word == word) return static_cast<int>(i);
  }
  throw DataError("unknown word '" + word + "'; vocabulary: " + listing());
}

bool Vocabulary::contains(const std::string& word) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.word == word; });
}

std::string Vocabulary::listing() const {
  std::string out;
  for (std::size_t i = 3; i < entries_.size(); ++i) out += (i > 3 ? " " : "") + entries_[i].word;
  return out;
}

Prompt Vocabulary::encode(const std::string& text, Index max_len) const {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else if (ch == '.') {
      flush();
      words.emplace_back(".");
    } else {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  flush();
  if (words.empty()) throw DataError("prompt is empty after masking special tokens");
  if (static_cast<Index>(words.size()) + 2 > max_len) {
    throw DataError("prompt has " + std::to_string(words.size()) + " words; at most " + std::to_string(max_len - 2) + " fit");
  }
  Prompt p;
  p.text = text;
  p.ids.assign(static_cast<std::size_t>(max_len), kPad);
  p.mask.assign(static_cast<std::size_t>(max_len), 0);
  p.ids[0] = kSos;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const int wid = id(words[i]);
    if (entry(wid).kind == WordKind::kSpecial) throw DataError("special token '" + words[i] + "' in prompt text");
    p.ids[i + 1] = wid;
    p.mask[i + 1] = 1;
  }
  p.ids[words.size() + 1] = kEos;
  for (int id : p.ids) p.tokens.push_back(entry(id).word);
  return p;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& e : entries_) out += e.word + " " + word_kind_name(e.kind) + "\n";
  return out;
}

Vocabulary Vocabulary::parse(const std::string& text) {
  std::istringstream is(text);
  std::vector<Entry> e;
  std::string word, kind;
  while (is >> word >> kind) e.push_back({word, parse_kind(kind)});
  return Vocabulary(std::move(e));
}

Prompt mask_kind(const Prompt& p, const Vocabulary& v, WordKind kind) {
  Prompt out = p;
  for (std::size_t i = 0; i < out.ids.size(); ++i) {
    if (v.entry(out.ids[i]).kind == kind) out.mask[i] = 0;
  }
  return out;
}

// ---------------------------------------------------------------------------

const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kRing: return "ring";
  }
  return "?";
}

const char* color_name(ColorKind c) {
  switch (c) {
    case ColorKind::kRed: return "red";
    case ColorKind::kGreen: return "green";
    case ColorKind::kBlue: return "blue";
    case ColorKind::kYellow: return "yellow";
    case ColorKind::kMagenta: return "magenta";
  }
  return "?";
}

const char* placement_name(Placement p) {
  switch (p) {
    case Placement::kCenter: return "center";
    case Placement::kTopLeft: return "top-left";
    case Placement::kTopRight: return "top-right";
    case Placement::kBottomLeft: return "bottom-left";
    case Placement::kBottomRight: return "bottom-right";
  }
  return "?";
}

const char* size_name(SizeKind s) { return s == SizeKind::kSmall ? "small" : "large"; }

std::array<double, 3> color_rgb(ColorKind c) {
  switch (c) {
    case ColorKind::kRed: return {1, 0, 0};
    case ColorKind::kGreen: return {0, 1, 0};
    case ColorKind::kBlue: return {0, 0, 1};
    case ColorKind::kYellow: return {1, 1, 0};
    case ColorKind::kMagenta: return {1, 0, 1};
  }
  return {0, 0, 0};
}

ColorKind color_from_name(const std::string& name) {
  for (auto c : kColors) {
    if (name == color_name(c)) return c;
  }
  throw DataError("unknown color '" + name + "'");
}

std::uint64_t spec_hash(const SceneSpec& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : {static_cast<std::uint8_t>(s.shape), static_cast<std::uint8_t>(s.color),
                 static_cast<std::uint8_t>(s.placement), static_cast<std::uint8_t>(s.size)}) {
    h = (h ^ b) * 0x100000001b3ULL;
  }
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdULL;
  return h ^ (h >> 33);
}

double target_coverage(SizeKind s) { return s == SizeKind::kSmall ? 0.12 : 0.30; }

namespace {

struct Geometry {
  double cx, cy;         // shape center in pixel coordinates
  double size;           // circle/ring radius, or square/triangle/cross side
  double half_extent;    // half of the bounding box side
  double x0, y0, x1, y1; // cell bounds
};

Geometry layout(const SceneSpec& spec, Index height, Index width) {
  if (height < 16 || width < 16) throw DataError("render_scene: canvas must be at least 16x16");
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  const double area = target_coverage(spec.size) * h * w;
  Geometry g{};
  switch (spec.placement) {
    case Placement::kCenter: g = {w / 2, h / 2, 0, 0, 0, 0, w, h}; break;
    case Placement::kTopLeft: g = {w / 4, h / 4, 0, 0, 0, 0, w / 2, h / 2}; break;
    case Placement::kTopRight: g = {3 * w / 4, h / 4, 0, 0, w / 2, 0, w, h / 2}; break;
    case Placement::kBottomLeft: g = {w / 4, 3 * h / 4, 0, 0, 0, h / 2, w / 2, h}; break;
    case Placement::kBottomRight: g = {3 * w / 4, 3 * h / 4, 0, 0, w / 2, h / 2, w, h}; break;
  }
  switch (spec.shape) {
    case ShapeKind::kCircle: g.size = std::sqrt(area / std::numbers::pi); g.half_extent = g.size; break;
    case ShapeKind::kSquare: g.size = std::sqrt(area); g.half_extent = g.size / 2; break;
    case ShapeKind::kTriangle: g.size = std::sqrt(2 * area); g.half_extent = g.size / 2; break;
    case ShapeKind::kCross: g.size = std::sqrt(9 * area / 5); g.half_extent = g.size / 2; break;
    case ShapeKind::kRing: g.size = std::sqrt(4 * area / (3 * std::numbers::pi)); g.half_extent = g.size; break;
  }
  if (g.cx - g.half_extent < g.x0 || g.cx + g.half_extent > g.x1 || g.cy - g.half_extent < g.y0 ||
      g.cy + g.half_extent > g.y1) {
    throw DataError(std::string("render_scene: ") + size_name(spec.size) + " " + shape_name(spec.shape) +
                    " does not fit the " + placement_name(spec.placement) + " cell");
  }
  return g;
}

bool inside(const SceneSpec& spec, const Geometry& g, double px, double py) {
  const double dx = px - g.cx, dy = py - g.cy;
  const double s = g.size;
  switch (spec.shape) {
    case ShapeKind::kCircle: return dx * dx + dy * dy <= s * s;
    case ShapeKind::kSquare: return std::abs(dx) <= s / 2 && std::abs(dy) <= s / 2;
    case ShapeKind::kTriangle: {
      const double top = g.cy - s / 2;
      return py >= top && py <= g.cy + s / 2 && std::abs(dx) <= (py - top) / 2;
    }
    case ShapeKind::kCross:
      return (std::abs(dx) <= s / 6 && std::abs(dy) <= s / 2) || (std::abs(dy) <= s / 6 && std::abs(dx) <= s / 2);
    case ShapeKind::kRing: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= s * s && r2 >= s * s / 4;
    }
  }
  return false;
}

}  // namespace

Tensor<double> scene_mask(const SceneSpec& spec, Index height, Index width) {
  const Geometry g = layout(spec, height, width);
  Tensor<double> m({height, width});
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      m.at(y, x) = inside(spec, g, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) ? 1.0 : 0.0;
    }
  }
  const double coverage = m.array().sum() / static_cast<double>(height * width);
  if (coverage < 0.08 || coverage > 0.60) {
    throw DataError("render_scene: coverage " + std::to_string(coverage) + " outside [0.08, 0.60]");
  }
  return m;
}

Tensor<double> render_scene(const SceneSpec& spec, Index height, Index width) {
  const Tensor<double> m = scene_mask(spec, height, width);
  const auto rgb = color_rgb(spec.color);
  const Index plane = height * width;
  Tensor<double> img({3, height, width});
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < plane; ++i) img[c * plane + i] = m[i] > 0 ? rgb[c] : kBackgroundLevel;
  }
  return img;
}

const char* split_name(Split s) { return s == Split::kTrain ? "train" : "eval"; }

const std::vector<std::string>& train_templates() {
  static const std::vector<std::string> t{
      "a {size} {color} {shape} .",
      "the {color} {shape} on stock",
      "photo with a {color} {shape}",
      "{size} {color} {shape} free .",
      "{color} {shape} with the photo",
      "stock free {color} {shape}",
      "on a {size} {color} {shape}",
      "the {size} {color} {shape} with stock",
      "free photo on the {size} {color} {shape}",
      "with the photo on a {color} {shape}",
  };
  return t;
}

const std::vector<std::string>& eval_templates() {
  static const std::vector<std::string> t{
      "photo a {color} {shape} .",
      "free stock photo the {size} {color} {shape}",
      "a {color} {shape} with a photo",
  };
  return t;
}

std::string fill_template(const std::string& tmpl, const SceneSpec& s) {
  std::string out = tmpl;
  auto replace = [&](const std::string& key, const std::string& value) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key)) out.replace(pos, key.size(), value);
  };
  replace("{size}", size_name(s.size));
  replace("{color}", color_name(s.color));
  replace("{shape}", shape_name(s.shape));
  return out;
}

std::vector<SceneSpec> all_specs() {
  std::vector<SceneSpec> specs;
  for (auto shape : kShapes) {
    for (auto color : kColors) {
      specs.push_back({shape, color, Placement::kCenter, SizeKind::kLarge});
      for (auto p : {Placement::kCenter, Placement::kTopLeft, Placement::kTopRight, Placement::kBottomLeft,
                     Placement::kBottomRight}) {
        specs.push_back({shape, color, p, SizeKind::kSmall});
      }
    }
  }
  return specs;
}

Split spec_split(const SceneSpec& s) { return spec_hash(s) % 5 == 0 ? Split::kEval : Split::kTrain; }

std::vector<Example> build_dataset(Split split) {
  std::vector<Example> out;
  const auto& templates = split == Split::kTrain ? train_templates() : eval_templates();
  for (const auto& spec : all_specs()) {
    if (spec_split(spec) != split) continue;
    for (const auto& t : templates) out.push_back({spec, fill_template(t, spec), split});
  }
  return out;
}

std::string dataset_manifest(const Vocabulary& vocab, Index max_tokens) {
  std::string out;
  for (Split split : {Split::kTrain, Split::kEval}) {
    for (const auto& ex : build_dataset(split)) {
      const Prompt p = vocab.encode(ex.caption, max_tokens);
      nlohmann::json rec{{"shape", shape_name(ex.spec.shape)},
                         {"color", color_name(ex.spec.color)},
                         {"placement", placement_name(ex.spec.placement)},
                         {"size", size_name(ex.spec.size)},
                         {"caption", ex.caption},
                         {"tokens", p.tokens},
                         {"ids", p.ids},
                         {"split", split_name(split)}};
      out += rec.dump() + "\n";
    }
  }
  return out;
}

}  // namespace bcosdiff
