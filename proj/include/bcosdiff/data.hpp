#pragma once

#include "bcosdiff/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace bcosdiff {

enum class WordKind : std::uint8_t { kSpecial, kFiller, kSize, kColor, kShape };

const char* word_kind_name(WordKind k);
inline bool is_content(WordKind k) { return k == WordKind::kSize || k == WordKind::kColor || k == WordKind::kShape; }

/// Tokenized prompt of fixed length. SOS, EOS and padding are present as ids
/// but never unmasked.
struct Prompt {
  std::string text;
  std::vector<int> ids;
  std::vector<char> mask;
  std::vector<std::string> tokens;

  Index length() const { return static_cast<Index>(ids.size()); }
  Index active() const;
};

/// Fixed word-level vocabulary. Ids 0..2 are [PAD], [SOS], [EOS].
class Vocabulary {
 public:
  static constexpr int kPad = 0, kSos = 1, kEos = 2;

  struct Entry {
    std::string word;
    WordKind kind;
  };

  Vocabulary() = default;
  explicit Vocabulary(std::vector<Entry> words);

  /// Specials, filler words, sizes, colors and shapes of the synthetic scenes.
  static Vocabulary standard();

  int size() const { return static_cast<int>(entries_.size()); }
  const Entry& entry(int id) const { return entries_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& word) const;
  bool contains(const std::string& word) const;

  /// Lowercases, splits on whitespace and detaches '.', then lays out
  /// [SOS] words [EOS] [PAD]... over `max_len` slots.
  Prompt encode(const std::string& text, Index max_len) const;

  std::string serialize() const;
  static Vocabulary parse(const std::string& text);

  bool operator==(const Vocabulary& o) const { return serialize() == o.serialize(); }

 private:
  std::string listing() const;
  std::vector<Entry> entries_;
};

/// Masks every token of the given kind (used for ablations).
Prompt mask_kind(const Prompt& p, const Vocabulary& v, WordKind kind);

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class ShapeKind : std::uint8_t { kCircle, kSquare, kTriangle, kCross, kRing };
enum class ColorKind : std::uint8_t { kRed, kGreen, kBlue, kYellow, kMagenta };
enum class Placement : std::uint8_t { kCenter, kTopLeft, kTopRight, kBottomLeft, kBottomRight };
enum class SizeKind : std::uint8_t { kSmall, kLarge };

inline constexpr std::array<ShapeKind, 5> kShapes{ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle,
                                                  ShapeKind::kCross, ShapeKind::kRing};
inline constexpr std::array<ColorKind, 5> kColors{ColorKind::kRed, ColorKind::kGreen, ColorKind::kBlue,
                                                  ColorKind::kYellow, ColorKind::kMagenta};

const char* shape_name(ShapeKind s);
const char* color_name(ColorKind c);
const char* placement_name(Placement p);
const char* size_name(SizeKind s);
std::array<double, 3> color_rgb(ColorKind c);
ColorKind color_from_name(const std::string& name);

inline constexpr double kBackgroundLevel = 0.2;

struct SceneSpec {
  ShapeKind shape = ShapeKind::kCircle;
  ColorKind color = ColorKind::kRed;
  Placement placement = Placement::kCenter;
  SizeKind size = SizeKind::kSmall;
  bool operator==(const SceneSpec&) const = default;
};

std::uint64_t spec_hash(const SceneSpec& s);

/// Fraction of the canvas a shape of this size should cover.
double target_coverage(SizeKind s);

/// Rasterizes the scene without anti-aliasing: [3,H,W] in [0,1], dark gray
/// background, exact palette color inside the shape.
Tensor<double> render_scene(const SceneSpec& spec, Index height, Index width);

/// Shape indicator of render_scene: 1 inside, 0 outside, [H,W].
Tensor<double> scene_mask(const SceneSpec& spec, Index height, Index width);

enum class Split : std::uint8_t { kTrain, kEval };
const char* split_name(Split s);

struct Example {
  SceneSpec spec;
  std::string caption;
  Split split;
};

/// Caption templates with {size}, {color}, {shape} slots. Evaluation
/// templates never occur in training.
const std::vector<std::string>& train_templates();
const std::vector<std::string>& eval_templates();
std::string fill_template(const std::string& tmpl, const SceneSpec& s);

/// All renderable specs, split disjointly by spec hash.
std::vector<SceneSpec> all_specs();
Split spec_split(const SceneSpec& s);

/// Training set: train specs x train templates. Evaluation set: eval specs x
/// eval templates.
std::vector<Example> build_dataset(Split split);

/// One JSON record per line.
std::string dataset_manifest(const Vocabulary& vocab, Index max_tokens);

}  // namespace bcosdiff
