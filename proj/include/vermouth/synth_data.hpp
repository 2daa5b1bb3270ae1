#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vermouth/backbone.hpp"
#include "vermouth/tensor.hpp"

namespace vermouth {

enum class ShapeKind { kCircle, kSquare, kTriangle, kCross, kRing, kStar, kDiamond, kHexagon, kCrescent };
enum class ColorKind { kRed, kGreen, kBlue, kYellow, kMagenta, kCyan, kOrange, kPurple };
enum class Domain { kPhoto, kSketch };

std::string to_string(ShapeKind s);
std::string to_string(ColorKind c);
std::string to_string(Domain d);
ShapeKind parse_shape(const std::string& s);
ColorKind parse_color(const std::string& s);
const std::vector<ShapeKind>& all_shapes();
const std::vector<ColorKind>& all_colors();
// Nominal RGB in [0, 1].
std::array<double, 3> color_rgb(ColorKind c);

// A category is a shape, optionally pinned to one color ("red circle");
// unpinned categories draw photo colors from the palette.
struct Category {
  ShapeKind shape = ShapeKind::kCircle;
  std::optional<ColorKind> color;
  std::string name() const;
};
// "red circle" or "circle".
Category parse_category(const std::string& s);

struct ShapeRecord {
  ShapeKind shape = ShapeKind::kCircle;
  ColorKind color = ColorKind::kRed;
  int category = 0;
  double cx = 0, cy = 0;  // pixels, quantized to 1/64
  double radius = 0;      // pixels, quantized to 1/64
  double rotation = 0;    // radians, quantized to 1/1024 turn
};

struct SampleRecord {
  Tensor<float> image;  // (3, S, S) in [0, 1]
  std::string caption;
  int label = 0;
  std::optional<std::vector<int>> mask;  // S*S class ids, background 0
  Domain domain = Domain::kPhoto;
  std::vector<ShapeRecord> shapes;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<SampleRecord> samples;
};

struct DatasetSpec {
  std::vector<Category> categories;
  int n_per_class = 16;       // training samples per class
  int n_test_per_class = 16;
  int shots = 16;             // few-shot cap on training samples per class
  std::uint64_t seed = 0;
  // Indices into categories held out from training (zero-shot / unseen).
  std::vector<int> test_categories;
  int image_size = 64;
  double min_radius = 10.0;
  double max_radius = 18.0;
  double color_jitter = 0.08;
  double texture_amplitude = 0.15;
  int max_shapes = 3;  // segmentation scenes
  void validate() const;
};

// Coverage rule shared by every renderer: 4x4 supersamples per pixel at
// offsets (i + 0.5) / 4; fill uses the even-odd rule over the outline rings.
inline constexpr int kSupersample = 4;

std::vector<std::vector<std::array<double, 2>>> shape_outline(ShapeKind shape);
// Fraction of subsamples of pixel (x, y) inside the shape.
double fill_coverage(const ShapeRecord& s, int x, int y);

SampleRecord render_photo(const ShapeRecord& shape, int image_size, std::uint64_t seed, double color_jitter = 0.08,
                          double texture_amplitude = 0.15);
SampleRecord render_sketch(const ShapeRecord& shape, int image_size, std::uint64_t seed);

struct ClassificationSet {
  Dataset train;
  Dataset test;
};
ClassificationSet gen_classification_set(const DatasetSpec& spec);

struct SketchPhotoSet {
  std::vector<std::string> class_names;  // all categories
  std::vector<int> train_categories;
  std::vector<int> test_categories;
  Dataset train_photos;
  Dataset train_sketches;
  Dataset gallery;  // photos of held-out categories
  Dataset queries;  // sketches of held-out categories
};
SketchPhotoSet gen_sketch_photo_set(const DatasetSpec& spec);

struct SegmentationSet {
  std::vector<std::string> class_names;  // index 0 = "background"
  std::vector<int> seen_classes;         // mask ids present in training
  std::vector<int> unseen_classes;
  Dataset train;
  Dataset test;
};
SegmentationSet gen_segmentation_set(const DatasetSpec& spec);

// Mixed photos, sketches and scenes over every shape and color, for L_simple
// pretraining of the backbone.
std::vector<CaptionedImage> gen_pretrain_set(int count, int image_size, std::uint64_t seed);

}  // namespace vermouth
