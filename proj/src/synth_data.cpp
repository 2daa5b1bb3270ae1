#include "vermouth/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "vermouth/rng.hpp"

namespace vermouth {

namespace {

using Point = std::array<double, 2>;
using Ring = std::vector<Point>;
constexpr double kPi = std::numbers::pi;

Ring regular_polygon(int n, double radius, double phase, double cx = 0.0, double cy = 0.0) {
  Ring r;
  for (int i = 0; i < n; ++i) {
    const double a = phase + 2.0 * kPi * i / n;
    r.push_back({cx + radius * std::cos(a), cy + radius * std::sin(a)});
  }
  return r;
}

Ring crescent_ring() {
  // Outer unit circle minus a circle of radius 0.85 centred at (0.45, 0).
  const double off = 0.45, ri = 0.85;
  const double ix = (1.0 - ri * ri + off * off) / (2.0 * off);
  const double iy = std::sqrt(std::max(0.0, 1.0 - ix * ix));
  const double a0 = std::atan2(iy, ix);
  const double b0 = std::atan2(iy, ix - off);
  Ring r;
  const int n = 32;
  for (int i = 0; i <= n; ++i) {
    const double a = a0 + (2.0 * kPi - 2.0 * a0) * i / n;
    r.push_back({std::cos(a), std::sin(a)});
  }
  for (int i = 1; i < n; ++i) {
    const double b = (2.0 * kPi - b0) - (2.0 * kPi - 2.0 * b0) * i / n;
    r.push_back({off + ri * std::cos(b), ri * std::sin(b)});
  }
  return r;
}

double quantize(double v, double step) { return std::round(v / step) * step; }

struct Placed {
  std::vector<Ring> rings;  // image coordinates
  double min_x, max_x, min_y, max_y;
};

Placed place(const ShapeRecord& s, const std::vector<Ring>& unit) {
  Placed p{{}, 1e30, -1e30, 1e30, -1e30};
  const double c = std::cos(s.rotation), sn = std::sin(s.rotation);
  for (const auto& ring : unit) {
    Ring out;
    for (const auto& [u, v] : ring) {
      const double x = s.cx + s.radius * (c * u - sn * v);
      const double y = s.cy + s.radius * (sn * u + c * v);
      out.push_back({x, y});
      p.min_x = std::min(p.min_x, x);
      p.max_x = std::max(p.max_x, x);
      p.min_y = std::min(p.min_y, y);
      p.max_y = std::max(p.max_y, y);
    }
    p.rings.push_back(std::move(out));
  }
  return p;
}

bool inside(const std::vector<Ring>& rings, double x, double y) {
  bool in = false;
  for (const auto& ring : rings) {
    const std::size_t n = ring.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const auto& a = ring[i];
      const auto& b = ring[j];
      if ((a[1] > y) != (b[1] > y)) {
        const double xc = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
        if (x < xc) in = !in;
      }
    }
  }
  return in;
}

double distance_to_outline(const std::vector<Ring>& rings, double x, double y) {
  double best = 1e30;
  for (const auto& ring : rings) {
    const std::size_t n = ring.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const auto& a = ring[j];
      const auto& b = ring[i];
      const double dx = b[0] - a[0], dy = b[1] - a[1];
      const double len2 = dx * dx + dy * dy;
      double t = len2 > 0 ? ((x - a[0]) * dx + (y - a[1]) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double px = a[0] + t * dx - x, py = a[1] + t * dy - y;
      best = std::min(best, px * px + py * py);
    }
  }
  return std::sqrt(best);
}

double sub_offset(int i) { return (i + 0.5) / kSupersample; }

double coverage_of(const Placed& p, int x, int y) {
  if (x + 1 < p.min_x || x > p.max_x || y + 1 < p.min_y || y > p.max_y) return 0.0;
  int hits = 0;
  for (int j = 0; j < kSupersample; ++j)
    for (int i = 0; i < kSupersample; ++i) hits += inside(p.rings, x + sub_offset(i), y + sub_offset(j)) ? 1 : 0;
  return static_cast<double>(hits) / (kSupersample * kSupersample);
}

// Smooth value-noise texture in [-1, 1].
std::vector<double> value_noise(int size, int cells, Rng& rng) {
  std::vector<double> grid(static_cast<std::size_t>((cells + 1) * (cells + 1)));
  for (auto& g : grid) g = rng.uniform(-1.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(size * size));
  for (int y = 0; y < size; ++y) {
    const double gy = (y + 0.5) * cells / size;
    const int y0 = std::min(static_cast<int>(gy), cells - 1);
    const double fy = gy - y0;
    for (int x = 0; x < size; ++x) {
      const double gx = (x + 0.5) * cells / size;
      const int x0 = std::min(static_cast<int>(gx), cells - 1);
      const double fx = gx - x0;
      auto at = [&](int yy, int xx) { return grid[static_cast<std::size_t>(yy * (cells + 1) + xx)]; };
      const double top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx;
      const double bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx;
      out[static_cast<std::size_t>(y * size + x)] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

std::string article_caption(const std::string& kind, const std::string& desc) { return "a " + kind + " of a " + desc; }

ShapeRecord random_record(const Category& cat, int cat_index, int image_size, double rmin, double rmax, Rng& rng) {
  ShapeRecord s;
  s.shape = cat.shape;
  s.category = cat_index;
  s.color = cat.color ? *cat.color : all_colors()[rng.uniform_int(all_colors().size())];
  s.radius = quantize(rng.uniform(rmin, rmax), 1.0 / 64);
  const double lo = s.radius + 1.0, hi = image_size - s.radius - 1.0;
  s.cx = quantize(hi > lo ? rng.uniform(lo, hi) : image_size / 2.0, 1.0 / 64);
  s.cy = quantize(hi > lo ? rng.uniform(lo, hi) : image_size / 2.0, 1.0 / 64);
  s.rotation = quantize(rng.uniform(-0.25, 0.25), 2.0 * kPi / 1024);
  return s;
}

void validate_split(const DatasetSpec& spec) {
  std::set<int> seen;
  for (int c : spec.test_categories) {
    if (c < 0 || c >= static_cast<int>(spec.categories.size())) {
      throw std::invalid_argument("held-out category index out of range");
    }
    if (!seen.insert(c).second) throw std::invalid_argument("held-out category listed twice");
  }
  std::set<std::string> names;
  for (const auto& c : spec.categories) {
    if (!names.insert(c.name()).second) {
      throw std::invalid_argument("category '" + c.name() + "' appears twice; train/test categories would overlap");
    }
  }
}

}  // namespace

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kStar: return "star";
    case ShapeKind::kDiamond: return "diamond";
    case ShapeKind::kHexagon: return "hexagon";
    case ShapeKind::kCrescent: return "crescent";
  }
  return "?";
}

std::string to_string(ColorKind c) {
  switch (c) {
    case ColorKind::kRed: return "red";
    case ColorKind::kGreen: return "green";
    case ColorKind::kBlue: return "blue";
    case ColorKind::kYellow: return "yellow";
    case ColorKind::kMagenta: return "magenta";
    case ColorKind::kCyan: return "cyan";
    case ColorKind::kOrange: return "orange";
    case ColorKind::kPurple: return "purple";
  }
  return "?";
}

std::string to_string(Domain d) { return d == Domain::kPhoto ? "photo" : "sketch"; }

const std::vector<ShapeKind>& all_shapes() {
  static const std::vector<ShapeKind> v{ShapeKind::kCircle, ShapeKind::kSquare,  ShapeKind::kTriangle,
                                        ShapeKind::kCross,  ShapeKind::kRing,    ShapeKind::kStar,
                                        ShapeKind::kDiamond, ShapeKind::kHexagon, ShapeKind::kCrescent};
  return v;
}

const std::vector<ColorKind>& all_colors() {
  static const std::vector<ColorKind> v{ColorKind::kRed,     ColorKind::kGreen, ColorKind::kBlue,
                                        ColorKind::kYellow,  ColorKind::kMagenta, ColorKind::kCyan,
                                        ColorKind::kOrange,  ColorKind::kPurple};
  return v;
}

ShapeKind parse_shape(const std::string& s) {
  for (auto k : all_shapes()) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown shape: " + s);
}

ColorKind parse_color(const std::string& s) {
  for (auto c : all_colors()) {
    if (to_string(c) == s) return c;
  }
  throw std::invalid_argument("unknown color: " + s);
}

std::array<double, 3> color_rgb(ColorKind c) {
  switch (c) {
    case ColorKind::kRed: return {0.85, 0.12, 0.12};
    case ColorKind::kGreen: return {0.12, 0.75, 0.2};
    case ColorKind::kBlue: return {0.15, 0.25, 0.9};
    case ColorKind::kYellow: return {0.92, 0.85, 0.1};
    case ColorKind::kMagenta: return {0.85, 0.15, 0.75};
    case ColorKind::kCyan: return {0.1, 0.8, 0.85};
    case ColorKind::kOrange: return {0.95, 0.5, 0.08};
    case ColorKind::kPurple: return {0.5, 0.15, 0.7};
  }
  return {0, 0, 0};
}

std::string Category::name() const { return color ? to_string(*color) + " " + to_string(shape) : to_string(shape); }

Category parse_category(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  Category c;
  if (words.size() == 1) {
    c.shape = parse_shape(words[0]);
  } else if (words.size() == 2) {
    c.color = parse_color(words[0]);
    c.shape = parse_shape(words[1]);
  } else {
    throw std::invalid_argument("category must be '<shape>' or '<color> <shape>': " + s);
  }
  return c;
}

void DatasetSpec::validate() const {
  if (categories.empty()) throw std::invalid_argument("dataset spec has no categories");
  if (n_per_class < 1 || n_test_per_class < 0) throw std::invalid_argument("bad per-class counts");
  if (shots < 1 || shots > n_per_class) throw std::invalid_argument("shots must lie in [1, n_per_class]");
  if (image_size < 8) throw std::invalid_argument("image size too small");
  if (!(min_radius > 0 && min_radius <= max_radius && 2 * max_radius + 2 < image_size)) {
    throw std::invalid_argument("shape radius range does not fit the image");
  }
  if (max_shapes < 1) throw std::invalid_argument("max_shapes must be >= 1");
}

std::vector<std::vector<std::array<double, 2>>> shape_outline(ShapeKind shape) {
  switch (shape) {
    case ShapeKind::kCircle: return {regular_polygon(48, 1.0, 0.0)};
    case ShapeKind::kRing: return {regular_polygon(48, 1.0, 0.0), regular_polygon(48, 0.55, 0.0)};
    case ShapeKind::kSquare: return {{{-0.8, -0.8}, {0.8, -0.8}, {0.8, 0.8}, {-0.8, 0.8}}};
    case ShapeKind::kTriangle: return {regular_polygon(3, 1.0, -kPi / 2)};
    case ShapeKind::kDiamond: return {{{0.0, -1.0}, {0.65, 0.0}, {0.0, 1.0}, {-0.65, 0.0}}};
    case ShapeKind::kHexagon: return {regular_polygon(6, 1.0, 0.0)};
    case ShapeKind::kCross: {
      const double a = 0.3, b = 0.95;
      return {{{-a, -b}, {a, -b}, {a, -a}, {b, -a}, {b, a}, {a, a}, {a, b}, {-a, b}, {-a, a}, {-b, a}, {-b, -a}, {-a, -a}}};
    }
    case ShapeKind::kStar: {
      Ring r;
      for (int i = 0; i < 10; ++i) {
        const double rad = i % 2 == 0 ? 1.0 : 0.45;
        const double a = -kPi / 2 + kPi * i / 5;
        r.push_back({rad * std::cos(a), rad * std::sin(a)});
      }
      return {r};
    }
    case ShapeKind::kCrescent: return {crescent_ring()};
  }
  return {};
}

double fill_coverage(const ShapeRecord& s, int x, int y) { return coverage_of(place(s, shape_outline(s.shape)), x, y); }

SampleRecord render_photo(const ShapeRecord& shape, int image_size, std::uint64_t seed, double color_jitter,
                          double texture_amplitude) {
  Rng rng(seed);
  const int n = image_size;
  SampleRecord rec;
  rec.domain = Domain::kPhoto;
  rec.shapes = {shape};
  rec.image = Tensor<float>({3, n, n});
  const double base = rng.uniform(0.35, 0.65);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.05, 0.05);
  const auto tex = value_noise(n, 6, rng);
  std::array<double, 3> col = color_rgb(shape.color);
  for (auto& c : col) c = std::clamp(c + rng.uniform(-color_jitter, color_jitter), 0.0, 1.0);
  const auto placed = place(shape, shape_outline(shape.shape));
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double cov = coverage_of(placed, x, y);
      const double grain = rng.uniform(-0.03, 0.03);
      for (int ch = 0; ch < 3; ++ch) {
        const double bg = base + tint[static_cast<std::size_t>(ch)] +
                          texture_amplitude * tex[static_cast<std::size_t>(y * n + x)] + grain;
        const double v = bg * (1.0 - cov) + col[static_cast<std::size_t>(ch)] * cov;
        rec.image.at(ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  rec.label = shape.category;
  return rec;
}

SampleRecord render_sketch(const ShapeRecord& shape, int image_size, std::uint64_t seed) {
  Rng rng(seed);
  const int n = image_size;
  auto unit = shape_outline(shape.shape);
  // Abstraction gap: wobble every vertex and pick a stroke width.
  for (auto& ring : unit) {
    for (auto& p : ring) {
      p[0] += 0.05 * rng.normal();
      p[1] += 0.05 * rng.normal();
    }
  }
  const double half_width = 0.5 * rng.uniform(1.2, 2.4);
  const auto placed = place(shape, unit);
  SampleRecord rec;
  rec.domain = Domain::kSketch;
  rec.shapes = {shape};
  rec.image = Tensor<float>({3, n, n}, 1.0f);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      if (x + 1 < placed.min_x - 2 || x > placed.max_x + 2 || y + 1 < placed.min_y - 2 || y > placed.max_y + 2) continue;
      int hits = 0;
      for (int j = 0; j < kSupersample; ++j)
        for (int i = 0; i < kSupersample; ++i)
          hits += distance_to_outline(placed.rings, x + sub_offset(i), y + sub_offset(j)) <= half_width ? 1 : 0;
      const float v = 1.0f - static_cast<float>(hits) / (kSupersample * kSupersample);
      for (int ch = 0; ch < 3; ++ch) rec.image.at(ch, y, x) = v;
    }
  }
  rec.label = shape.category;
  return rec;
}

namespace {

std::string photo_desc(const ShapeRecord& s) { return to_string(s.color) + " " + to_string(s.shape); }

SampleRecord photo_sample(const Category& cat, int label, const DatasetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  auto rec = random_record(cat, label, spec.image_size, spec.min_radius, spec.max_radius, rng);
  auto s = render_photo(rec, spec.image_size, derive_seed(seed, 1), spec.color_jitter, spec.texture_amplitude);
  s.caption = article_caption("photo", photo_desc(rec));
  return s;
}

}  // namespace

ClassificationSet gen_classification_set(const DatasetSpec& spec) {
  spec.validate();
  ClassificationSet out;
  for (const auto& c : spec.categories) {
    out.train.class_names.push_back(c.name());
    out.test.class_names.push_back(c.name());
  }
  const int n_train = std::min(spec.n_per_class, spec.shots);
  for (int k = 0; k < static_cast<int>(spec.categories.size()); ++k) {
    const auto& cat = spec.categories[static_cast<std::size_t>(k)];
    for (int i = 0; i < n_train; ++i) {
      out.train.samples.push_back(photo_sample(cat, k, spec, derive_seed(spec.seed, (1ull << 40) + k * 100000ull + i)));
    }
    for (int i = 0; i < spec.n_test_per_class; ++i) {
      out.test.samples.push_back(photo_sample(cat, k, spec, derive_seed(spec.seed, (2ull << 40) + k * 100000ull + i)));
    }
  }
  return out;
}

SketchPhotoSet gen_sketch_photo_set(const DatasetSpec& spec) {
  spec.validate();
  validate_split(spec);
  if (spec.test_categories.empty()) throw std::invalid_argument("zero-shot split needs held-out categories");
  SketchPhotoSet out;
  const std::set<int> held(spec.test_categories.begin(), spec.test_categories.end());
  for (int k = 0; k < static_cast<int>(spec.categories.size()); ++k) {
    out.class_names.push_back(spec.categories[static_cast<std::size_t>(k)].name());
    (held.count(k) ? out.test_categories : out.train_categories).push_back(k);
  }
  if (out.train_categories.empty()) throw std::invalid_argument("zero-shot split leaves no training categories");
  for (int k : out.train_categories) {
    if (held.count(k)) throw std::logic_error("training category leaked into the held-out split");
  }
  for (auto* d : {&out.train_photos, &out.train_sketches, &out.gallery, &out.queries}) d->class_names = out.class_names;

  auto make_pair = [&](int k, std::uint64_t seed, Dataset& photos, Dataset& sketches) {
    const auto& cat = spec.categories[static_cast<std::size_t>(k)];
    Rng rng(seed);
    const auto rec = random_record(cat, k, spec.image_size, spec.min_radius, spec.max_radius, rng);
    auto photo = render_photo(rec, spec.image_size, derive_seed(seed, 1), spec.color_jitter, spec.texture_amplitude);
    photo.caption = article_caption("photo", photo_desc(rec));
    auto sketch = render_sketch(rec, spec.image_size, derive_seed(seed, 2));
    sketch.caption = article_caption("sketch", to_string(rec.shape));
    photos.samples.push_back(std::move(photo));
    sketches.samples.push_back(std::move(sketch));
  };
  for (int k : out.train_categories) {
    for (int i = 0; i < spec.n_per_class; ++i) {
      make_pair(k, derive_seed(spec.seed, (3ull << 40) + k * 100000ull + i), out.train_photos, out.train_sketches);
    }
  }
  for (int k : out.test_categories) {
    for (int i = 0; i < spec.n_test_per_class; ++i) {
      make_pair(k, derive_seed(spec.seed, (4ull << 40) + k * 100000ull + i), out.gallery, out.queries);
    }
  }
  return out;
}

namespace {

SampleRecord render_scene(const std::vector<int>& pool, const DatasetSpec& spec, std::uint64_t seed) {
  const int n = spec.image_size;
  for (int attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
    const int count = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.max_shapes)));
    std::vector<ShapeRecord> shapes;
    bool ok = true;
    for (int s = 0; s < count && ok; ++s) {
      const int k = pool[rng.uniform_int(pool.size())];
      bool placed = false;
      for (int tries = 0; tries < 100 && !placed; ++tries) {
        auto rec = random_record(spec.categories[static_cast<std::size_t>(k)], k, n, spec.min_radius, spec.max_radius, rng);
        placed = std::all_of(shapes.begin(), shapes.end(), [&](const ShapeRecord& o) {
          const double dx = o.cx - rec.cx, dy = o.cy - rec.cy;
          return std::sqrt(dx * dx + dy * dy) > o.radius + rec.radius + 2.0;
        });
        if (placed) shapes.push_back(rec);
      }
      ok = placed;
    }
    if (!ok) continue;  // fresh jitter

    SampleRecord out;
    out.domain = Domain::kPhoto;
    out.shapes = shapes;
    out.image = Tensor<float>({3, n, n});
    std::vector<int> mask(static_cast<std::size_t>(n * n), 0);
    const double base = rng.uniform(0.35, 0.65);
    std::array<double, 3> tint{};
    for (auto& t : tint) t = rng.uniform(-0.05, 0.05);
    const auto tex = value_noise(n, 6, rng);
    std::vector<Placed> placed;
    std::vector<std::array<double, 3>> cols;
    for (const auto& s : shapes) {
      placed.push_back(place(s, shape_outline(s.shape)));
      auto col = color_rgb(s.color);
      for (auto& c : col) c = std::clamp(c + rng.uniform(-spec.color_jitter, spec.color_jitter), 0.0, 1.0);
      cols.push_back(col);
    }
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double grain = rng.uniform(-0.03, 0.03);
        std::array<double, 3> px{};
        for (int ch = 0; ch < 3; ++ch) {
          px[static_cast<std::size_t>(ch)] = base + tint[static_cast<std::size_t>(ch)] +
                                             spec.texture_amplitude * tex[static_cast<std::size_t>(y * n + x)] + grain;
        }
        for (std::size_t s = 0; s < shapes.size(); ++s) {
          const double cov = coverage_of(placed[s], x, y);
          if (cov <= 0.0) continue;
          for (std::size_t ch = 0; ch < 3; ++ch) px[ch] = px[ch] * (1.0 - cov) + cols[s][ch] * cov;
          if (cov >= 0.5) mask[static_cast<std::size_t>(y * n + x)] = 1 + shapes[s].category;
        }
        for (int ch = 0; ch < 3; ++ch) {
          out.image.at(ch, y, x) = static_cast<float>(std::clamp(px[static_cast<std::size_t>(ch)], 0.0, 1.0));
        }
      }
    }
    out.mask = std::move(mask);
    out.label = 1 + shapes.front().category;
    std::string desc;
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      if (s) desc += " and a ";
      desc += photo_desc(shapes[s]);
    }
    out.caption = article_caption("photo", desc);
    return out;
  }
}

}  // namespace

SegmentationSet gen_segmentation_set(const DatasetSpec& spec) {
  spec.validate();
  validate_split(spec);
  SegmentationSet out;
  out.class_names.push_back("background");
  const std::set<int> held(spec.test_categories.begin(), spec.test_categories.end());
  std::vector<int> seen_pool, all_pool;
  for (int k = 0; k < static_cast<int>(spec.categories.size()); ++k) {
    out.class_names.push_back(spec.categories[static_cast<std::size_t>(k)].name());
    all_pool.push_back(k);
    if (held.count(k)) {
      out.unseen_classes.push_back(k + 1);
    } else {
      seen_pool.push_back(k);
      out.seen_classes.push_back(k + 1);
    }
  }
  if (seen_pool.empty()) throw std::invalid_argument("segmentation split leaves no training categories");
  out.train.class_names = out.test.class_names = out.class_names;
  const int n_train = spec.n_per_class * static_cast<int>(seen_pool.size());
  const int n_test = spec.n_test_per_class * static_cast<int>(all_pool.size());
  for (int i = 0; i < n_train; ++i) {
    out.train.samples.push_back(render_scene(seen_pool, spec, derive_seed(spec.seed, (5ull << 40) + i)));
  }
  for (int i = 0; i < n_test; ++i) {
    out.test.samples.push_back(render_scene(all_pool, spec, derive_seed(spec.seed, (6ull << 40) + i)));
  }
  return out;
}

std::vector<CaptionedImage> gen_pretrain_set(int count, int image_size, std::uint64_t seed) {
  DatasetSpec scene_spec;
  scene_spec.image_size = image_size;
  scene_spec.min_radius = std::max(2.0, image_size / 8.0);
  scene_spec.max_radius = std::max(scene_spec.min_radius, image_size * 0.22);
  scene_spec.max_shapes = 2;
  for (auto s : all_shapes())
    for (auto c : all_colors()) scene_spec.categories.push_back({s, c});
  std::vector<int> pool(scene_spec.categories.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);

  std::vector<CaptionedImage> out;
  const double rmin = std::max(2.0, image_size / 8.0), rmax = std::max(rmin, image_size * 0.28);
  for (int i = 0; i < count; ++i) {
    const auto s = derive_seed(seed, 7000000ull + static_cast<std::uint64_t>(i));
    Rng rng(s);
    const int kind = i % 4;
    if (kind == 3) {
      auto scene = render_scene(pool, scene_spec, derive_seed(s, 9));
      out.push_back({std::move(scene.image), std::move(scene.caption)});
      continue;
    }
    Category cat{all_shapes()[rng.uniform_int(all_shapes().size())], all_colors()[rng.uniform_int(all_colors().size())]};
    const auto rec = random_record(cat, 0, image_size, rmin, rmax, rng);
    if (kind == 2) {
      auto sk = render_sketch(rec, image_size, derive_seed(s, 2));
      out.push_back({std::move(sk.image), article_caption("sketch", to_string(rec.shape))});
    } else {
      auto ph = render_photo(rec, image_size, derive_seed(s, 1));
      out.push_back({std::move(ph.image), article_caption("photo", photo_desc(rec))});
    }
  }
  return out;
}

}  // namespace vermouth
