#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "vermouth/conditioning.hpp"
#include "vermouth/dataset_io.hpp"
#include "vermouth/run_config.hpp"
#include "vermouth/synth_data.hpp"

using namespace vermouth;

namespace {

constexpr double kPi = 3.14159265358979323846;

bool same_sample(const SampleRecord& a, const SampleRecord& b) {
  return bitwise_equal(a.image, b.image) && a.caption == b.caption && a.label == b.label && a.mask == b.mask &&
         a.domain == b.domain;
}

bool same_record(const ShapeRecord& a, const ShapeRecord& b) {
  return a.shape == b.shape && a.color == b.color && a.category == b.category && a.cx == b.cx && a.cy == b.cy &&
         a.radius == b.radius && a.rotation == b.rotation;
}

bool caption_has_tokens(const std::string& caption, const std::string& class_name) {
  const auto cap = tokenize(caption);
  const std::set<int> have(cap.begin(), cap.end());
  for (int t : tokenize(class_name)) {
    if (!have.count(t)) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("synth_data") {

TEST_CASE("classification sets are deterministic and balanced") {
  auto spec = default_dataset(Task::kClassify);
  spec.n_per_class = 5;
  spec.shots = 3;
  spec.n_test_per_class = 4;
  spec.seed = 17;
  const auto a = gen_classification_set(spec);
  const auto b = gen_classification_set(spec);
  REQUIRE(a.train.samples.size() == b.train.samples.size());
  for (std::size_t i = 0; i < a.train.samples.size(); ++i) CHECK(same_sample(a.train.samples[i], b.train.samples[i]));
  for (std::size_t i = 0; i < a.test.samples.size(); ++i) CHECK(same_sample(a.test.samples[i], b.test.samples[i]));

  const int k = static_cast<int>(spec.categories.size());
  std::vector<int> train_counts(k), test_counts(k);
  for (const auto& s : a.train.samples) ++train_counts.at(s.label);
  for (const auto& s : a.test.samples) ++test_counts.at(s.label);
  for (int c = 0; c < k; ++c) {
    CHECK(train_counts[c] == 3);
    CHECK(test_counts[c] == 4);
  }
  for (const auto& s : a.train.samples) {
    CHECK(caption_has_tokens(s.caption, a.train.class_names[s.label]));
    CHECK(s.image.shape() == Shape{3, 64, 64});
    for (float v : s.image.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }

  spec.seed = 18;
  const auto c = gen_classification_set(spec);
  CHECK_FALSE(bitwise_equal(a.train.samples[0].image, c.train.samples[0].image));
}

TEST_CASE("a red circle is red inside the disk and untouched outside it") {
  ShapeRecord rec;
  rec.shape = ShapeKind::kCircle;
  rec.color = ColorKind::kRed;
  rec.cx = 30.25;
  rec.cy = 33.5;
  rec.radius = 12.0;
  const auto s = render_photo(rec, 64, 3, 0.08, 0.15);
  const auto& im = s.image;
  int inside = 0;
  float r0 = -1, g0 = -1, b0 = -1;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      // Pixel square [x, x+1) x [y, y+1); distances to the centre.
      const double dx = x + 0.5 - rec.cx, dy = y + 0.5 - rec.cy;
      const double d = std::sqrt(dx * dx + dy * dy);
      if (d + 0.75 < rec.radius * std::cos(kPi / 48)) {
        ++inside;
        const float r = im.at(0, y, x), g = im.at(1, y, x), b = im.at(2, y, x);
        CHECK(r > 0.7f);
        CHECK(r > g + 0.5f);
        CHECK(r > b + 0.5f);
        if (r0 < 0) {
          r0 = r;
          g0 = g;
          b0 = b;
        }
        CHECK((r == r0 && g == g0 && b == b0));
      }
    }
  }
  CHECK(inside > 300);

  // Same seed, no shape: pixels far from the disk are identical.
  ShapeRecord far = rec;
  far.radius = 0.5;
  far.cx = far.cy = -50;
  const auto bg = render_photo(far, 64, 3, 0.08, 0.15);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const double dx = x + 0.5 - rec.cx, dy = y + 0.5 - rec.cy;
      if (std::sqrt(dx * dx + dy * dy) > rec.radius + 1.5) {
        for (int ch = 0; ch < 3; ++ch) CHECK(im.at(ch, y, x) == bg.image.at(ch, y, x));
      }
    }
  }
}

TEST_CASE("disk mask area is within 5% of pi r^2") {
  DatasetSpec spec;
  spec.categories = {parse_category("circle")};
  spec.max_shapes = 1;
  spec.n_per_class = 12;
  spec.shots = 12;
  spec.n_test_per_class = 0;
  const auto set = gen_segmentation_set(spec);
  for (const auto& s : set.train.samples) {
    REQUIRE(s.shapes.size() == 1);
    const double r = s.shapes[0].radius;
    long area = 0;
    for (int id : *s.mask) area += id == 1;
    CHECK(std::abs(area - kPi * r * r) / (kPi * r * r) < 0.05);
  }
}

TEST_CASE("sketches are grayscale, mostly white and share the photo's shape record") {
  auto spec = default_dataset(Task::kRetrieve);
  spec.n_per_class = 4;
  spec.shots = 4;
  spec.n_test_per_class = 4;
  const auto set = gen_sketch_photo_set(spec);
  double total = 0;
  long pixels = 0;
  for (const auto* sk : {&set.train_sketches, &set.queries}) {
    for (const auto& s : sk->samples) {
      CHECK(s.domain == Domain::kSketch);
      for (std::int64_t i = 0; i < 64 * 64; ++i) {
        CHECK(s.image[i] == s.image[4096 + i]);
        CHECK(s.image[i] == s.image[8192 + i]);
        total += s.image[i];
        ++pixels;
      }
      CHECK(caption_has_tokens(s.caption, set.class_names[s.label]));
    }
  }
  CHECK(total / pixels > 0.8);
  REQUIRE(set.train_photos.samples.size() == set.train_sketches.samples.size());
  for (std::size_t i = 0; i < set.train_photos.samples.size(); ++i) {
    const auto& p = set.train_photos.samples[i];
    const auto& s = set.train_sketches.samples[i];
    REQUIRE(p.shapes.size() == 1);
    REQUIRE(s.shapes.size() == 1);
    CHECK(same_record(p.shapes[0], s.shapes[0]));
    CHECK(p.label == s.label);
  }
  for (std::size_t i = 0; i < set.gallery.samples.size(); ++i) {
    CHECK(same_record(set.gallery.samples[i].shapes[0], set.queries.samples[i].shapes[0]));
  }
  const std::set<int> held(spec.test_categories.begin(), spec.test_categories.end());
  for (int k : set.train_categories) CHECK(held.count(k) == 0);
  for (const auto& s : set.queries.samples) CHECK(held.count(s.label) == 1);
  for (const auto& s : set.gallery.samples) CHECK(held.count(s.label) == 1);
}

TEST_CASE("segmentation scenes: id range, shape count, no overlap, unseen classes only at test") {
  auto spec = default_dataset(Task::kSegment);
  spec.categories.push_back(parse_category("star"));
  spec.test_categories = {static_cast<int>(spec.categories.size()) - 1};
  spec.n_per_class = 8;
  spec.shots = 8;
  spec.n_test_per_class = 8;
  const auto set = gen_segmentation_set(spec);
  const int n_ids = static_cast<int>(set.class_names.size());
  const std::set<int> unseen(set.unseen_classes.begin(), set.unseen_classes.end());
  CHECK(set.class_names.front() == "background");
  bool unseen_in_test = false;
  for (const auto* split : {&set.train, &set.test}) {
    for (const auto& s : split->samples) {
      REQUIRE(s.mask);
      CHECK(s.mask->size() == 64u * 64u);
      CHECK(s.shapes.size() >= 1);
      CHECK(s.shapes.size() <= 3);
      for (int id : *s.mask) CHECK((id >= 0 && id < n_ids));
      for (std::size_t i = 0; i < s.shapes.size(); ++i) {
        for (std::size_t j = i + 1; j < s.shapes.size(); ++j) {
          const double d = std::hypot(s.shapes[i].cx - s.shapes[j].cx, s.shapes[i].cy - s.shapes[j].cy);
          CHECK(d > s.shapes[i].radius + s.shapes[j].radius);
        }
      }
      for (const auto& sh : s.shapes) {
        const bool is_unseen = unseen.count(sh.category + 1) != 0;
        if (split == &set.train) CHECK_FALSE(is_unseen);
        unseen_in_test = unseen_in_test || is_unseen;
        CHECK(caption_has_tokens(s.caption, set.class_names[sh.category + 1]));
      }
    }
  }
  CHECK(unseen_in_test);
  const auto again = gen_segmentation_set(spec);
  for (std::size_t i = 0; i < set.test.samples.size(); ++i) CHECK(same_sample(set.test.samples[i], again.test.samples[i]));
}

TEST_CASE("invalid specs are rejected") {
  auto spec = default_dataset(Task::kRetrieve);
  auto dup = spec;
  dup.categories.push_back(dup.categories.front());
  CHECK_THROWS_AS(gen_sketch_photo_set(dup), std::invalid_argument);
  auto twice = spec;
  twice.test_categories = {6, 6};
  CHECK_THROWS_AS(gen_sketch_photo_set(twice), std::invalid_argument);
  auto range = spec;
  range.test_categories = {42};
  CHECK_THROWS_AS(gen_sketch_photo_set(range), std::invalid_argument);
  auto none = spec;
  none.test_categories.clear();
  CHECK_THROWS_AS(gen_sketch_photo_set(none), std::invalid_argument);
  auto all = spec;
  all.test_categories.clear();
  for (int k = 0; k < static_cast<int>(all.categories.size()); ++k) all.test_categories.push_back(k);
  CHECK_THROWS_AS(gen_sketch_photo_set(all), std::invalid_argument);

  auto shots = default_dataset(Task::kClassify);
  shots.shots = shots.n_per_class + 1;
  CHECK_THROWS_AS(gen_classification_set(shots), std::invalid_argument);
  auto big = default_dataset(Task::kClassify);
  big.max_radius = 40;
  CHECK_THROWS_AS(gen_classification_set(big), std::invalid_argument);
  auto empty = default_dataset(Task::kClassify);
  empty.categories.clear();
  CHECK_THROWS_AS(gen_classification_set(empty), std::invalid_argument);
  CHECK_THROWS(parse_category("blurple circle"));
  CHECK_THROWS(parse_category("red blob"));
  CHECK(parse_category("red circle").name() == "red circle");
  CHECK_FALSE(parse_category("star").color.has_value());
}

TEST_CASE("pretraining set covers photos, sketches and scenes deterministically") {
  const auto a = gen_pretrain_set(12, 64, 4);
  const auto b = gen_pretrain_set(12, 64, 4);
  REQUIRE(a.size() == 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bitwise_equal(a[i].image, b[i].image));
    CHECK(a[i].caption == b[i].caption);
  }
  int sketches = 0;
  for (const auto& c : a) sketches += c.caption.find("sketch") != std::string::npos;
  CHECK(sketches == 3);
}

TEST_CASE("task datasets survive a save/load round trip") {
  auto spec = default_dataset(Task::kSegment);
  spec.n_per_class = 2;
  spec.shots = 2;
  spec.n_test_per_class = 1;
  const auto data = task_data(gen_segmentation_set(spec));
  const auto dir = (std::filesystem::temp_directory_path() / "vermouth_dataset_rt").string();
  std::filesystem::remove_all(dir);
  save_task_data(data, dir);
  const auto back = load_task_data(dir);
  CHECK(back.task == data.task);
  CHECK(back.train_classes == data.train_classes);
  CHECK(back.eval_classes == data.eval_classes);
  CHECK(back.seen_classes == data.seen_classes);
  CHECK(back.unseen_classes == data.unseen_classes);
  REQUIRE(back.train.size() == data.train.size());
  REQUIRE(back.eval.size() == data.eval.size());
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    CHECK(same_sample(back.train[i], data.train[i]));
    REQUIRE(back.train[i].shapes.size() == data.train[i].shapes.size());
    for (std::size_t j = 0; j < data.train[i].shapes.size(); ++j) {
      CHECK(same_record(back.train[i].shapes[j], data.train[i].shapes[j]));
    }
  }
  for (std::size_t i = 0; i < data.eval.size(); ++i) CHECK(same_sample(back.eval[i], data.eval[i]));
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
