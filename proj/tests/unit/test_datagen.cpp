#include <doctest.h>

#include <set>

#include "advseg/datagen.hpp"
#include "advseg/errors.hpp"
#include "advseg/serialize.hpp"
#include "helpers.hpp"

using namespace advseg;

namespace {

double background_fraction(const LabelMap& m) {
  std::size_t bg = 0;
  for (int v : m.ids()) bg += v == 0;
  return static_cast<double>(bg) / static_cast<double>(m.size());
}

}  // namespace

TEST_CASE("config validation") {
  SceneConfig c;
  CHECK_NOTHROW(c.validate());
  c.height = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = SceneConfig{};
  c.num_classes = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(generate_dataset(c, 1), ConfigError);
}

TEST_CASE("same seed gives a bit-identical dataset") {
  SceneConfig c;
  c.height = c.width = 32;
  const Dataset a = generate_dataset(c, 6);
  const Dataset b = generate_dataset(c, 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].labels == b[i].labels);
    CHECK(a[i].shapes == b[i].shapes);
  }
  c.seed = 8;
  CHECK_FALSE(generate_dataset(c, 1)[0].image == a[0].image);
}

TEST_CASE("generated samples respect the domain invariants") {
  SceneConfig c;
  const Dataset ds = generate_dataset(c, 30);
  for (const auto& s : ds) {
    CHECK(s.image.shape() == Shape{64, 64, 3});
    CHECK(s.labels.height() == 64);
    CHECK(s.shapes.size() >= c.min_shapes);
    CHECK(s.shapes.size() <= c.max_shapes);
    for (double v : s.image.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (int v : s.labels.ids()) {
      CHECK(v >= 0);
      CHECK(v < 5);
    }
    for (const auto& sh : s.shapes) {
      CHECK(sh.class_id >= 1);
      CHECK(sh.class_id < 5);
    }
    CHECK(rasterize_labels(64, 64, s.shapes) == s.labels);
  }
}

TEST_CASE("noise-free single rectangle is piecewise constant with classes {0, 1}") {
  SceneConfig c;
  c.noise_std = 0.0;
  c.min_shapes = c.max_shapes = 1;
  const Dataset ds = generate_dataset(c, 20);
  bool seen = false;
  for (const auto& s : ds) {
    if (s.shapes[0].kind != ShapeKind::rectangle || s.shapes[0].class_id != 1) continue;
    seen = true;
    std::set<int> classes(s.labels.ids().begin(), s.labels.ids().end());
    CHECK(classes == std::set<int>{0, 1});
    const auto bg = class_color(0, 3);
    const auto fg = class_color(1, 3);
    for (std::size_t y = 0; y < 64; ++y) {
      for (std::size_t x = 0; x < 64; ++x) {
        const auto& col = s.labels.at(y, x) == 0 ? bg : fg;
        for (std::size_t ch = 0; ch < 3; ++ch) CHECK(s.image.at(y, x, ch) == col[ch]);
      }
    }
  }
  CHECK(seen);
}

TEST_CASE("background fraction stays within [0.2, 0.9] on at least 95% of images") {
  const Dataset ds = generate_dataset(SceneConfig{}, 200);
  std::size_t ok = 0;
  for (const auto& s : ds) {
    const double f = background_fraction(s.labels);
    ok += f >= 0.2 && f <= 0.9;
  }
  CHECK(ok >= 190);
}

TEST_CASE("shape containment uses pixel centres") {
  ShapeSpec r{ShapeKind::rectangle, 1, {2.0, 2.0, 4.0, 5.0}};
  CHECK(r.contains(2.5, 2.5));
  CHECK(r.contains(3.5, 4.5));
  CHECK_FALSE(r.contains(4.5, 2.5));
  ShapeSpec c{ShapeKind::circle, 2, {10.0, 10.0, 3.0}};
  CHECK(c.contains(10.0, 12.9));
  CHECK_FALSE(c.contains(10.0, 13.1));
  ShapeSpec t{ShapeKind::triangle, 3, {0.0, 0.0, 0.0, 10.0, 10.0, 0.0}};
  CHECK(t.contains(1.0, 1.0));
  CHECK_FALSE(t.contains(8.0, 8.0));
}

TEST_CASE("class colours are fixed per class") {
  CHECK(class_color(1, 3) == class_color(1, 3));
  CHECK_FALSE(class_color(1, 3) == class_color(2, 3));
  CHECK(class_color(11, 3).size() == 3);
}

TEST_CASE("70/15/15 split by index") {
  const SplitIndices s = split_indices(400);
  CHECK(s.train.size() == 280);
  CHECK(s.val.size() == 60);
  CHECK(s.test.size() == 60);
  CHECK(s.train.front() == 0);
  CHECK(s.val.front() == 280);
  CHECK(s.test.back() == 399);
}

TEST_CASE("dataset persistence round trips and detects corruption") {
  SceneConfig c;
  c.height = c.width = 24;
  const Dataset ds = generate_dataset(c, 3);
  const auto dir = testutil::scratch_dir("dataset");
  save_dataset(dir / "d", ds);
  const Dataset back = load_dataset(dir / "d");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].image == ds[i].image);
    CHECK(back[i].labels == ds[i].labels);
    CHECK(back[i].shapes == ds[i].shapes);
  }

  save_dataset(dir / "empty", Dataset{});
  CHECK(load_manifest(dir / "empty")["count"] == 0);
  CHECK(load_dataset(dir / "empty").empty());

  const auto img = dir / "d" / "img_00001.sstn";
  const std::string bytes = read_text_file(img);
  write_text_file(img, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_dataset(dir / "d"), FormatError);
  CHECK_THROWS_AS(load_dataset(dir / "nope"), PathError);
  write_text_file(dir / "d" / "manifest.json", "{not json");
  CHECK_THROWS_AS(load_dataset(dir / "d"), FormatError);
}

TEST_CASE("scene config JSON round trip") {
  SceneConfig c;
  c.height = 40;
  c.noise_std = 0.125;
  c.seed = 99;
  const SceneConfig back = scene_config_from_json(to_json(c));
  CHECK(back.height == 40);
  CHECK(back.noise_std == 0.125);
  CHECK(back.seed == 99);
}
