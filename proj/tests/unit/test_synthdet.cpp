#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "dprune/synthdet.hpp"

using namespace dprune;
using namespace dprune::data;

namespace {

// Pixel-center rasterization over the whole image, independent of the generator's scan window.
Box raster_bounds(const ShapeGeometry& g, int size) {
  int x0 = size, y0 = size, x1 = -1, y1 = -1;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (shape_contains(g, x + 0.5f, y + 0.5f)) {
        x0 = std::min(x0, x), y0 = std::min(y0, y);
        x1 = std::max(x1, x), y1 = std::max(y1, y);
      }
  if (x1 < 0) return {};
  return {static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x1 + 1), static_cast<float>(y1 + 1)};
}

}  // namespace

TEST_CASE("same (seed, index) gives a bit-identical sample") {
  DatasetConfig cfg;
  const auto a = generate_sample(cfg, 17);
  const auto b = generate_sample(cfg, 17);
  CHECK(a.image.vec() == b.image.vec());
  CHECK(a.objects == b.objects);
  cfg.seed += 1;
  CHECK(generate_sample(cfg, 17).image.vec() != a.image.vec());
}

TEST_CASE("zero objects per image gives an empty object list") {
  DatasetConfig cfg;
  cfg.min_objects = 0;
  cfg.max_objects = 0;
  for (int i = 0; i < 5; ++i) CHECK(generate_sample(cfg, i).objects.empty());
}

TEST_CASE("samples satisfy the box and image invariants") {
  DatasetConfig cfg;
  for (int i = 0; i < 300; ++i) {
    const auto s = generate_sample(cfg, i);
    CHECK(s.image.shape() == Shape{3, cfg.image_size, cfg.image_size});
    for (float v : s.image.vec()) REQUIRE((v >= 0.0f && v <= 1.0f));
    CHECK(static_cast<int>(s.objects.size()) <= cfg.max_objects);
    for (std::size_t a = 0; a < s.objects.size(); ++a) {
      const auto& o = s.objects[a];
      CHECK(o.class_id >= 0);
      CHECK(o.class_id < cfg.num_classes);
      CHECK(o.class_id == static_cast<int>(o.shape.kind));
      CHECK(o.box.x1 >= 0);
      CHECK(o.box.x1 < o.box.x2);
      CHECK(o.box.x2 <= cfg.image_size);
      CHECK(o.box.y1 >= 0);
      CHECK(o.box.y1 < o.box.y2);
      CHECK(o.box.y2 <= cfg.image_size);
      CHECK(o.box.width() >= cfg.min_box_side);
      CHECK(o.box.height() >= cfg.min_box_side);
      for (std::size_t b = a + 1; b < s.objects.size(); ++b) CHECK(iou(o.box, s.objects[b].box) <= cfg.max_overlap_iou);
    }
  }
}

TEST_CASE("every box tightly encloses its re-rasterized shape over 1000 samples") {
  DatasetConfig cfg;
  int checked = 0;
  for (int i = 0; i < 1000; ++i)
    for (const auto& o : generate_sample(cfg, i).objects) {
      REQUIRE(raster_bounds(o.shape, cfg.image_size) == o.box);
      ++checked;
    }
  CHECK(checked >= 1000);
}

TEST_CASE("splits: index ranges, disjointness, empty validation") {
  DatasetConfig cfg;
  cfg.n_train = 20;
  cfg.n_val = 7;
  const auto train = generate_split(cfg, Split::kTrain);
  const auto val = generate_split(cfg, Split::kVal);
  REQUIRE(train.size() == 20);
  REQUIRE(val.size() == 7);
  std::set<std::int64_t> ids;
  for (const auto& s : train) ids.insert(s.index);
  for (const auto& s : val) CHECK(ids.insert(s.index).second);
  CHECK(*ids.begin() == 0);
  CHECK(*ids.rbegin() == 26);
  CHECK(val.front().image.vec() == generate_sample(cfg, 20).image.vec());

  cfg.n_val = 0;
  CHECK(generate_split(cfg, Split::kVal).empty());
}

TEST_CASE("whole-split generation is reproducible") {
  DatasetConfig cfg;
  cfg.n_train = 16;
  const auto a = generate_split(cfg, Split::kTrain);
  const auto b = generate_split(cfg, Split::kTrain);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.vec() == b[i].image.vec());
    CHECK(a[i].objects == b[i].objects);
  }
}

TEST_CASE("class frequencies over 5000 train samples are uniform within 10% and balanced per image") {
  DatasetConfig cfg;
  cfg.n_train = 5000;
  const auto train = generate_split(cfg, Split::kTrain);
  std::vector<double> objects(cfg.num_classes, 0), images(cfg.num_classes, 0);
  double total = 0;
  for (const auto& s : train) {
    std::set<int> present;
    for (const auto& o : s.objects) {
      objects[o.class_id] += 1;
      total += 1;
      present.insert(o.class_id);
    }
    for (int c : present) images[c] += 1;
  }
  const double expected = total / cfg.num_classes;
  for (int c = 0; c < cfg.num_classes; ++c) {
    CHECK(std::abs(objects[c] - expected) / expected <= 0.10);
    CHECK(images[c] / train.size() >= 0.15);
  }
}

TEST_CASE("config validation rejects bad values") {
  DatasetConfig cfg;
  cfg.num_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.min_objects = 3;
  cfg.max_objects = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.num_classes = kMaxClasses + 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(generate_sample(DatasetConfig{}, -1), std::invalid_argument);
}

TEST_CASE("stack_images and export") {
  DatasetConfig cfg;
  cfg.n_train = 3;
  const auto train = generate_split(cfg, Split::kTrain);
  const auto batch = stack_images(train, 1, 2);
  CHECK(batch.shape() == Shape{2, 3, 64, 64});
  CHECK(std::equal(train[2].image.vec().begin(), train[2].image.vec().end(),
                   batch.vec().begin() + static_cast<long>(train[2].image.numel())));

  const auto dir = std::filesystem::temp_directory_path() / "dprune_test_export";
  std::filesystem::remove_all(dir);
  export_samples(train, dir);
  CHECK(std::filesystem::file_size(dir / "images.bin") == 16 + 3 * 3 * 64 * 64 * 4);
  std::ifstream ann(dir / "annotations.txt");
  std::size_t lines = 0, objects = 0;
  for (std::string line; std::getline(ann, line);) ++lines;
  for (const auto& s : train) objects += s.objects.size();
  CHECK(lines == objects);
  std::filesystem::remove_all(dir);
}

TEST_CASE("counter rng streams are reproducible and independent") {
  CounterRng a(1, 2, 3), b(1, 2, 3), c(1, 2, 4);
  for (int i = 0; i < 10; ++i) {
    const auto va = a.next();
    CHECK(va == b.next());
    CHECK(va != c.next());
  }
  CounterRng u(5, 0, 0);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    REQUIRE((v >= 0.0 && v < 1.0));
    const int k = u.uniform_int(2, 4);
    REQUIRE((k >= 2 && k <= 4));
  }
}
