#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "promptcount/dataset.hpp"
#include "promptcount/rng.hpp"
#include "promptcount/scenegen.hpp"

using namespace promptcount;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("promptcount_test_" + name);
  fs::remove_all(p);
  return p;
}

SceneConfig five_targets(std::uint64_t seed) {
  SceneConfig cfg;
  cfg.n_target = {5, 5};
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("generation is byte-deterministic") {
  Scene a = generate_scene(five_targets(7));
  Scene b = generate_scene(five_targets(7));
  CHECK(a.image.pixels == b.image.pixels);
  CHECK(a.annotation == b.annotation);
  CHECK(a.annotation.count() == 5);
  Scene c = generate_scene(five_targets(8));
  CHECK(c.image.pixels != a.image.pixels);

  for (Background bg : {Background::flat, Background::gradient, Background::noise}) {
    SceneConfig cfg = five_targets(99);
    cfg.background = bg;
    cfg.n_distractor = {3, 6};
    CHECK(generate_scene(cfg) == generate_scene(cfg));
  }
}

TEST_CASE("no distractors requested means none annotated") {
  SceneConfig cfg = five_targets(3);
  cfg.n_distractor = {0, 0};
  CHECK(generate_scene(cfg).annotation.distractor_boxes.empty());
}

TEST_CASE("target counts follow the configured range") {
  SceneConfig cfg;
  cfg.n_target = {10, 30};
  double sum = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    cfg.seed = seed;
    const auto n = generate_scene(cfg).annotation.count();
    CHECK(n >= 10);
    CHECK(n <= 30);
    sum += static_cast<double>(n);
  }
  const double mean = sum / 100.0;
  CHECK(mean >= 18.0);
  CHECK(mean <= 22.0);
}

TEST_CASE("pairwise overlap never exceeds the bound") {
  for (double bound : {0.0, 0.05, 0.3}) {
    SceneConfig cfg;
    cfg.n_target = {10, 20};
    cfg.n_distractor = {5, 10};
    cfg.max_overlap_iou = bound;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      cfg.seed = seed;
      const SceneAnnotation ann = generate_scene(cfg).annotation;
      std::vector<Box> all = ann.target_boxes;
      all.insert(all.end(), ann.distractor_boxes.begin(), ann.distractor_boxes.end());
      for (std::size_t i = 0; i < all.size(); ++i) {
        for (std::size_t j = i + 1; j < all.size(); ++j) CHECK(iou(all[i], all[j]) <= bound);
      }
    }
  }
}

TEST_CASE("every target box covers pixels of the target color") {
  const Rgb target{250, 10, 10};
  for (Shape shape : {Shape::disc, Shape::square, Shape::triangle, Shape::ring}) {
    SceneConfig cfg;
    cfg.n_target = {8, 12};
    cfg.n_distractor = {4, 4};
    cfg.target_shape = shape;
    cfg.distractor_shape = Shape::square;
    cfg.target_color = target;
    cfg.distractor_color = Rgb{10, 10, 250};
    cfg.color_jitter = 0.0;
    cfg.background = Background::flat;
    cfg.max_overlap_iou = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      cfg.seed = seed;
      Scene s = generate_scene(cfg);
      const int n = s.image.width;
      for (const Box& b : s.annotation.target_boxes) {
        int hits = 0;
        for (int y = static_cast<int>(b.y_min() * n); y < static_cast<int>(std::ceil(b.y_max() * n)); ++y) {
          for (int x = static_cast<int>(b.x_min() * n); x < static_cast<int>(std::ceil(b.x_max() * n)); ++x) {
            hits += s.image.at(x, y) == target;
          }
        }
        CHECK(hits >= 1);
      }
    }
  }
}

TEST_CASE("exemplars are the first three targets") {
  SceneConfig cfg;
  cfg.n_target = {1, 1};
  CHECK(generate_scene(cfg).annotation.exemplars == std::vector<std::size_t>{0});
  cfg.n_target = {6, 6};
  CHECK(generate_scene(cfg).annotation.exemplars == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("over-dense configs fail loudly") {
  SceneConfig cfg;
  cfg.n_target = {200, 200};
  cfg.size_range = {0.2, 0.25};
  cfg.max_overlap_iou = 0.0;
  CHECK_THROWS_AS(generate_scene(cfg), PlacementError);
}

TEST_CASE("config validation") {
  SceneConfig cfg;
  cfg.n_target = {0, 3};
  CHECK_THROWS_AS(cfg.validate(), SceneConfigError);
  cfg = SceneConfig{};
  cfg.max_overlap_iou = 1.0;
  CHECK_THROWS_AS(cfg.validate(), SceneConfigError);
  cfg = SceneConfig{};
  cfg.n_distractor = {1, 2};
  cfg.target_shape = cfg.distractor_shape = Shape::disc;
  cfg.target_color = cfg.distractor_color = Rgb{1, 2, 3};
  CHECK_THROWS_AS(cfg.validate(), SceneConfigError);
  cfg.distractor_color = Rgb{200, 2, 3};
  CHECK_NOTHROW(cfg.validate());
  CHECK_THROWS_AS(shape_from_string("hexagon"), SceneConfigError);
}

TEST_CASE("failure suite families") {
  auto suite = make_failure_suite(2024, 10);
  std::map<std::string, int> per_family;
  for (const FailureScene& f : suite) {
    ++per_family[f.family];
    const SceneAnnotation& a = f.scene.annotation;
    if (f.family == kFamilySingleTarget) CHECK(a.count() == 1);
    if (f.family == kFamilyDenseMulti) {
      CHECK(a.count() >= 30);
      CHECK(a.distractor_boxes.size() >= 30);
      CHECK(a.target_label != a.distractor_label);
    }
    if (f.family == kFamilyCrossImage) {
      REQUIRE(f.reference.has_value());
      CHECK(f.reference->annotation.count() == 1);
      CHECK(a.count() == 1);
    }
  }
  CHECK(per_family.size() == 3);
  for (const auto& [name, n] : per_family) CHECK(n >= 10);
  CHECK(make_failure_suite(2024, 10) == suite);
}

TEST_CASE("dataset round trip") {
  std::vector<Scene> scenes;
  SceneConfig cfg;
  cfg.n_target = {2, 12};
  cfg.n_distractor = {0, 4};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    cfg.seed = seed;
    scenes.push_back(generate_scene(cfg));
  }
  Dataset ds = make_dataset("roundtrip", scenes);
  const fs::path dir = scratch_dir("roundtrip");
  save_dataset(ds, dir);
  Dataset back = load_dataset(dir);
  CHECK(back.name == "roundtrip");
  REQUIRE(back.records.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(back.records[i].image_id == ds.records[i].image_id);
    CHECK(back.records[i].scene.annotation == ds.records[i].scene.annotation);
    CHECK(back.records[i].scene.image == ds.records[i].scene.image);
  }
  CHECK(back == ds);
}

TEST_CASE("dataset loader rejects malformed input") {
  Dataset ds = make_dataset("bad", {generate_scene(five_targets(1)), generate_scene(five_targets(2))});
  const fs::path dir = scratch_dir("malformed");
  save_dataset(ds, dir);
  const fs::path ann = dir / "annotations.json";
  std::string text;
  {
    std::ifstream in(ann);
    text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  SUBCASE("truncated file") {
    std::ofstream(ann) << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(load_dataset(dir), MalformedDatasetError);
  }
  SUBCASE("negative bbox width names the record") {
    auto j = nlohmann::json::parse(text);
    j["annotations"][3]["bbox"][2] = -4.0;
    j["annotations"][3].erase("bbox_normalized");
    std::ofstream(ann) << j.dump();
    try {
      load_dataset(dir);
      FAIL("expected MalformedDatasetError");
    } catch (const MalformedDatasetError& e) {
      CHECK(std::string(e.what()).find("annotations[3]") != std::string::npos);
    }
  }
  SUBCASE("unsupported version") {
    auto j = nlohmann::json::parse(text);
    j["info"]["format_version"] = 99;
    std::ofstream(ann) << j.dump();
    CHECK_THROWS_AS(load_dataset(dir), DatasetVersionError);
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(load_dataset(dir / "nope"), MalformedDatasetError); }
}

TEST_CASE("plain COCO files load with all annotations as targets") {
  const fs::path dir = scratch_dir("coco");
  fs::create_directories(dir / "images");
  write_png(Image(100, 80, {1, 2, 3}), dir / "images" / "a.png");
  std::ofstream(dir / "annotations.json") << R"({
    "images": [{"id": 4, "file_name": "a.png", "width": 100, "height": 80}],
    "annotations": [
      {"id": 1, "image_id": 4, "category_id": 1, "bbox": [10, 10, 20, 20]},
      {"id": 2, "image_id": 4, "category_id": 1, "bbox": [50, 40, 25, 30]}],
    "categories": [{"id": 1, "name": "apple"}]})";
  Dataset ds = load_dataset(dir);
  REQUIRE(ds.records.size() == 1);
  const SceneAnnotation& a = ds.records[0].scene.annotation;
  CHECK(a.count() == 2);
  CHECK(a.exemplars.empty());
  CHECK(a.target_boxes[1].x_min() == doctest::Approx(0.5));
  CHECK(a.target_boxes[1].y_max() == doctest::Approx(70.0 / 80.0));
}

TEST_CASE("filter_min_instances") {
  std::vector<Scene> scenes;
  for (int n : {3, 10, 25}) {
    SceneConfig cfg;
    cfg.n_target = {n, n};
    cfg.size_range = {0.03, 0.05};
    cfg.seed = static_cast<std::uint64_t>(n);
    scenes.push_back(generate_scene(cfg));
  }
  Dataset ds = make_dataset("counts", scenes);
  Dataset kept = filter_min_instances(ds, 10);
  REQUIRE(kept.records.size() == 2);
  CHECK(kept.records[0].scene.annotation.count() == 10);
  CHECK(kept.records[1].scene.annotation.count() == 25);
  CHECK(filter_min_instances(ds, 0) == ds);
  CHECK(filter_min_instances(ds, 26).records.empty());
}
