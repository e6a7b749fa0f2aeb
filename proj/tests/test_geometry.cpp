#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "promptcount/geometry.hpp"
#include "promptcount/rng.hpp"

using namespace promptcount;

namespace {

Box random_box(Rng& rng, double min_side = 0.01) {
  const double w = rng.uniform(min_side, 0.6);
  const double h = rng.uniform(min_side, 0.6);
  const double x = rng.uniform(0.0, 1.0 - w);
  const double y = rng.uniform(0.0, 1.0 - h);
  return Box(x, y, x + w, y + h);
}

// Corners on the raster lattice so pixel counting measures areas exactly.
Box lattice_box(Rng& rng, int res = 512) {
  const auto x0 = rng.uniform_int(0, res - 2);
  const auto y0 = rng.uniform_int(0, res - 2);
  const auto x1 = rng.uniform_int(x0 + 1, res);
  const auto y1 = rng.uniform_int(y0 + 1, res);
  return Box(static_cast<double>(x0) / res, static_cast<double>(y0) / res, static_cast<double>(x1) / res,
             static_cast<double>(y1) / res);
}

}  // namespace

TEST_CASE("box invariants are enforced at construction") {
  CHECK_THROWS_AS(Box(0.2, 0.2, 0.2, 0.5), GeometryError);
  CHECK_THROWS_AS(Box(0.3, 0.2, 0.1, 0.5), GeometryError);
  CHECK_THROWS_AS(Box(-0.1, 0.0, 0.5, 0.5), GeometryError);
  CHECK_THROWS_AS(Box(0.0, 0.0, 1.2, 0.5), GeometryError);
  CHECK_THROWS_AS(Box(0.0, 0.0, NAN, 0.5), GeometryError);
  CHECK_THROWS_AS(Point(1.1, 0.0), GeometryError);
  CHECK_NOTHROW(Box(0.0, 0.0, 1.0, 1.0));
}

TEST_CASE("clamped boxes stay valid") {
  Box b = Box::clamped(-0.2, 0.5, 0.1, 1.3);
  CHECK(b.x_min() == 0.0);
  CHECK(b.y_max() == 1.0);
  Box collapsed = Box::clamped(1.2, 0.4, 1.5, 0.6);
  CHECK(collapsed.x_max() <= 1.0);
  CHECK(collapsed.width() > 0.0);
}

TEST_CASE("point prompts become centered pseudo-boxes") {
  Box b = point_to_box(Point(0.5, 0.25));
  CHECK(b.width() == doctest::Approx(kPointPromptSide));
  CHECK(b.cx() == doctest::Approx(0.5));
  CHECK(b.cy() == doctest::Approx(0.25));
  Box corner = point_to_box(Point(0.0, 1.0));
  CHECK(corner.x_min() == 0.0);
  CHECK(corner.y_max() == 1.0);
}

TEST_CASE("iou fixtures") {
  Box b(0.1, 0.2, 0.4, 0.7);
  CHECK(iou(b, b) == 1.0);
  CHECK(iou(Box(0, 0, .1, .1), Box(.5, .5, .6, .6)) == 0.0);
  CHECK(iou(Box(0, 0, .2, .2), Box(.1, .1, .3, .3)) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("giou fixtures") {
  Box b(0.1, 0.2, 0.4, 0.7);
  CHECK(giou(b, b) == 1.0);
  CHECK(giou(Box(0, 0, .1, .1), Box(.2, 0, .3, .1)) == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
  const double far = giou(Box(0, 0, 1e-3, 1e-3), Box(1 - 1e-3, 1 - 1e-3, 1, 1));
  CHECK(far > -1.0);
  CHECK(far < -0.99);
}

TEST_CASE("iou is symmetric and giou never exceeds iou") {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    Box a = random_box(rng);
    Box b = random_box(rng);
    CHECK(iou(a, b) == iou(b, a));
    CHECK(giou(a, b) == giou(b, a));
    CHECK(giou(a, b) <= iou(a, b));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
  // Equality exactly when the union fills the enclosure.
  Box l(0.0, 0.0, 0.5, 1.0);
  Box r(0.5, 0.0, 1.0, 1.0);
  CHECK(giou(l, r) == iou(l, r));
  Box d(0.0, 0.0, 0.5, 0.5);
  Box e(0.5, 0.5, 1.0, 1.0);
  CHECK(giou(d, e) < iou(d, e));
}

TEST_CASE("iou and giou agree with a pixel-counting raster") {
  Rng rng(5);
  for (int i = 0; i < 40; ++i) {
    Box a = lattice_box(rng);
    Box b = lattice_box(rng);
    auto ref = oracles::raster_overlap({a.x_min(), a.y_min(), a.x_max(), a.y_max()},
                                       {b.x_min(), b.y_min(), b.x_max(), b.y_max()});
    CHECK(std::abs(iou(a, b) - ref.iou) < 5e-3);
    CHECK(std::abs(giou(a, b) - ref.giou) < 5e-3);
  }
}

TEST_CASE("box_area_pixels fixtures") {
  CHECK(box_area_pixels(Box(0, 0, 1, 1), 256, 256) == 65536.0);
  CHECK(box_area_pixels(Box(0, 0, .125, .125), 256, 256) == 1024.0);
  CHECK_THROWS_AS(box_area_pixels(Box(0, 0, 1, 1), 0, 256), GeometryError);
}

TEST_CASE("nms fixtures") {
  Box b(0.1, 0.1, 0.3, 0.3);
  auto kept = nms({{b, 0.9}, {b, 0.8}}, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  auto disjoint = nms({{Box(0, 0, .1, .1), 0.5}, {Box(.5, .5, .6, .6), 0.7}, {Box(.8, 0, .9, .1), 0.2}}, 0.5);
  CHECK(disjoint.size() == 3);

  CHECK(nms({}, 0.7).empty());
  CHECK_THROWS_AS(nms({{b, 0.9}}, 0.0), GeometryError);
  CHECK_THROWS_AS(nms({{b, 0.9}}, 1.5), GeometryError);
}

TEST_CASE("nms on chained overlaps matches the exhaustive oracle") {
  // a overlaps b, b overlaps c, a does not overlap c: greedy keeps a and c.
  std::vector<Box> chain{Box(0.00, 0.0, 0.30, 0.3), Box(0.10, 0.0, 0.40, 0.3), Box(0.20, 0.0, 0.50, 0.3)};
  std::vector<double> scores{0.9, 0.8, 0.7};
  auto overlap = [&](std::size_t i, std::size_t j) { return iou(chain[i], chain[j]); };
  auto expected = oracles::brute_force_nms(scores, overlap, 0.4);
  CHECK(nms_indices(chain, scores, 0.4) == expected);
  CHECK(expected == std::vector<std::size_t>{0, 2});

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 9));
    std::vector<Box> boxes;
    std::vector<double> s;
    for (int i = 0; i < n; ++i) {
      boxes.push_back(random_box(rng, 0.1));
      s.push_back(rng.uniform());
    }
    const double t = rng.uniform(0.05, 1.0);
    auto ov = [&](std::size_t i, std::size_t j) { return iou(boxes[i], boxes[j]); };
    CHECK(nms_indices(boxes, s, t) == oracles::brute_force_nms(s, ov, t));
  }
}

TEST_CASE("nms output properties") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScoredBox> dets;
    for (int i = 0; i < 30; ++i) dets.push_back({random_box(rng, 0.05), rng.uniform()});
    const double t = rng.uniform(0.1, 0.9);
    auto once = nms(dets, t);
    for (std::size_t i = 0; i < once.size(); ++i) {
      for (std::size_t j = i + 1; j < once.size(); ++j) CHECK(iou(once[i].box, once[j].box) <= t);
    }
    auto twice = nms(once, t);
    REQUIRE(twice.size() == once.size());
    for (std::size_t i = 0; i < once.size(); ++i) {
      CHECK(twice[i].box == once[i].box);
      CHECK(twice[i].score == once[i].score);
    }
  }
}
