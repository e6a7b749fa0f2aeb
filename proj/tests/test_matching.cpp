#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "oracles.hpp"
#include "promptcount/matching.hpp"
#include "promptcount/rng.hpp"

using namespace promptcount;

TEST_CASE("hungarian fixtures") {
  auto two = hungarian_match(CostMatrix::from_rows({{1, 2}, {3, 1}}));
  CHECK(two.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});
  CHECK(two.total_cost == 2.0);

  auto one = hungarian_match(CostMatrix::from_rows({{4.25}}));
  CHECK(one.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}});
  CHECK(one.total_cost == 4.25);

  // More queries than ground truth: the cheapest rows win.
  auto tall = hungarian_match(CostMatrix::from_rows({{5}, {1}, {3}}));
  CHECK(tall.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}});
}

TEST_CASE("hungarian rejects non-finite costs") {
  CHECK_THROWS_AS(hungarian_match(CostMatrix::from_rows({{1, NAN}, {0, 1}})), MatchingError);
  CHECK_THROWS_AS(hungarian_match(CostMatrix::from_rows({{std::numeric_limits<double>::infinity()}})),
                  MatchingError);
}

TEST_CASE("hungarian equals the exhaustive optimum") {
  Rng rng(42);
  for (int trial = 0; trial < 300; ++trial) {
    const auto rows = static_cast<std::size_t>(rng.uniform_int(1, 7));
    const auto cols = static_cast<std::size_t>(rng.uniform_int(1, 7));
    const bool integral = trial % 3 == 0;
    std::vector<std::vector<double>> m(rows, std::vector<double>(cols));
    for (auto& row : m) {
      for (double& v : row) v = integral ? static_cast<double>(rng.uniform_int(0, 9)) : rng.uniform(-5.0, 20.0);
    }
    MatchResult r = hungarian_match(CostMatrix::from_rows(m));
    CHECK(r.pairs.size() == std::min(rows, cols));
    std::set<std::size_t> seen_rows, seen_cols;
    for (auto [a, b] : r.pairs) {
      seen_rows.insert(a);
      seen_cols.insert(b);
    }
    CHECK(seen_rows.size() == r.pairs.size());
    CHECK(seen_cols.size() == r.pairs.size());
    CHECK(r.total_cost == oracles::brute_force_assignment(m));
  }
}

TEST_CASE("matching cost fixtures") {
  const Box b(0.1, 0.1, 0.3, 0.4);
  CHECK(matching_cost({b}, {1.0}, {b})(0, 0) == 0.0);
  CHECK(matching_cost({b}, {0.5}, {b})(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(matching_cost({b}, {0.5}, {}), MatchingError);
}

TEST_CASE("matching cost entries match a scalar recomputation") {
  Rng rng(8);
  auto rand_box = [&] {
    const double w = rng.uniform(0.01, 0.5), h = rng.uniform(0.01, 0.5);
    const double x = rng.uniform(0, 1 - w), y = rng.uniform(0, 1 - h);
    return Box(x, y, x + w, y + h);
  };
  std::vector<Box> boxes, gt;
  std::vector<double> scores;
  for (int i = 0; i < 10; ++i) {
    boxes.push_back(rand_box());
    scores.push_back(rng.uniform());
  }
  for (int j = 0; j < 10; ++j) gt.push_back(rand_box());
  const MatchWeights w{2.0, 5.0, 2.0};
  CostMatrix c = matching_cost(boxes, scores, gt, w);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 10; ++j) {
      const Box& p = boxes[i];
      const Box& g = gt[j];
      // Center-form L1 and GIoU spelled out from corner coordinates.
      const double l1 = std::abs((p.x_min() + p.x_max()) / 2 - (g.x_min() + g.x_max()) / 2) +
                        std::abs((p.y_min() + p.y_max()) / 2 - (g.y_min() + g.y_max()) / 2) +
                        std::abs((p.x_max() - p.x_min()) - (g.x_max() - g.x_min())) +
                        std::abs((p.y_max() - p.y_min()) - (g.y_max() - g.y_min()));
      const double ix = std::max(0.0, std::min(p.x_max(), g.x_max()) - std::max(p.x_min(), g.x_min()));
      const double iy = std::max(0.0, std::min(p.y_max(), g.y_max()) - std::max(p.y_min(), g.y_min()));
      const double inter = ix * iy;
      const double uni = p.area() + g.area() - inter;
      const double enc = (std::max(p.x_max(), g.x_max()) - std::min(p.x_min(), g.x_min())) *
                         (std::max(p.y_max(), g.y_max()) - std::min(p.y_min(), g.y_min()));
      const double gi = inter / uni - (enc - uni) / enc;
      const double expected = 2.0 * (1.0 - scores[i]) + 5.0 * l1 + 2.0 * (1.0 - gi);
      CHECK(c(i, j) == doctest::Approx(expected).epsilon(1e-12));
      CHECK(std::isfinite(c(i, j)));
    }
  }
}
