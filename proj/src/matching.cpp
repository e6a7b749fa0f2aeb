#include "promptcount/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace promptcount {

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

CostMatrix CostMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  CostMatrix m(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw MatchingError("ragged cost matrix");
    for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

double center_l1(const Box& a, const Box& b) {
  return std::abs(a.cx() - b.cx()) + std::abs(a.cy() - b.cy()) + std::abs(a.width() - b.width()) +
         std::abs(a.height() - b.height());
}

CostMatrix matching_cost(const std::vector<Box>& boxes, const std::vector<double>& scores,
                         const std::vector<Box>& gt, const MatchWeights& w) {
  if (gt.empty()) throw MatchingError("matching cost needs at least one ground-truth box");
  if (boxes.size() != scores.size()) throw MatchingError("boxes and scores differ in length");
  CostMatrix cost(boxes.size(), gt.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (std::size_t j = 0; j < gt.size(); ++j) {
      cost(i, j) = w.cls * (1.0 - scores[i]) + w.l1 * center_l1(boxes[i], gt[j]) +
                   w.giou * (1.0 - giou(boxes[i], gt[j]));
    }
  }
  return cost;
}

CostMatrix matching_cost(const DetectionSet& dets, const std::vector<Box>& gt, const MatchWeights& w) {
  return matching_cost(dets.boxes, dets.scores, gt, w);
}

namespace {

// Assigns every row of an n x m matrix (n <= m) to a distinct column.
// Returns col_of_row.
std::vector<std::size_t> assign_rows(std::size_t n, std::size_t m, auto&& at) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> row_of(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    row_of[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = row_of[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[row_of[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      row_of[j0] = row_of[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of_row(n);
  for (std::size_t j = 1; j <= m; ++j) {
    if (row_of[j] != 0) col_of_row[row_of[j] - 1] = j - 1;
  }
  return col_of_row;
}

}  // namespace

MatchResult hungarian_match(const CostMatrix& cost) {
  for (std::size_t r = 0; r < cost.rows(); ++r) {
    for (std::size_t c = 0; c < cost.cols(); ++c) {
      if (!std::isfinite(cost(r, c))) {
        throw MatchingError("non-finite cost at (" + std::to_string(r) + ", " + std::to_string(c) + ")");
      }
    }
  }
  MatchResult result;
  if (cost.rows() == 0 || cost.cols() == 0) return result;

  if (cost.rows() <= cost.cols()) {
    auto cols = assign_rows(cost.rows(), cost.cols(), [&](std::size_t r, std::size_t c) { return cost(r, c); });
    for (std::size_t r = 0; r < cols.size(); ++r) result.pairs.emplace_back(r, cols[r]);
  } else {
    auto rows = assign_rows(cost.cols(), cost.rows(), [&](std::size_t c, std::size_t r) { return cost(r, c); });
    for (std::size_t c = 0; c < rows.size(); ++c) result.pairs.emplace_back(rows[c], c);
    std::sort(result.pairs.begin(), result.pairs.end());
  }
  for (auto [r, c] : result.pairs) result.total_cost += cost(r, c);
  return result;
}

}  // namespace promptcount
