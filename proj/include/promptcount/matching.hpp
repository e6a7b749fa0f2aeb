#pragma once

#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "promptcount/detection.hpp"
#include "promptcount/geometry.hpp"

namespace promptcount {

/// Dense row-major cost matrix, rows = queries, cols = ground-truth boxes.
class CostMatrix {
 public:
  CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static CostMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

 private:
  std::size_t rows_, cols_;
  std::vector<double> data_;
};

struct MatchResult {
  /// (query index, ground-truth index), sorted by query index.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double total_cost = 0.0;
};

class MatchingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MatchWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

/// L1 distance between boxes in center form (cx, cy, w, h).
double center_l1(const Box& a, const Box& b);

/// cost(i,j) = w.cls (1 - score_i) + w.l1 |box_i - gt_j|_1 + w.giou (1 - giou(box_i, gt_j)).
CostMatrix matching_cost(const std::vector<Box>& boxes, const std::vector<double>& scores,
                         const std::vector<Box>& gt, const MatchWeights& w = {});
CostMatrix matching_cost(const DetectionSet& dets, const std::vector<Box>& gt, const MatchWeights& w = {});

/// Exact minimum-cost assignment (Kuhn-Munkres with potentials). Assigns
/// min(rows, cols) pairs. Throws MatchingError on non-finite entries.
MatchResult hungarian_match(const CostMatrix& cost);

}  // namespace promptcount
