#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "promptcount/geometry.hpp"

namespace promptcount {

/// Decoder output: one candidate per query, in query order.
struct DetectionSet {
  std::vector<Box> boxes;
  /// Final scores: s+ when there is no negative prompt, s+ * (1 - s-) otherwise.
  std::vector<double> scores;
  std::vector<double> positive_scores;
  /// Empty when the prompt embedding has no negative vector.
  std::vector<double> negative_scores;
  /// Unit-normalized query embeddings (length d each).
  std::vector<std::vector<float>> query_embeddings;

  std::size_t size() const { return boxes.size(); }
  friend bool operator==(const DetectionSet&, const DetectionSet&) = default;
};

/// Combines similarity scores into the returned score. Kept as a free
/// function so the suppression algebra is testable on its own.
inline double suppressed_score(double positive, std::optional<double> negative) {
  return negative ? positive * (1.0 - *negative) : positive;
}

struct CountResult {
  std::vector<Box> boxes;
  std::vector<double> scores;  // score-descending
  std::size_t count = 0;
  std::size_t round = 0;
  double threshold = 0.0;
};

class ThresholdError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Keeps detections with score >= threshold; count is their number.
CountResult count_from_detections(const DetectionSet& dets, double threshold);

/// Duplicate suppression over a whole detection set; dropped queries are
/// removed from every per-query field.
DetectionSet nms(const DetectionSet& dets, double iou_threshold);

}  // namespace promptcount
