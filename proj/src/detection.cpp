#include "promptcount/detection.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace promptcount {

CountResult count_from_detections(const DetectionSet& dets, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw ThresholdError("threshold must be in [0,1], got " + std::to_string(threshold));
  }
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < dets.scores.size(); ++i) {
    if (dets.scores[i] >= threshold) kept.push_back(i);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [&](std::size_t l, std::size_t r) { return dets.scores[l] > dets.scores[r]; });
  CountResult out;
  out.threshold = threshold;
  out.count = kept.size();
  for (std::size_t i : kept) {
    out.boxes.push_back(dets.boxes[i]);
    out.scores.push_back(dets.scores[i]);
  }
  return out;
}

DetectionSet nms(const DetectionSet& dets, double iou_threshold) {
  std::vector<std::size_t> kept = nms_indices(dets.boxes, dets.scores, iou_threshold);
  std::sort(kept.begin(), kept.end());
  DetectionSet out;
  for (std::size_t i : kept) {
    out.boxes.push_back(dets.boxes[i]);
    out.scores.push_back(dets.scores[i]);
    if (!dets.positive_scores.empty()) out.positive_scores.push_back(dets.positive_scores[i]);
    if (!dets.negative_scores.empty()) out.negative_scores.push_back(dets.negative_scores[i]);
    if (!dets.query_embeddings.empty()) out.query_embeddings.push_back(dets.query_embeddings[i]);
  }
  return out;
}

}  // namespace promptcount
