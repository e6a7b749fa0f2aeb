#include "promptcount/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace promptcount {

namespace {

bool in_unit(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

std::string describe(double x0, double y0, double x1, double y1) {
  return "(" + std::to_string(x0) + ", " + std::to_string(y0) + ", " + std::to_string(x1) + ", " +
         std::to_string(y1) + ")";
}

}  // namespace

Box::Box(double x_min, double y_min, double x_max, double y_max)
    : x_min_(x_min), y_min_(y_min), x_max_(x_max), y_max_(y_max) {
  if (!in_unit(x_min) || !in_unit(y_min) || !in_unit(x_max) || !in_unit(y_max)) {
    throw GeometryError("box coordinates outside [0,1]: " + describe(x_min, y_min, x_max, y_max));
  }
  if (!(x_min < x_max) || !(y_min < y_max)) {
    throw GeometryError("degenerate box: " + describe(x_min, y_min, x_max, y_max));
  }
}

Box Box::from_center(double cx, double cy, double w, double h) {
  return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

Box Box::clamped(double x_min, double y_min, double x_max, double y_max) {
  constexpr double kMinExtent = 1e-4;
  auto fix = [](double lo, double hi) {
    lo = std::clamp(lo, 0.0, 1.0);
    hi = std::clamp(hi, 0.0, 1.0);
    if (hi - lo < kMinExtent) {
      double mid = std::clamp(0.5 * (lo + hi), 0.5 * kMinExtent, 1.0 - 0.5 * kMinExtent);
      lo = mid - 0.5 * kMinExtent;
      hi = mid + 0.5 * kMinExtent;
    }
    return std::pair{lo, hi};
  };
  auto [x0, x1] = fix(x_min, x_max);
  auto [y0, y1] = fix(y_min, y_max);
  return Box(x0, y0, x1, y1);
}

Point::Point(double x_, double y_) : x(x_), y(y_) {
  if (!in_unit(x) || !in_unit(y)) {
    throw GeometryError("point outside [0,1]: (" + std::to_string(x) + ", " + std::to_string(y) + ")");
  }
}

Box point_to_box(const Point& p, double side) {
  return Box::clamped(p.x - 0.5 * side, p.y - 0.5 * side, p.x + 0.5 * side, p.y + 0.5 * side);
}

double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min()));
  const double ih = std::max(0.0, std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min()));
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

double giou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min()));
  const double ih = std::max(0.0, std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x_max(), b.x_max()) - std::min(a.x_min(), b.x_min());
  const double eh = std::max(a.y_max(), b.y_max()) - std::min(a.y_min(), b.y_min());
  const double enclosure = ew * eh;
  return inter / uni - std::max(0.0, enclosure - uni) / enclosure;
}

double box_area_pixels(const Box& b, int image_w, int image_h) {
  if (image_w <= 0 || image_h <= 0) {
    throw GeometryError("image dimensions must be positive");
  }
  return b.width() * image_w * (b.height() * image_h);
}

std::vector<std::size_t> nms_indices(const std::vector<Box>& boxes, const std::vector<double>& scores,
                                     double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw GeometryError("nms iou threshold must be in (0,1]");
  }
  if (boxes.size() != scores.size()) {
    throw GeometryError("nms: boxes and scores differ in length");
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return scores[l] > scores[r]; });

  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    bool suppressed = std::any_of(kept.begin(), kept.end(),
                                  [&](std::size_t k) { return iou(boxes[k], boxes[idx]) > iou_threshold; });
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

std::vector<ScoredBox> nms(const std::vector<ScoredBox>& dets, double iou_threshold) {
  std::vector<Box> boxes;
  std::vector<double> scores;
  boxes.reserve(dets.size());
  scores.reserve(dets.size());
  for (const auto& d : dets) {
    boxes.push_back(d.box);
    scores.push_back(d.score);
  }
  std::vector<ScoredBox> out;
  for (std::size_t i : nms_indices(boxes, scores, iou_threshold)) out.push_back(dets[i]);
  return out;
}

}  // namespace promptcount
