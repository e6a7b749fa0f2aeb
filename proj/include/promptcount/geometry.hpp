#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace promptcount {

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Axis-aligned box in normalized image coordinates, corner form.
/// Construction rejects degenerate or out-of-frame boxes.
class Box {
 public:
  Box(double x_min, double y_min, double x_max, double y_max);

  /// Builds a box from center form (cx, cy, w, h).
  static Box from_center(double cx, double cy, double w, double h);

  /// Clamps to [0,1]^2 and widens to a minimal extent if the clamped box
  /// collapsed. Used for raw decoder outputs that may leave the frame.
  static Box clamped(double x_min, double y_min, double x_max, double y_max);

  double x_min() const { return x_min_; }
  double y_min() const { return y_min_; }
  double x_max() const { return x_max_; }
  double y_max() const { return y_max_; }
  double width() const { return x_max_ - x_min_; }
  double height() const { return y_max_ - y_min_; }
  double cx() const { return 0.5 * (x_min_ + x_max_); }
  double cy() const { return 0.5 * (y_min_ + y_max_); }
  double area() const { return width() * height(); }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  double x_min_, y_min_, x_max_, y_max_;
};

struct Point {
  Point(double x, double y);
  double x, y;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Side length of the pseudo-box a point prompt is expanded to.
inline constexpr double kPointPromptSide = 0.02;

Box point_to_box(const Point& p, double side = kPointPromptSide);

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

double box_area_pixels(const Box& b, int image_w, int image_h);

struct ScoredBox {
  Box box;
  double score;
};

inline constexpr double kDefaultNmsThreshold = 0.7;

/// Greedy score-descending suppression. Returns indices of the kept boxes
/// in descending score order (ties broken by lower index first).
std::vector<std::size_t> nms_indices(const std::vector<Box>& boxes, const std::vector<double>& scores,
                                     double iou_threshold);

std::vector<ScoredBox> nms(const std::vector<ScoredBox>& dets, double iou_threshold);

}  // namespace promptcount
