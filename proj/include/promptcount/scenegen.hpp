#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptcount/geometry.hpp"
#include "promptcount/image.hpp"

namespace promptcount {

class SceneConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Rejection sampling gave up; the config asks for more instances than fit.
class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// `any` draws a concrete shape per scene from the seeded stream.
enum class Shape { disc, square, triangle, ring, any };
enum class Background { flat, gradient, noise };

std::string to_string(Shape s);
std::string to_string(Background b);
Shape shape_from_string(const std::string& s);
Background background_from_string(const std::string& s);

struct CountRange {
  int min = 0;
  int max = 0;
  friend bool operator==(const CountRange&, const CountRange&) = default;
};

struct SizeRange {
  double min = 0.0;  // fraction of image width
  double max = 0.0;
  friend bool operator==(const SizeRange&, const SizeRange&) = default;
};

struct SceneConfig {
  int image_size = 256;
  CountRange n_target{5, 30};
  CountRange n_distractor{0, 0};
  Shape target_shape = Shape::any;
  Shape distractor_shape = Shape::any;
  // Unset colors are drawn per scene, contrasting with the background.
  std::optional<Rgb> target_color;
  std::optional<Rgb> distractor_color;
  SizeRange size_range{0.04, 0.09};
  double color_jitter = 8.0;
  double max_overlap_iou = 0.05;
  Background background = Background::gradient;
  std::uint64_t seed = 0;

  /// Throws SceneConfigError on a violated invariant.
  void validate() const;

  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

inline constexpr std::size_t kMaxExemplars = 3;

struct SceneAnnotation {
  std::string image_ref;  // file name inside a dataset's images/ directory
  std::vector<Box> target_boxes;
  std::vector<Box> distractor_boxes;
  std::string target_label;
  std::string distractor_label;
  /// Indices into target_boxes designated as exemplars (at most three).
  std::vector<std::size_t> exemplars;

  std::size_t count() const { return target_boxes.size(); }
  std::vector<Box> exemplar_boxes() const;

  friend bool operator==(const SceneAnnotation&, const SceneAnnotation&) = default;
};

struct Scene {
  Image image;
  SceneAnnotation annotation;
  friend bool operator==(const Scene&, const Scene&) = default;
};

Scene generate_scene(const SceneConfig& cfg);

/// Failure archetypes (single target among dense clutter, dense mixtures of
/// similar categories, cross-image prompting onto single-target scenes).
struct FailureScene {
  std::string family;
  Scene scene;
  /// Present for the cross-image family: the image the prompt is drawn on.
  std::optional<Scene> reference;
  friend bool operator==(const FailureScene&, const FailureScene&) = default;
};

inline constexpr const char* kFamilySingleTarget = "single-target";
inline constexpr const char* kFamilyDenseMulti = "dense-multi-object";
inline constexpr const char* kFamilyCrossImage = "cross-image-single-target";

std::vector<FailureScene> make_failure_suite(std::uint64_t master_seed = 2024, int scenes_per_family = 10);

}  // namespace promptcount
