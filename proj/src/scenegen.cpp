#include "promptcount/scenegen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "promptcount/rng.hpp"

namespace promptcount {

namespace {

constexpr int kMaxPlacementAttempts = 10000;
constexpr int kMinBackgroundContrast = 150;  // L1 over RGB
constexpr int kMinSameShapeColorGap = 120;
constexpr std::array kConcreteShapes = {Shape::disc, Shape::square, Shape::triangle, Shape::ring};

int l1(Rgb a, Rgb b) { return std::abs(a.r - b.r) + std::abs(a.g - b.g) + std::abs(a.b - b.b); }

std::uint8_t clamp_channel(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

Rgb random_color(Rng& rng) {
  return {static_cast<std::uint8_t>(rng.uniform_int(0, 255)), static_cast<std::uint8_t>(rng.uniform_int(0, 255)),
          static_cast<std::uint8_t>(rng.uniform_int(0, 255))};
}

Rgb contrasting_color(Rng& rng, Rgb background, const std::optional<Rgb>& avoid) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    Rgb c = random_color(rng);
    if (l1(c, background) < kMinBackgroundContrast) continue;
    if (avoid && l1(c, *avoid) < kMinSameShapeColorGap) continue;
    return c;
  }
  return {static_cast<std::uint8_t>(255 - background.r), static_cast<std::uint8_t>(255 - background.g),
          static_cast<std::uint8_t>(255 - background.b)};
}

Shape concrete(Shape s, Rng& rng) {
  if (s != Shape::any) return s;
  return kConcreteShapes[static_cast<std::size_t>(rng.uniform_int(0, kConcreteShapes.size() - 1))];
}

struct Instance {
  Shape shape;
  double cx, cy, radius;  // pixels
  Rgb color;
};

bool covers(const Instance& in, double px, double py) {
  const double dx = px - in.cx;
  const double dy = py - in.cy;
  const double r = in.radius;
  switch (in.shape) {
    case Shape::disc:
      return dx * dx + dy * dy <= r * r;
    case Shape::square:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case Shape::triangle:
      // Apex at the top, base along the bottom edge of the bounding square.
      return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    case Shape::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
    case Shape::any:
      break;
  }
  return false;
}

void rasterize(Image& img, const Instance& in) {
  const int x0 = std::max(0, static_cast<int>(std::floor(in.cx - in.radius)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(in.cx + in.radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(in.cy - in.radius)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(in.cy + in.radius)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (covers(in, x + 0.5, y + 0.5)) img.set(x, y, in.color);
    }
  }
}

struct BackgroundPaint {
  Image image;
  Rgb mean;
};

BackgroundPaint paint_background(const SceneConfig& cfg, Rng& rng) {
  const int n = cfg.image_size;
  const Rgb base = random_color(rng);
  Image img(n, n, base);
  switch (cfg.background) {
    case Background::flat:
      return {std::move(img), base};
    case Background::gradient: {
      const Rgb end{clamp_channel(base.r + static_cast<double>(rng.uniform_int(-60, 60))),
                    clamp_channel(base.g + static_cast<double>(rng.uniform_int(-60, 60))),
                    clamp_channel(base.b + static_cast<double>(rng.uniform_int(-60, 60)))};
      const auto direction = rng.uniform_int(0, 2);  // horizontal, vertical, diagonal
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          double t = direction == 0 ? x : direction == 1 ? y : 0.5 * (x + y);
          t /= (n - 1);
          img.set(x, y,
                  {clamp_channel(base.r + t * (end.r - base.r)), clamp_channel(base.g + t * (end.g - base.g)),
                   clamp_channel(base.b + t * (end.b - base.b))});
        }
      }
      return {std::move(img), Rgb{static_cast<std::uint8_t>((base.r + end.r) / 2),
                                  static_cast<std::uint8_t>((base.g + end.g) / 2),
                                  static_cast<std::uint8_t>((base.b + end.b) / 2)}};
    }
    case Background::noise: {
      Rng noise(mix_seed(cfg.seed, 0x6e6f697365ULL));
      for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        img.pixels[i] = clamp_channel(img.pixels[i] + static_cast<double>(noise.uniform_int(-20, 20)));
      }
      return {std::move(img), base};
    }
  }
  return {std::move(img), base};
}

std::string label_for(Shape s) { return to_string(s); }

std::string default_image_ref(std::uint64_t seed) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "scene_%016llx.png", static_cast<unsigned long long>(seed));
  return buf;
}

}  // namespace

std::string to_string(Shape s) {
  switch (s) {
    case Shape::disc: return "disc";
    case Shape::square: return "square";
    case Shape::triangle: return "triangle";
    case Shape::ring: return "ring";
    case Shape::any: return "any";
  }
  return "any";
}

std::string to_string(Background b) {
  switch (b) {
    case Background::flat: return "flat";
    case Background::gradient: return "gradient";
    case Background::noise: return "noise";
  }
  return "flat";
}

Shape shape_from_string(const std::string& s) {
  for (Shape shape : {Shape::disc, Shape::square, Shape::triangle, Shape::ring, Shape::any}) {
    if (to_string(shape) == s) return shape;
  }
  throw SceneConfigError("unknown shape '" + s + "'");
}

Background background_from_string(const std::string& s) {
  for (Background b : {Background::flat, Background::gradient, Background::noise}) {
    if (to_string(b) == s) return b;
  }
  throw SceneConfigError("unknown background '" + s + "'");
}

void SceneConfig::validate() const {
  if (image_size < 64 || image_size > 1024) throw SceneConfigError("image_size must be in [64,1024]");
  if (n_target.min < 1) throw SceneConfigError("n_target.min must be >= 1");
  if (n_target.max < n_target.min) throw SceneConfigError("n_target range is empty");
  if (n_distractor.min < 0 || n_distractor.max < n_distractor.min) {
    throw SceneConfigError("n_distractor range is invalid");
  }
  if (!(max_overlap_iou >= 0.0 && max_overlap_iou < 1.0)) {
    throw SceneConfigError("max_overlap_iou must be in [0,1)");
  }
  if (!(size_range.min > 0.0 && size_range.max <= 1.0 && size_range.min <= size_range.max)) {
    throw SceneConfigError("size_range must satisfy 0 < min <= max <= 1");
  }
  if (size_range.min * image_size < 4.0) throw SceneConfigError("instances must span at least 4 pixels");
  if (!(color_jitter >= 0.0)) throw SceneConfigError("color_jitter must be non-negative");
  if (n_distractor.max > 0 && target_shape == distractor_shape && target_shape != Shape::any && target_color &&
      distractor_color && *target_color == *distractor_color) {
    throw SceneConfigError("targets and distractors must differ in shape or color");
  }
}

std::vector<Box> SceneAnnotation::exemplar_boxes() const {
  std::vector<Box> out;
  out.reserve(exemplars.size());
  for (std::size_t i : exemplars) out.push_back(target_boxes.at(i));
  return out;
}

Scene generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int n = cfg.image_size;

  const auto n_target = static_cast<int>(rng.uniform_int(cfg.n_target.min, cfg.n_target.max));
  const auto n_distractor = static_cast<int>(rng.uniform_int(cfg.n_distractor.min, cfg.n_distractor.max));

  BackgroundPaint bg = paint_background(cfg, rng);
  const Shape target_shape = concrete(cfg.target_shape, rng);
  const Shape distractor_shape = concrete(cfg.distractor_shape, rng);
  const Rgb target_color = cfg.target_color ? *cfg.target_color : contrasting_color(rng, bg.mean, std::nullopt);
  std::optional<Rgb> same_shape_avoid;
  if (distractor_shape == target_shape) same_shape_avoid = target_color;
  const Rgb distractor_color =
      cfg.distractor_color ? *cfg.distractor_color : contrasting_color(rng, bg.mean, same_shape_avoid);

  Scene scene;
  scene.image = std::move(bg.image);
  SceneAnnotation& ann = scene.annotation;
  ann.image_ref = default_image_ref(cfg.seed);
  ann.target_label = label_for(target_shape);
  ann.distractor_label = label_for(distractor_shape);
  if (ann.distractor_label == ann.target_label) ann.distractor_label += "_variant";

  std::vector<Box> placed;
  std::vector<Instance> instances;
  const int total = n_target + n_distractor;
  for (int k = 0; k < total; ++k) {
    const bool is_target = k < n_target;
    bool ok = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !ok; ++attempt) {
      const double side = rng.uniform(cfg.size_range.min, cfg.size_range.max) * n;
      const double r = 0.5 * side;
      const double cx = rng.uniform(r, n - r);
      const double cy = rng.uniform(r, n - r);
      const Box box = Box::clamped((cx - r) / n, (cy - r) / n, (cx + r) / n, (cy + r) / n);
      ok = std::all_of(placed.begin(), placed.end(),
                       [&](const Box& other) { return iou(box, other) <= cfg.max_overlap_iou; });
      if (!ok) continue;
      placed.push_back(box);
      instances.push_back({is_target ? target_shape : distractor_shape, cx, cy, r,
                           is_target ? target_color : distractor_color});
      (is_target ? ann.target_boxes : ann.distractor_boxes).push_back(box);
    }
    if (!ok) {
      throw PlacementError("could not place instance " + std::to_string(k + 1) + " of " + std::to_string(total) +
                           " within " + std::to_string(kMaxPlacementAttempts) + " attempts");
    }
  }

  for (Instance& in : instances) {
    if (cfg.color_jitter > 0.0) {
      in.color = {clamp_channel(in.color.r + cfg.color_jitter * rng.normal()),
                  clamp_channel(in.color.g + cfg.color_jitter * rng.normal()),
                  clamp_channel(in.color.b + cfg.color_jitter * rng.normal())};
    }
    rasterize(scene.image, in);
  }

  for (std::size_t i = 0; i < std::min(kMaxExemplars, ann.target_boxes.size()); ++i) ann.exemplars.push_back(i);
  return scene;
}

std::vector<FailureScene> make_failure_suite(std::uint64_t master_seed, int scenes_per_family) {
  std::vector<FailureScene> out;

  SceneConfig single;
  single.n_target = {1, 1};
  single.n_distractor = {30, 40};
  single.target_shape = Shape::disc;
  single.distractor_shape = Shape::ring;
  single.size_range = {0.03, 0.05};
  single.background = Background::flat;

  SceneConfig dense;
  dense.n_target = {30, 34};
  dense.n_distractor = {30, 34};
  dense.target_shape = Shape::disc;
  dense.distractor_shape = Shape::ring;
  dense.target_color = Rgb{200, 60, 60};
  dense.distractor_color = Rgb{175, 75, 55};
  dense.size_range = {0.03, 0.045};
  dense.background = Background::flat;

  SceneConfig cross_ref;
  cross_ref.n_target = {1, 1};
  cross_ref.n_distractor = {0, 0};
  cross_ref.target_shape = Shape::disc;
  cross_ref.target_color = Rgb{220, 40, 30};
  cross_ref.size_range = {0.2, 0.3};
  cross_ref.background = Background::flat;

  SceneConfig cross_tgt = cross_ref;
  cross_tgt.n_distractor = {30, 40};
  cross_tgt.distractor_shape = Shape::triangle;
  cross_tgt.distractor_color = Rgb{230, 220, 150};
  cross_tgt.size_range = {0.03, 0.05};

  for (int i = 0; i < scenes_per_family; ++i) {
    SceneConfig c = single;
    c.seed = mix_seed(master_seed, 1000 + i);
    out.push_back({kFamilySingleTarget, generate_scene(c), std::nullopt});
  }
  for (int i = 0; i < scenes_per_family; ++i) {
    SceneConfig c = dense;
    c.seed = mix_seed(master_seed, 2000 + i);
    out.push_back({kFamilyDenseMulti, generate_scene(c), std::nullopt});
  }
  for (int i = 0; i < scenes_per_family; ++i) {
    SceneConfig r = cross_ref;
    r.seed = mix_seed(master_seed, 3000 + i);
    SceneConfig t = cross_tgt;
    t.seed = mix_seed(master_seed, 3500 + i);
    out.push_back({kFamilyCrossImage, generate_scene(t), generate_scene(r)});
  }
  return out;
}

}  // namespace promptcount
