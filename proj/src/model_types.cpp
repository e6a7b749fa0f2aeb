#include <algorithm>
#include <cmath>
#include <string>

#include "promptcount/model.hpp"

namespace promptcount {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ModelConfigError(m); };
  if (resolution < 64 || resolution > 1024) fail("resolution must be in [64,1024]");
  if (dim <= 0 || heads <= 0) fail("dim and heads must be positive");
  if (dim % heads != 0) fail("dim must be divisible by heads");
  if (dim % 4 != 0) fail("dim must be a multiple of 4");
  if (num_queries < 1) fail("num_queries must be >= 1");
  if (decoder_layers < 1) fail("decoder_layers must be >= 1");
  if (!(temperature_init > 0.0) || !std::isfinite(temperature_init)) fail("temperature_init must be positive");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) fail("score_threshold must be in [0,1]");
  if (stage_channels.size() != 4) fail("stage_channels must list four stages");
  for (int c : stage_channels) {
    if (c <= 0) fail("stage_channels must be positive");
  }
  if (decoder_min_stride != 8 && decoder_min_stride != 16 && decoder_min_stride != 32) {
    fail("decoder_min_stride must be 8, 16 or 32");
  }
  if (stem_channels <= 0 || ffn_dim <= 0) fail("stem_channels and ffn_dim must be positive");
}

Letterbox Letterbox::fit(int image_w, int image_h, int resolution) {
  if (image_w <= 0 || image_h <= 0 || resolution <= 0) throw std::invalid_argument("letterbox: sizes must be positive");
  const double scale = static_cast<double>(resolution) / std::max(image_w, image_h);
  Letterbox lb;
  lb.resolution = resolution;
  lb.content_w = std::clamp(static_cast<int>(std::lround(image_w * scale)), 1, resolution);
  lb.content_h = std::clamp(static_cast<int>(std::lround(image_h * scale)), 1, resolution);
  lb.offset_x = (resolution - lb.content_w) / 2;
  lb.offset_y = (resolution - lb.content_h) / 2;
  return lb;
}

Box Letterbox::to_model(const Box& b) const {
  return Box::clamped(to_model_x(b.x_min()), to_model_y(b.y_min()), to_model_x(b.x_max()), to_model_y(b.y_max()));
}

Box Letterbox::to_image(double x_min, double y_min, double x_max, double y_max) const {
  return Box::clamped(to_image_x(x_min), to_image_y(y_min), to_image_x(x_max), to_image_y(y_max));
}

ImageInput::ImageInput(Image img) : image_(std::move(img)) {
  if (image_.width < kMinSide || image_.height < kMinSide || image_.width > kMaxSide || image_.height > kMaxSide) {
    throw ImageInputError("image dimensions must be within [" + std::to_string(kMinSide) + "," +
                          std::to_string(kMaxSide) + "], got " + std::to_string(image_.width) + "x" +
                          std::to_string(image_.height));
  }
  key_ = content_key(image_);
}

Box prompt_box(const PromptGeometry& g) {
  if (const Box* b = std::get_if<Box>(&g)) return *b;
  return point_to_box(std::get<Point>(g));
}

}  // namespace promptcount
