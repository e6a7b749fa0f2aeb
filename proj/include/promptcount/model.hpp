#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "promptcount/detection.hpp"
#include "promptcount/geometry.hpp"
#include "promptcount/image.hpp"

namespace promptcount {

class ModelConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int resolution = 256;
  int dim = 128;
  int num_queries = 100;
  int decoder_layers = 3;
  int heads = 8;
  double temperature_init = 10.0;
  double score_threshold = 0.3;
  /// Backbone widths for the stride 4/8/16/32 stages.
  std::vector<int> stage_channels{32, 64, 96, 128};
  int stem_channels = 16;
  int ffn_dim = 256;
  /// Finest pyramid stride the decoder cross-attends to (8, 16 or 32).
  /// Prompt pooling always sees every level.
  int decoder_min_stride = 16;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr int kPyramidStrides[] = {8, 16, 32};

/// Aspect-preserving resize into a square model frame, content centered.
struct Letterbox {
  int resolution = 0;
  int content_w = 0;
  int content_h = 0;
  int offset_x = 0;
  int offset_y = 0;

  static Letterbox fit(int image_w, int image_h, int resolution);

  double to_model_x(double x) const { return (offset_x + x * content_w) / resolution; }
  double to_model_y(double y) const { return (offset_y + y * content_h) / resolution; }
  double to_image_x(double x) const { return (x * resolution - offset_x) / content_w; }
  double to_image_y(double y) const { return (y * resolution - offset_y) / content_h; }
  Box to_model(const Box& b) const;
  /// Maps back to image coordinates, clamping parts that fall in the padding.
  Box to_image(double x_min, double y_min, double x_max, double y_max) const;

  friend bool operator==(const Letterbox&, const Letterbox&) = default;
};

class ImageInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A validated raster plus its content key.
class ImageInput {
 public:
  static constexpr int kMinSide = 64;
  static constexpr int kMaxSide = 1024;

  explicit ImageInput(Image img);

  const Image& image() const { return image_; }
  const std::string& key() const { return key_; }

 private:
  Image image_;
  std::string key_;
};

struct FeatureLevel {
  int stride = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;  // [channels, height, width]
  friend bool operator==(const FeatureLevel&, const FeatureLevel&) = default;
};

struct FeaturePyramid {
  std::string image_key;
  Letterbox letterbox;
  std::vector<FeatureLevel> levels;  // strides 8, 16, 32
  friend bool operator==(const FeaturePyramid&, const FeaturePyramid&) = default;
};

enum class Polarity { positive, negative };
using PromptGeometry = std::variant<Box, Point>;

struct PromptEntry {
  PromptGeometry geometry;
  Polarity polarity = Polarity::positive;
  std::string source_key;  // image key of the pyramid the prompt is drawn on
};

/// Prompt geometry as a box in the source image's normalized frame.
Box prompt_box(const PromptGeometry& g);

struct PromptEmbedding {
  std::vector<float> positive;
  std::optional<std::vector<float>> negative;
  std::size_t positive_count = 0;
  std::size_t negative_count = 0;
};

class PromptError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MissingPyramidError : public PromptError {
 public:
  using PromptError::PromptError;
};

class NoPositivePromptError : public PromptError {
 public:
  NoPositivePromptError() : PromptError("at least one positive prompt required") {}
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t training_seed = 0;
  std::uint32_t format_version = 0;
};

using PyramidMap = std::map<std::string, const FeaturePyramid*>;

namespace detail {
struct ModelState;
}

/// Image encoder, prompt encoder and box decoder behind one immutable
/// handle. All const member functions are safe to call concurrently.
class Model {
 public:
  /// Fresh weights drawn from `seed`.
  explicit Model(ModelConfig config, std::uint64_t seed = 0);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  static Model load(const std::filesystem::path& path);
  static CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);
  void save(const std::filesystem::path& path, std::uint64_t training_seed) const;

  const ModelConfig& config() const;

  FeaturePyramid encode_image(const ImageInput& img) const;

  /// Per-entry unit vectors before aggregation, in entry order.
  std::vector<std::vector<float>> encode_prompt_entries(const std::vector<PromptEntry>& prompts,
                                                        const PyramidMap& pyramids) const;
  PromptEmbedding encode_prompts(const std::vector<PromptEntry>& prompts, const PyramidMap& pyramids) const;

  /// Requires a positive vector. Boxes are returned in the target image's frame.
  DetectionSet decode(const PromptEmbedding& prompt, const FeaturePyramid& target) const;

  /// Training and verification code reaches the networks through here.
  detail::ModelState& state() const { return *state_; }

 private:
  explicit Model(std::unique_ptr<detail::ModelState> state);
  std::unique_ptr<detail::ModelState> state_;
};

}  // namespace promptcount
