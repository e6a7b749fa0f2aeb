#include "promptcount/config_json.hpp"

#include <array>
#include <set>
#include <string>

namespace promptcount {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const char* what) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(what) + "." + key + ": wrong type");
  }
}

json rgb_json(const std::optional<Rgb>& c) {
  if (!c) return nullptr;
  return json::array({c->r, c->g, c->b});
}

std::optional<Rgb> rgb_from(const json& j, const char* what) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string(what) + ": color must be [r, g, b]");
  Rgb c;
  std::uint8_t* out[] = {&c.r, &c.g, &c.b};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!j[i].is_number_integer() || j[i].get<int>() < 0 || j[i].get<int>() > 255) {
      throw ConfigError(std::string(what) + ": color channels must be integers in [0,255]");
    }
    *out[i] = static_cast<std::uint8_t>(j[i].get<int>());
  }
  return c;
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"resolution", c.resolution},
              {"dim", c.dim},
              {"num_queries", c.num_queries},
              {"decoder_layers", c.decoder_layers},
              {"heads", c.heads},
              {"temperature_init", c.temperature_init},
              {"score_threshold", c.score_threshold},
              {"stage_channels", c.stage_channels},
              {"stem_channels", c.stem_channels},
              {"ffn_dim", c.ffn_dim},
              {"decoder_min_stride", c.decoder_min_stride}};
}

ModelConfig model_config_from_json(const json& j) {
  constexpr const char* what = "model";
  reject_unknown(j,
                 {"resolution", "dim", "num_queries", "decoder_layers", "heads", "temperature_init", "score_threshold",
                  "stage_channels", "stem_channels", "ffn_dim", "decoder_min_stride"},
                 what);
  ModelConfig c;
  read(j, "resolution", c.resolution, what);
  read(j, "dim", c.dim, what);
  read(j, "num_queries", c.num_queries, what);
  read(j, "decoder_layers", c.decoder_layers, what);
  read(j, "heads", c.heads, what);
  read(j, "temperature_init", c.temperature_init, what);
  read(j, "score_threshold", c.score_threshold, what);
  read(j, "stage_channels", c.stage_channels, what);
  read(j, "stem_channels", c.stem_channels, what);
  read(j, "ffn_dim", c.ffn_dim, what);
  read(j, "decoder_min_stride", c.decoder_min_stride, what);
  try {
    c.validate();
  } catch (const ModelConfigError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

json to_json(const SceneConfig& c) {
  return json{{"image_size", c.image_size},
              {"n_target", {c.n_target.min, c.n_target.max}},
              {"n_distractor", {c.n_distractor.min, c.n_distractor.max}},
              {"target_shape", to_string(c.target_shape)},
              {"distractor_shape", to_string(c.distractor_shape)},
              {"target_color", rgb_json(c.target_color)},
              {"distractor_color", rgb_json(c.distractor_color)},
              {"size_range", {c.size_range.min, c.size_range.max}},
              {"color_jitter", c.color_jitter},
              {"max_overlap_iou", c.max_overlap_iou},
              {"background", to_string(c.background)},
              {"seed", c.seed}};
}

SceneConfig scene_config_from_json(const json& j) {
  constexpr const char* what = "scene";
  reject_unknown(j,
                 {"image_size", "n_target", "n_distractor", "target_shape", "distractor_shape", "target_color",
                  "distractor_color", "size_range", "color_jitter", "max_overlap_iou", "background", "seed"},
                 what);
  SceneConfig c;
  read(j, "image_size", c.image_size, what);
  std::array<int, 2> range{c.n_target.min, c.n_target.max};
  read(j, "n_target", range, what);
  c.n_target = {range[0], range[1]};
  range = {c.n_distractor.min, c.n_distractor.max};
  read(j, "n_distractor", range, what);
  c.n_distractor = {range[0], range[1]};
  std::array<double, 2> sizes{c.size_range.min, c.size_range.max};
  read(j, "size_range", sizes, what);
  c.size_range = {sizes[0], sizes[1]};
  try {
    if (j.contains("target_shape")) c.target_shape = shape_from_string(j.at("target_shape").get<std::string>());
    if (j.contains("distractor_shape"))
      c.distractor_shape = shape_from_string(j.at("distractor_shape").get<std::string>());
    if (j.contains("background")) c.background = background_from_string(j.at("background").get<std::string>());
  } catch (const json::exception&) {
    throw ConfigError("scene: shape and background must be strings");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  if (j.contains("target_color")) c.target_color = rgb_from(j.at("target_color"), "scene.target_color");
  if (j.contains("distractor_color")) c.distractor_color = rgb_from(j.at("distractor_color"), "scene.distractor_color");
  read(j, "color_jitter", c.color_jitter, what);
  read(j, "max_overlap_iou", c.max_overlap_iou, what);
  read(j, "seed", c.seed, what);
  try {
    c.validate();
  } catch (const SceneConfigError& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  return c;
}

}  // namespace promptcount
