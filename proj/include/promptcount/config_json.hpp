#pragma once

// JSON forms of the configuration structs. Missing keys keep their defaults;
// unknown keys and wrongly typed values are rejected.

#include <json.hpp>
#include <stdexcept>

#include "promptcount/model.hpp"
#include "promptcount/scenegen.hpp"

namespace promptcount {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const SceneConfig& c);

ModelConfig model_config_from_json(const nlohmann::json& j);
SceneConfig scene_config_from_json(const nlohmann::json& j);

}  // namespace promptcount
