#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptcount/scenegen.hpp"

namespace promptcount {

/// Unparseable or schema-violating annotations file. The message names the
/// first offending record.
class MalformedDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetVersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kDatasetFormatVersion = 1;

struct SceneRecord {
  std::int64_t image_id = 0;
  Scene scene;
  friend bool operator==(const SceneRecord&, const SceneRecord&) = default;
};

struct Dataset {
  std::string name;
  std::vector<SceneRecord> records;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Wraps generated scenes into a dataset with sequential image ids from 1.
Dataset make_dataset(std::string name, std::vector<Scene> scenes);

/// Writes `dir/images/*.png` and `dir/annotations.json` (COCO detection
/// layout plus an `exemplars` map).
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);

/// Reads a directory written by save_dataset, or any COCO-style detection
/// set. Images without an `exemplars` entry treat every annotation as a
/// target and have no exemplars.
Dataset load_dataset(const std::filesystem::path& dir);

Dataset filter_min_instances(const Dataset& ds, std::size_t k);

}  // namespace promptcount
