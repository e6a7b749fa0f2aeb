#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptcount/dataset.hpp"
#include "promptcount/model.hpp"

namespace promptcount {

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class EmptyRecordsError : public MetricsError {
 public:
  EmptyRecordsError() : MetricsError("metrics need at least one record") {}
};
/// NMAE is undefined for an image whose ground-truth count is zero.
class ZeroGroundTruthError : public MetricsError {
 public:
  using MetricsError::MetricsError;
};
class InsufficientExemplarsError : public MetricsError {
 public:
  using MetricsError::MetricsError;
};

struct EvalRecord {
  std::string image_id;
  std::string group;  // target category label
  std::size_t gt_count = 0;
  std::size_t predicted = 0;

  double abs_error() const;
  /// |gt - pred| / gt; throws ZeroGroundTruthError when gt is zero.
  double normalized_error() const;
  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

double mae(const std::vector<EvalRecord>& records);
double nmae(const std::vector<EvalRecord>& records);

enum class SizeBin { small, medium, large };
std::string to_string(SizeBin b);

/// COCO area bins: small < 32^2 <= medium <= 96^2 < large (pixel area).
SizeBin size_bin(double area_pixels);

struct SizeBins {
  std::size_t small = 0;
  std::size_t medium = 0;
  std::size_t large = 0;
  std::size_t total() const { return small + medium + large; }
  friend bool operator==(const SizeBins&, const SizeBins&) = default;
};

/// Bins every target instance of the dataset by pixel area.
SizeBins size_stratify(const Dataset& ds);

struct GroupBreakdown {
  std::string group;
  std::size_t images = 0;
  double sum_abs_error = 0.0;
  double sum_normalized_error = 0.0;
  double mae = 0.0;
  double nmae = 0.0;
  friend bool operator==(const GroupBreakdown&, const GroupBreakdown&) = default;
};

struct MetricsReport {
  std::string dataset;
  std::string checkpoint;
  int shots = 0;
  double threshold = 0.0;
  std::size_t images = 0;  // J
  double mae = 0.0;
  double nmae = 0.0;
  SizeBins size_bins;
  std::vector<GroupBreakdown> groups;  // sorted by group name
  std::vector<EvalRecord> records;     // dataset order
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Produces a predicted count for one image given its positive exemplars.
class CountingBackend {
 public:
  virtual ~CountingBackend() = default;
  virtual std::size_t count(const SceneRecord& record, const std::vector<Box>& exemplars, double threshold) = 0;
};

/// Returns the ground-truth count; pins the protocol plumbing in tests.
class OracleBackend : public CountingBackend {
 public:
  std::size_t count(const SceneRecord& record, const std::vector<Box>& exemplars, double threshold) override;
};

/// Prompts the model with the exemplars on the image itself.
class ModelBackend : public CountingBackend {
 public:
  explicit ModelBackend(std::shared_ptr<const Model> model, std::optional<double> nms_threshold = std::nullopt);
  std::size_t count(const SceneRecord& record, const std::vector<Box>& exemplars, double threshold) override;

 private:
  std::shared_ptr<const Model> model_;
  std::optional<double> nms_threshold_;
};

/// First `shots` exemplars of each image become positive prompts on that
/// image. Throws InsufficientExemplarsError listing every short image id.
MetricsReport k_shot_eval(const Dataset& ds, CountingBackend& backend, int shots, double threshold,
                          const std::string& checkpoint_label = "");

/// Aggregates records into a report (groups, MAE, NMAE).
MetricsReport make_report(std::vector<EvalRecord> records, const SizeBins& bins, int shots, double threshold,
                          std::string dataset, std::string checkpoint);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);
std::string summary_table(const MetricsReport& r);

/// Writes `dir/report.json` and `dir/summary.txt`.
void emit_report(const MetricsReport& r, const std::filesystem::path& dir);

}  // namespace promptcount
