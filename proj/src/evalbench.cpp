#include "promptcount/evalbench.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "promptcount/detection.hpp"

namespace promptcount {

using nlohmann::json;

double EvalRecord::abs_error() const {
  return std::abs(static_cast<double>(gt_count) - static_cast<double>(predicted));
}

double EvalRecord::normalized_error() const {
  if (gt_count == 0) throw ZeroGroundTruthError("image '" + image_id + "' has a ground-truth count of zero");
  return abs_error() / static_cast<double>(gt_count);
}

double mae(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw EmptyRecordsError();
  double s = 0.0;
  for (const auto& r : records) s += r.abs_error();
  return s / static_cast<double>(records.size());
}

double nmae(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw EmptyRecordsError();
  double s = 0.0;
  for (const auto& r : records) s += r.normalized_error();
  return s / static_cast<double>(records.size());
}

std::string to_string(SizeBin b) {
  switch (b) {
    case SizeBin::small:
      return "small";
    case SizeBin::medium:
      return "medium";
    case SizeBin::large:
      return "large";
  }
  return "?";
}

SizeBin size_bin(double area) {
  if (area < 1024.0) return SizeBin::small;
  if (area <= 9216.0) return SizeBin::medium;
  return SizeBin::large;
}

SizeBins size_stratify(const Dataset& ds) {
  SizeBins bins;
  for (const auto& rec : ds.records) {
    const Image& img = rec.scene.image;
    for (const Box& b : rec.scene.annotation.target_boxes) {
      switch (size_bin(box_area_pixels(b, img.width, img.height))) {
        case SizeBin::small:
          ++bins.small;
          break;
        case SizeBin::medium:
          ++bins.medium;
          break;
        case SizeBin::large:
          ++bins.large;
          break;
      }
    }
  }
  return bins;
}

// --- backends -------------------------------------------------------------

std::size_t OracleBackend::count(const SceneRecord& record, const std::vector<Box>&, double) {
  return record.scene.annotation.count();
}

ModelBackend::ModelBackend(std::shared_ptr<const Model> model, std::optional<double> nms_threshold)
    : model_(std::move(model)), nms_threshold_(nms_threshold) {}

std::size_t ModelBackend::count(const SceneRecord& record, const std::vector<Box>& exemplars, double threshold) {
  const ImageInput input(record.scene.image);
  const FeaturePyramid pyramid = model_->encode_image(input);
  std::vector<PromptEntry> prompts;
  for (const Box& b : exemplars) prompts.push_back({b, Polarity::positive, input.key()});
  const PyramidMap pyramids{{input.key(), &pyramid}};
  DetectionSet dets = model_->decode(model_->encode_prompts(prompts, pyramids), pyramid);
  if (nms_threshold_) dets = nms(dets, *nms_threshold_);
  return count_from_detections(dets, threshold).count;
}

// --- protocol -------------------------------------------------------------

MetricsReport make_report(std::vector<EvalRecord> records, const SizeBins& bins, int shots, double threshold,
                          std::string dataset, std::string checkpoint) {
  MetricsReport r;
  r.dataset = std::move(dataset);
  r.checkpoint = std::move(checkpoint);
  r.shots = shots;
  r.threshold = threshold;
  r.images = records.size();
  r.mae = mae(records);
  r.nmae = nmae(records);
  r.size_bins = bins;
  std::map<std::string, GroupBreakdown> groups;
  for (const auto& rec : records) {
    auto& g = groups[rec.group];
    g.group = rec.group;
    ++g.images;
    g.sum_abs_error += rec.abs_error();
    g.sum_normalized_error += rec.normalized_error();
  }
  for (auto& [_, g] : groups) {
    g.mae = g.sum_abs_error / static_cast<double>(g.images);
    g.nmae = g.sum_normalized_error / static_cast<double>(g.images);
    r.groups.push_back(g);
  }
  r.records = std::move(records);
  return r;
}

MetricsReport k_shot_eval(const Dataset& ds, CountingBackend& backend, int shots, double threshold,
                          const std::string& checkpoint_label) {
  if (shots < 1 || shots > static_cast<int>(kMaxExemplars)) throw MetricsError("shots must be 1, 2 or 3");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw MetricsError("threshold must be in [0,1]");
  std::string short_ids;
  for (const auto& rec : ds.records) {
    if (rec.scene.annotation.exemplars.size() < static_cast<std::size_t>(shots)) {
      short_ids += (short_ids.empty() ? "" : ", ") + std::to_string(rec.image_id);
    }
  }
  if (!short_ids.empty()) {
    throw InsufficientExemplarsError("images with fewer than " + std::to_string(shots) + " exemplars: " + short_ids);
  }
  std::vector<EvalRecord> records;
  for (const auto& rec : ds.records) {
    auto exemplars = rec.scene.annotation.exemplar_boxes();
    exemplars.erase(exemplars.begin() + shots, exemplars.end());
    EvalRecord r;
    r.image_id = std::to_string(rec.image_id);
    r.group = rec.scene.annotation.target_label;
    r.gt_count = rec.scene.annotation.count();
    r.predicted = backend.count(rec, exemplars, threshold);
    records.push_back(std::move(r));
  }
  return make_report(std::move(records), size_stratify(ds), shots, threshold, ds.name, checkpoint_label);
}

// --- serialization --------------------------------------------------------

json to_json(const MetricsReport& r) {
  json groups = json::array();
  for (const auto& g : r.groups) {
    groups.push_back({{"group", g.group},
                      {"images", g.images},
                      {"sum_abs_error", g.sum_abs_error},
                      {"sum_normalized_error", g.sum_normalized_error},
                      {"mae", g.mae},
                      {"nmae", g.nmae}});
  }
  json records = json::array();
  for (const auto& rec : r.records) {
    records.push_back(
        {{"image_id", rec.image_id}, {"group", rec.group}, {"gt_count", rec.gt_count}, {"predicted", rec.predicted}});
  }
  return json{{"dataset", r.dataset},
              {"checkpoint", r.checkpoint},
              {"protocol", {{"shots", r.shots}, {"threshold", r.threshold}}},
              {"images", r.images},
              {"mae", r.mae},
              {"nmae", r.nmae},
              {"size_bins", {{"small", r.size_bins.small}, {"medium", r.size_bins.medium}, {"large", r.size_bins.large}}},
              {"groups", groups},
              {"records", records}};
}

MetricsReport report_from_json(const json& j) {
  try {
    MetricsReport r;
    r.dataset = j.at("dataset").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.shots = j.at("protocol").at("shots").get<int>();
    r.threshold = j.at("protocol").at("threshold").get<double>();
    r.images = j.at("images").get<std::size_t>();
    r.mae = j.at("mae").get<double>();
    r.nmae = j.at("nmae").get<double>();
    const auto& bins = j.at("size_bins");
    r.size_bins = {bins.at("small").get<std::size_t>(), bins.at("medium").get<std::size_t>(),
                   bins.at("large").get<std::size_t>()};
    for (const auto& g : j.at("groups")) {
      r.groups.push_back({g.at("group").get<std::string>(), g.at("images").get<std::size_t>(),
                          g.at("sum_abs_error").get<double>(), g.at("sum_normalized_error").get<double>(),
                          g.at("mae").get<double>(), g.at("nmae").get<double>()});
    }
    for (const auto& rec : j.at("records")) {
      r.records.push_back({rec.at("image_id").get<std::string>(), rec.at("group").get<std::string>(),
                           rec.at("gt_count").get<std::size_t>(), rec.at("predicted").get<std::size_t>()});
    }
    return r;
  } catch (const json::exception& e) {
    throw MetricsError(std::string("malformed report: ") + e.what());
  }
}

std::string summary_table(const MetricsReport& r) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "dataset: %s\ncheckpoint: %s\nprotocol: %d-shot, threshold %.2f\n\n",
                r.dataset.c_str(), r.checkpoint.c_str(), r.shots, r.threshold);
  out += line;
  std::snprintf(line, sizeof(line), "%-24s %8s %10s %10s\n", "group", "images", "MAE", "NMAE");
  out += line;
  for (const auto& g : r.groups) {
    std::snprintf(line, sizeof(line), "%-24s %8zu %10.2f %10.2f\n", g.group.c_str(), g.images, g.mae, g.nmae);
    out += line;
  }
  std::snprintf(line, sizeof(line), "%-24s %8zu %10.2f %10.2f\n\n", "total", r.images, r.mae, r.nmae);
  out += line;
  std::snprintf(line, sizeof(line), "instances by size: small %zu, medium %zu, large %zu\n", r.size_bins.small,
                r.size_bins.medium, r.size_bins.large);
  out += line;
  return out;
}

void emit_report(const MetricsReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
    if (!f) throw std::runtime_error("failed writing " + p.string());
  };
  write(dir / "report.json", to_json(r).dump(2) + "\n");
  write(dir / "summary.txt", summary_table(r));
}

}  // namespace promptcount
