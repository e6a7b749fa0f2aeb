#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptcount/detection.hpp"
#include "promptcount/matching.hpp"
#include "promptcount/model.hpp"
#include "promptcount/scenegen.hpp"

namespace promptcount {

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  /// Weight of the classification term on unmatched queries.
  double unmatched = 0.1;

  MatchWeights match() const { return {cls, l1, giou}; }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double total = 0.0;
};

class TrainConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  LossWeights weights;
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  int warmup_steps = 200;
  /// Cosine decay ends at this fraction of the peak rate.
  double final_lr_fraction = 0.05;
  double grad_clip = 1.0;
  int batch_size = 8;
  int steps = 4000;
  std::uint64_t seed = 0;
  /// Also supervise every intermediate decoder layer.
  bool aux_loss = true;
  /// Each sample draws 1..max_positive_prompts distinct target boxes as
  /// positive prompts; their embeddings are averaged as at inference.
  int max_positive_prompts = 1;
  /// Fraction of samples with distractors that also carry a negative prompt
  /// on one of them. Those samples are scored s+ * (1 - s-) in the loss.
  double negative_prompt_rate = 0.0;
  /// Fine-tune from this checkpoint instead of fresh weights.
  std::optional<std::string> init_checkpoint;
  ModelConfig model;
  SceneConfig scene;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Full config file form: {"train": {...}, "model": {...}, "scene": {...}}.
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Scalar loss of one image against its ground truth. Scores are the
/// positive-prompt scores s+; matched queries are pulled to 1, the rest to 0
/// with the unmatched weight. Box terms are means over matched pairs.
LossBreakdown compute_loss(const DetectionSet& dets, const std::vector<Box>& gt, const MatchResult& match,
                           const LossWeights& w = {});

/// One self-prompted training example.
struct TrainSample {
  Image image;
  std::vector<Box> targets;
  std::vector<Box> prompts;  // positive, never empty
  std::optional<Box> negative;
};

/// Scene `index` of the stream defined by (scene config, seed). The first
/// prompt is one target drawn uniformly from the same seed; further positives
/// and the optional negative (on a distractor) are drawn after it, so the
/// defaults reproduce the single-prompt stream.
TrainSample make_sample(const SceneConfig& scene, std::uint64_t seed, std::uint64_t index, int max_positive_prompts = 1,
                        double negative_prompt_rate = 0.0);

/// Final-layer view of a batch, with every quantity the loss is built from.
struct ImageLossDetail {
  std::vector<std::array<double, 4>> boxes;  // center form, model frame
  std::vector<double> logits;                // similarity logits against the positive prompt
  std::vector<double> negative_logits;       // against the negative prompt, empty without one
  std::vector<Box> targets;                  // model frame
  MatchResult match;
  LossBreakdown loss;
};

struct BatchEvaluation {
  LossBreakdown mean;
  std::vector<ImageLossDetail> images;
};

/// Runs the training objective without gradients (final decoder layer only).
BatchEvaluation evaluate_batch(const Model& model, const std::vector<TrainSample>& batch, const LossWeights& w = {});

struct CurvePoint {
  int step = 0;
  LossBreakdown loss;  // final decoder layer, batch mean
  double objective = 0.0;  // optimized value, summed over supervised layers
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path curve_csv;
  std::vector<CurvePoint> curve;
  double seconds = 0.0;  // wall time of the optimization loop
};

using ProgressFn = std::function<void(const CurvePoint&)>;

/// Trains and writes model.ckpt, loss.csv, config.json and summary.json
/// (steps, wall seconds, trailing objective) into `out_dir`.
/// `deterministic` generates batches serially on the training thread.
/// Throws DivergenceError when the loss turns non-finite.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, bool deterministic = false,
                  const ProgressFn& progress = {});

/// Trailing-window mean of the curve's objective ending at `step` (inclusive).
double trailing_mean(const std::vector<CurvePoint>& curve, int step, int window = 50);

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t parameters_checked = 0;
  /// Denominator floor used in the relative error.
  double floor = 0.0;
  /// Entry with the largest relative error, e.g. "decoder.layers.0.ffn1.weight[17]".
  std::string worst_entry;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Central finite differences (step `h`, float64) against autograd on
/// `samples` randomly chosen scalar parameters. Matching is computed once on
/// the unperturbed forward and frozen. relative error =
/// |a - n| / max(|a|, |n|, floor). Requires dim <= 32, num_queries <= 10,
/// resolution <= 128; scenes are drawn at the model resolution.
GradCheckReport grad_check(const ModelConfig& small, std::uint64_t seed, std::size_t samples = 200, double h = 1e-3,
                           double floor = 1e-6);

}  // namespace promptcount
