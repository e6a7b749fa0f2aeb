#include "promptcount/training.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <set>
#include <thread>

#include "model/networks.hpp"
#include "promptcount/config_json.hpp"
#include "promptcount/rng.hpp"

namespace promptcount {

using nlohmann::json;

// --- config ---------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw TrainConfigError(m); };
  if (!(weights.cls > 0 && weights.l1 > 0 && weights.giou > 0 && weights.unmatched > 0)) {
    fail("loss weights must be positive");
  }
  if (!(learning_rate > 0) || !(weight_decay >= 0)) fail("learning_rate must be positive, weight_decay >= 0");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(final_lr_fraction >= 0 && final_lr_fraction <= 1)) fail("final_lr_fraction must be in [0,1]");
  if (!(grad_clip > 0)) fail("grad_clip must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (steps < 1) fail("steps must be >= 1");
  if (max_positive_prompts < 1) fail("max_positive_prompts must be >= 1");
  if (!(negative_prompt_rate >= 0 && negative_prompt_rate <= 1)) fail("negative_prompt_rate must be in [0,1]");
  try {
    model.validate();
    scene.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

json to_json(const TrainConfig& c) {
  json train{{"lambda_cls", c.weights.cls},
             {"lambda_l1", c.weights.l1},
             {"lambda_giou", c.weights.giou},
             {"unmatched_weight", c.weights.unmatched},
             {"learning_rate", c.learning_rate},
             {"weight_decay", c.weight_decay},
             {"warmup_steps", c.warmup_steps},
             {"final_lr_fraction", c.final_lr_fraction},
             {"grad_clip", c.grad_clip},
             {"batch_size", c.batch_size},
             {"steps", c.steps},
             {"seed", c.seed},
             {"aux_loss", c.aux_loss},
             {"max_positive_prompts", c.max_positive_prompts},
             {"negative_prompt_rate", c.negative_prompt_rate},
             {"init_checkpoint", c.init_checkpoint ? json(*c.init_checkpoint) : json(nullptr)}};
  return json{{"train", train}, {"model", to_json(c.model)}, {"scene", to_json(c.scene)}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw TrainConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "train" && key != "model" && key != "scene") throw TrainConfigError("unknown section '" + key + "'");
  }
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("scene")) c.scene = scene_config_from_json(j.at("scene"));
  } catch (const ConfigError& e) {
    throw TrainConfigError(e.what());
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    if (!t.is_object()) throw TrainConfigError("train: expected an object");
    auto get = [&](const char* key, auto& out) {
      if (!t.contains(key)) return;
      try {
        out = t.at(key).get<std::decay_t<decltype(out)>>();
      } catch (const json::exception&) {
        throw TrainConfigError(std::string("train.") + key + ": wrong type");
      }
    };
    static const std::set<std::string> known{
        "lambda_cls", "lambda_l1",  "lambda_giou", "unmatched_weight", "learning_rate", "weight_decay", "warmup_steps",
        "final_lr_fraction", "grad_clip", "batch_size", "steps", "seed", "aux_loss", "init_checkpoint", "max_positive_prompts",
        "negative_prompt_rate"};
    for (const auto& [key, _] : t.items()) {
      if (!known.contains(key)) throw TrainConfigError("train: unknown key '" + key + "'");
    }
    get("lambda_cls", c.weights.cls);
    get("lambda_l1", c.weights.l1);
    get("lambda_giou", c.weights.giou);
    get("unmatched_weight", c.weights.unmatched);
    get("learning_rate", c.learning_rate);
    get("weight_decay", c.weight_decay);
    get("warmup_steps", c.warmup_steps);
    get("final_lr_fraction", c.final_lr_fraction);
    get("grad_clip", c.grad_clip);
    get("batch_size", c.batch_size);
    get("steps", c.steps);
    get("seed", c.seed);
    get("aux_loss", c.aux_loss);
    get("max_positive_prompts", c.max_positive_prompts);
    get("negative_prompt_rate", c.negative_prompt_rate);
    if (t.contains("init_checkpoint") && !t.at("init_checkpoint").is_null()) {
      std::string path;
      get("init_checkpoint", path);
      c.init_checkpoint = path;
    }
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw TrainConfigError("cannot read config " + path.string());
  try {
    return train_config_from_json(json::parse(f));
  } catch (const json::parse_error& e) {
    throw TrainConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// --- scalar loss ----------------------------------------------------------

namespace {

double bce(double p, double target) {
  constexpr double eps = 1e-12;
  p = std::clamp(p, eps, 1.0 - eps);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

}  // namespace

LossBreakdown compute_loss(const DetectionSet& dets, const std::vector<Box>& gt, const MatchResult& match,
                           const LossWeights& w) {
  const std::size_t n = dets.size();
  if (dets.positive_scores.size() != n) throw MatchingError("detection set has no positive scores");
  std::vector<int> matched_gt(n, -1);
  for (auto [q, g] : match.pairs) {
    if (q >= n || g >= gt.size()) throw MatchingError("match refers to a missing query or box");
    matched_gt[q] = static_cast<int>(g);
  }
  LossBreakdown out;
  double weight_sum = 0.0;
  for (std::size_t q = 0; q < n; ++q) {
    const bool m = matched_gt[q] >= 0;
    const double wq = m ? 1.0 : w.unmatched;
    out.cls += wq * bce(dets.positive_scores[q], m ? 1.0 : 0.0);
    weight_sum += wq;
    if (m) {
      const Box& g = gt[static_cast<std::size_t>(matched_gt[q])];
      out.l1 += center_l1(dets.boxes[q], g);
      out.giou += 1.0 - giou(dets.boxes[q], g);
    }
  }
  if (weight_sum > 0) out.cls /= weight_sum;
  if (!match.pairs.empty()) {
    out.l1 /= static_cast<double>(match.pairs.size());
    out.giou /= static_cast<double>(match.pairs.size());
  }
  out.total = w.cls * out.cls + w.l1 * out.l1 + w.giou * out.giou;
  return out;
}

// --- samples --------------------------------------------------------------

TrainSample make_sample(const SceneConfig& scene, std::uint64_t seed, std::uint64_t index, int max_positive_prompts,
                        double negative_prompt_rate) {
  SceneConfig cfg = scene;
  cfg.seed = mix_seed(seed ^ scene.seed, index);
  Scene s = generate_scene(cfg);
  const auto& targets = s.annotation.target_boxes;
  const auto& distractors = s.annotation.distractor_boxes;
  Rng rng(mix_seed(cfg.seed, 0x70726f6d));
  const auto n = static_cast<std::int64_t>(targets.size());
  std::vector<std::size_t> order{static_cast<std::size_t>(rng.uniform_int(0, n - 1))};
  if (max_positive_prompts > 1) {
    const auto k = rng.uniform_int(1, std::min<std::int64_t>(max_positive_prompts, n));
    while (static_cast<std::int64_t>(order.size()) < k) {
      const auto i = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
      if (std::find(order.begin(), order.end(), i) == order.end()) order.push_back(i);
    }
  }
  TrainSample out;
  for (std::size_t i : order) out.prompts.push_back(targets[i]);
  if (negative_prompt_rate > 0 && !distractors.empty() && rng.uniform() < negative_prompt_rate) {
    out.negative =
        distractors[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(distractors.size()) - 1))];
  }
  out.image = std::move(s.image);
  out.targets = std::move(s.annotation.target_boxes);
  return out;
}

// --- tensor objective -----------------------------------------------------

namespace {

namespace F = torch::nn::functional;

struct PreparedBatch {
  torch::Tensor images;        // [B,3,R,R]
  torch::Tensor prompt_boxes;  // [P,4] corner form, model frame; positives, then negatives
  std::vector<int64_t> prompt_image;  // [P] image of each prompt box
  std::vector<int> negative_slot;     // [B] row of the image's negative among prompt boxes, or -1
  std::size_t positive_count = 0;
  std::vector<std::vector<Box>> targets;  // model frame
  std::vector<torch::Tensor> target_tensors;  // [M,4] center form
};

PreparedBatch prepare(const std::vector<TrainSample>& batch, int resolution, torch::Dtype dtype) {
  PreparedBatch p;
  std::vector<torch::Tensor> images;
  std::vector<double> prompts;
  auto add_prompt = [&](const Letterbox& lb, const Box& b, std::size_t image) {
    const Box m = lb.to_model(b);
    prompts.insert(prompts.end(), {m.x_min(), m.y_min(), m.x_max(), m.y_max()});
    p.prompt_image.push_back(static_cast<int64_t>(image));
  };
  std::vector<Letterbox> frames;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    if (s.prompts.empty()) throw std::invalid_argument("training sample without a positive prompt");
    const Letterbox lb = Letterbox::fit(s.image.width, s.image.height, resolution);
    frames.push_back(lb);
    images.push_back(detail::image_tensor(s.image, lb));
    for (const Box& b : s.prompts) add_prompt(lb, b, i);
    std::vector<Box> t;
    std::vector<double> flat;
    for (const Box& b : s.targets) {
      const Box m = lb.to_model(b);
      t.push_back(m);
      flat.insert(flat.end(), {m.cx(), m.cy(), m.width(), m.height()});
    }
    p.target_tensors.push_back(
        torch::tensor(flat, torch::kFloat64).view({static_cast<int64_t>(t.size()), 4}).to(dtype));
    p.targets.push_back(std::move(t));
  }
  p.positive_count = p.prompt_image.size();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    p.negative_slot.push_back(batch[i].negative ? static_cast<int>(p.prompt_image.size()) : -1);
    if (batch[i].negative) add_prompt(frames[i], *batch[i].negative, i);
  }
  p.images = torch::stack(images).to(dtype);
  p.prompt_boxes =
      torch::tensor(prompts, torch::kFloat64).view({static_cast<int64_t>(p.prompt_image.size()), 4}).to(dtype);
  return p;
}

struct LayerOutputs {
  std::vector<torch::Tensor> boxes;   // [B,Nq,4] center form
  std::vector<torch::Tensor> logits;  // [B,Nq]
  std::vector<torch::Tensor> negative_logits;  // [B,Nq], rows of images without a negative are unused
};

LayerOutputs forward(detail::NetworkImpl& net, const PreparedBatch& p) {
  auto levels = net.encode(p.images);
  const int64_t nb = p.images.size(0);
  auto vectors = net.embed_prompts(net.pool(levels, p.prompt_boxes, p.prompt_image));
  auto positive = vectors.slice(0, 0, nb);
  if (static_cast<int64_t>(p.positive_count) > nb) {
    // Same aggregation as inference: mean of unit vectors, renormalized.
    const auto first = p.prompt_image.begin();
    auto index = torch::tensor(std::vector<int64_t>(first, first + static_cast<std::ptrdiff_t>(p.positive_count)),
                               torch::kLong);
    positive = torch::zeros({nb, vectors.size(1)}, vectors.options())
                   .index_add(0, index, vectors.slice(0, 0, static_cast<int64_t>(p.positive_count)));
    positive = F::normalize(positive, F::NormalizeFuncOptions().dim(-1));
  }
  auto outs = net.decode(levels, positive);
  LayerOutputs r;
  r.boxes = outs.boxes;
  torch::Tensor negative;
  if (p.prompt_image.size() > p.positive_count) {
    std::vector<int64_t> rows;
    for (int slot : p.negative_slot) rows.push_back(slot >= 0 ? slot : 0);
    negative = vectors.index_select(0, torch::tensor(rows, torch::kLong));
  }
  for (const auto& e : outs.embeddings) {
    r.logits.push_back(detail::NetworkImpl::similarity_logits(e, positive, outs.temperature));
    if (negative.defined()) {
      r.negative_logits.push_back(detail::NetworkImpl::similarity_logits(e, negative, outs.temperature));
    }
  }
  return r;
}

/// log s and log(1 - s) for the suppressed score s = s+ * (1 - s-).
std::pair<torch::Tensor, torch::Tensor> log_scores(const torch::Tensor& logits, const torch::Tensor& negative_logits) {
  auto log_p = (F::logsigmoid(logits) + F::logsigmoid(-negative_logits)).clamp_max(-1e-12);
  auto log_q = torch::log(-torch::expm1(log_p)).clamp_min(-100.0);
  return {log_p, log_q};
}

MatchResult match_image(const torch::Tensor& boxes, const torch::Tensor& logits, const torch::Tensor& negative_logits,
                        const std::vector<Box>& targets, const LossWeights& w) {
  if (targets.empty()) return {};
  auto b = boxes.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  auto s = torch::sigmoid(logits.detach().to(torch::kCPU, torch::kFloat64));
  if (negative_logits.defined()) s = s * torch::sigmoid(-negative_logits.detach().to(torch::kCPU, torch::kFloat64));
  s = s.contiguous();
  if (!torch::isfinite(b).all().item<bool>() || !torch::isfinite(s).all().item<bool>()) {
    throw DivergenceError("network produced non-finite boxes or scores");
  }
  auto ba = b.accessor<double, 2>();
  std::vector<Box> pred;
  std::vector<double> scores(s.data_ptr<double>(), s.data_ptr<double>() + s.numel());
  for (int64_t q = 0; q < b.size(0); ++q) {
    pred.push_back(Box::clamped(ba[q][0] - 0.5 * ba[q][2], ba[q][1] - 0.5 * ba[q][3], ba[q][0] + 0.5 * ba[q][2],
                                ba[q][1] + 0.5 * ba[q][3]));
  }
  return hungarian_match(matching_cost(pred, scores, targets, w.match()));
}

struct LossTerms {
  torch::Tensor cls, l1, giou, total;
};

LossTerms image_loss(const torch::Tensor& boxes, const torch::Tensor& logits, const torch::Tensor& negative_logits,
                     const torch::Tensor& targets, const MatchResult& match, const LossWeights& w) {
  const int64_t nq = logits.size(0);
  auto opts = logits.options();
  std::vector<int64_t> rows, cols;
  for (auto [q, g] : match.pairs) {
    rows.push_back(static_cast<int64_t>(q));
    cols.push_back(static_cast<int64_t>(g));
  }
  auto target = torch::zeros({nq}, opts);
  auto weight = torch::full({nq}, w.unmatched, opts);
  LossTerms t;
  if (!rows.empty()) {
    auto r = torch::tensor(rows, torch::kLong);
    auto c = torch::tensor(cols, torch::kLong);
    target.index_fill_(0, r, 1.0);
    weight.index_fill_(0, r, 1.0);
    auto pred = boxes.index_select(0, r);
    auto gt = targets.index_select(0, c);
    t.l1 = (pred - gt).abs().sum(-1).mean();
    t.giou = (1.0 - detail::paired_giou(detail::center_to_corner(pred), detail::center_to_corner(gt))).mean();
  } else {
    t.l1 = torch::zeros({}, opts);
    t.giou = torch::zeros({}, opts);
  }
  torch::Tensor bce;
  if (negative_logits.defined()) {
    auto [log_p, log_q] = log_scores(logits, negative_logits);
    bce = -(target * log_p + (1.0 - target) * log_q);
  } else {
    bce = torch::binary_cross_entropy_with_logits(logits, target, {}, {}, at::Reduction::None);
  }
  t.cls = (weight * bce).sum() / weight.sum();
  t.total = w.cls * t.cls + w.l1 * t.l1 + w.giou * t.giou;
  return t;
}

using Matches = std::vector<std::vector<MatchResult>>;  // [layer][image]

torch::Tensor negative_row(const LayerOutputs& out, const PreparedBatch& p, std::size_t layer, std::size_t image) {
  if (p.negative_slot[image] < 0) return {};
  return out.negative_logits[layer][static_cast<int64_t>(image)];
}

Matches compute_matches(const LayerOutputs& out, const PreparedBatch& p, const LossWeights& w, bool all_layers) {
  Matches m(out.boxes.size());
  const std::size_t first = all_layers ? 0 : out.boxes.size() - 1;
  for (std::size_t l = first; l < out.boxes.size(); ++l) {
    for (std::size_t b = 0; b < p.targets.size(); ++b) {
      const auto i = static_cast<int64_t>(b);
      m[l].push_back(match_image(out.boxes[l][i], out.logits[l][i], negative_row(out, p, l, b), p.targets[b], w));
    }
  }
  return m;
}

struct Objective {
  torch::Tensor value;  // summed over supervised layers, batch-meaned per layer
  LossBreakdown last;   // final layer, batch mean
};

Objective objective(const LayerOutputs& out, const PreparedBatch& p, const Matches& m, const LossWeights& w) {
  Objective obj;
  obj.value = torch::zeros({}, out.logits.back().options());
  const auto nb = static_cast<double>(p.targets.size());
  for (std::size_t l = 0; l < out.boxes.size(); ++l) {
    if (m[l].empty()) continue;
    const bool last = l + 1 == out.boxes.size();
    for (std::size_t b = 0; b < p.targets.size(); ++b) {
      const auto i = static_cast<int64_t>(b);
      LossTerms t =
          image_loss(out.boxes[l][i], out.logits[l][i], negative_row(out, p, l, b), p.target_tensors[b], m[l][b], w);
      obj.value = obj.value + t.total / nb;
      if (last) {
        obj.last.cls += t.cls.item<double>() / nb;
        obj.last.l1 += t.l1.item<double>() / nb;
        obj.last.giou += t.giou.item<double>() / nb;
        obj.last.total += t.total.item<double>() / nb;
      }
    }
  }
  return obj;
}

std::vector<double> to_doubles(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

}  // namespace

BatchEvaluation evaluate_batch(const Model& model, const std::vector<TrainSample>& batch, const LossWeights& w) {
  torch::NoGradGuard no_grad;
  auto& net = *model.state().net;
  const auto p = prepare(batch, model.config().resolution, net.level_embed.scalar_type());
  const auto out = forward(net, p);
  const auto m = compute_matches(out, p, w, false);
  BatchEvaluation eval;
  eval.mean = objective(out, p, m, w).last;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto i = static_cast<int64_t>(b);
    ImageLossDetail d;
    const auto boxes = to_doubles(out.boxes.back()[i]);
    for (std::size_t q = 0; q + 3 < boxes.size(); q += 4) d.boxes.push_back({boxes[q], boxes[q + 1], boxes[q + 2], boxes[q + 3]});
    d.logits = to_doubles(out.logits.back()[i]);
    const auto neg = negative_row(out, p, out.boxes.size() - 1, b);
    if (neg.defined()) d.negative_logits = to_doubles(neg);
    d.targets = p.targets[b];
    d.match = m.back()[b];
    LossTerms t = image_loss(out.boxes.back()[i], out.logits.back()[i], neg, p.target_tensors[b], d.match, w);
    d.loss = {t.cls.item<double>(), t.l1.item<double>(), t.giou.item<double>(), t.total.item<double>()};
    eval.images.push_back(std::move(d));
  }
  return eval;
}

// --- training loop --------------------------------------------------------

namespace {

std::vector<TrainSample> serial_batch(const TrainConfig& cfg, int step) {
  std::vector<TrainSample> batch;
  for (int i = 0; i < cfg.batch_size; ++i) {
    batch.push_back(make_sample(cfg.scene, cfg.seed,
                                static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch_size) +
                                    static_cast<std::uint64_t>(i),
                                cfg.max_positive_prompts, cfg.negative_prompt_rate));
  }
  return batch;
}

/// Bounded producer/consumer hand-off of generated batches.
class BatchQueue {
 public:
  BatchQueue(const TrainConfig& cfg, std::size_t capacity) : cfg_(cfg), capacity_(capacity) {
    worker_ = std::thread([this] { run(); });
  }
  ~BatchQueue() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  std::vector<TrainSample> pop() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [this] { return !queue_.empty() || error_; });
    if (queue_.empty()) std::rethrow_exception(error_);
    auto batch = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return batch;
  }

 private:
  void run() {
    try {
      for (int step = 0; step < cfg_.steps; ++step) {
        auto batch = serial_batch(cfg_, step);
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [this] { return queue_.size() < capacity_ || stop_; });
        if (stop_) return;
        queue_.push_back(std::move(batch));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mutex_);
      error_ = std::current_exception();
      cv_.notify_all();
    }
  }

 private:
  const TrainConfig& cfg_;
  std::size_t capacity_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::vector<TrainSample>> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
  std::thread worker_;
};

double learning_rate(const TrainConfig& cfg, int step) {
  if (step < cfg.warmup_steps) return cfg.learning_rate * (step + 1) / cfg.warmup_steps;
  const double span = std::max(1, cfg.steps - cfg.warmup_steps);
  const double progress = std::min(1.0, (step - cfg.warmup_steps) / span);
  const double f = cfg.final_lr_fraction;
  return cfg.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void write_curve(const std::filesystem::path& path, const std::vector<CurvePoint>& curve) {
  std::ofstream f(path, std::ios::trunc);
  f << "step,cls,l1,giou,total\n";
  f.precision(17);
  for (const auto& c : curve) {
    f << c.step << ',' << c.loss.cls << ',' << c.loss.l1 << ',' << c.loss.giou << ',' << c.loss.total << '\n';
  }
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, bool deterministic,
                  const ProgressFn& progress) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream f(out_dir / "config.json", std::ios::trunc);
    f << to_json(cfg).dump(2) << '\n';
  }

  Model model = cfg.init_checkpoint ? Model::load(*cfg.init_checkpoint) : Model(cfg.model, cfg.seed);
  if (model.config() != cfg.model) {
    throw TrainConfigError("init checkpoint model config differs from the configured model");
  }
  auto& net = *model.state().net;
  net.train();
  torch::manual_seed(cfg.seed);

  auto params = net.parameters();
  torch::optim::AdamW optimizer(params, torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));

  std::unique_ptr<BatchQueue> queue;
  if (!deterministic) queue = std::make_unique<BatchQueue>(cfg, 4);

  TrainResult result;
  result.checkpoint = out_dir / "model.ckpt";
  result.curve_csv = out_dir / "loss.csv";
  const int checkpoint_every = 500;
  const auto t0 = std::chrono::steady_clock::now();

  for (int step = 0; step < cfg.steps; ++step) {
    auto batch = queue ? queue->pop() : serial_batch(cfg, step);
    const auto p = prepare(batch, cfg.model.resolution, torch::kFloat32);
    const auto out = forward(net, p);
    const auto m = compute_matches(out, p, cfg.weights, cfg.aux_loss);
    Objective obj = objective(out, p, m, cfg.weights);
    const double value = obj.value.item<double>();
    if (!std::isfinite(value)) {
      throw DivergenceError("loss became non-finite at step " + std::to_string(step + 1));
    }
    for (auto& group : optimizer.param_groups()) {
      static_cast<torch::optim::AdamWOptions&>(group.options()).lr(learning_rate(cfg, step));
    }
    optimizer.zero_grad();
    obj.value.backward();
    torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip);
    optimizer.step();

    CurvePoint point{step + 1, obj.last, value};
    result.curve.push_back(point);
    if (progress) progress(point);
    if ((step + 1) % checkpoint_every == 0 && step + 1 < cfg.steps) {
      net.eval();
      model.save(result.checkpoint, cfg.seed);
      net.train();
      write_curve(result.curve_csv, result.curve);
    }
  }
  net.eval();
  model.save(result.checkpoint, cfg.seed);
  write_curve(result.curve_csv, result.curve);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    std::ofstream f(out_dir / "summary.json", std::ios::trunc);
    f << nlohmann::json{{"steps", cfg.steps},
                        {"seconds", result.seconds},
                        {"final_objective", trailing_mean(result.curve, cfg.steps)}}
             .dump(2)
      << '\n';
  }
  return result;
}

double trailing_mean(const std::vector<CurvePoint>& curve, int step, int window) {
  if (step < 1 || step > static_cast<int>(curve.size()) || window < 1) {
    throw std::out_of_range("trailing_mean: step outside the curve");
  }
  const int first = std::max(0, step - window);
  double s = 0.0;
  for (int i = first; i < step; ++i) s += curve[static_cast<std::size_t>(i)].objective;
  return s / (step - first);
}

// --- gradient check -------------------------------------------------------

GradCheckReport grad_check(const ModelConfig& small, std::uint64_t seed, std::size_t samples, double h,
                           double floor) {
  if (small.dim > 32 || small.num_queries > 10 || small.resolution > 128) {
    throw TrainConfigError("grad_check needs dim <= 32, num_queries <= 10 and resolution <= 128");
  }
  Model model(small, seed);
  auto& net = *model.state().net;
  net.to(torch::kFloat64);

  SceneConfig scene;
  scene.image_size = small.resolution;
  scene.n_target = {1, 3};
  scene.size_range = {0.15, 0.3};
  scene.max_overlap_iou = 0.0;
  std::vector<TrainSample> batch{make_sample(scene, seed, 0), make_sample(scene, seed, 1)};
  const LossWeights w;
  const auto p = prepare(batch, small.resolution, torch::kFloat64);

  const auto base = forward(net, p);
  const Matches frozen = compute_matches(base, p, w, true);
  auto loss_value = [&] {
    torch::NoGradGuard no_grad;
    return objective(forward(net, p), p, frozen, w).value.item<double>();
  };

  for (auto& param : net.parameters()) param.mutable_grad() = torch::Tensor();
  Objective obj = objective(base, p, frozen, w);
  obj.value.backward();

  auto named = net.named_parameters();
  std::vector<torch::Tensor> params;
  std::vector<std::string> names;
  for (const auto& item : named) {
    names.push_back(item.key());
    params.push_back(item.value());
  }
  std::vector<int64_t> offsets{0};
  for (const auto& t : params) offsets.push_back(offsets.back() + t.numel());
  Rng rng(mix_seed(seed, 0x67726164));

  GradCheckReport report;
  report.floor = floor;
  for (std::size_t s = 0; s < samples; ++s) {
    const int64_t flat = rng.uniform_int(0, offsets.back() - 1);
    const auto which = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    const int64_t k = flat - offsets[which];
    auto& t = params[which];
    const double analytic = t.grad().defined() ? t.grad().view(-1)[k].item<double>() : 0.0;
    if (!std::isfinite(analytic)) throw DivergenceError("non-finite analytic gradient");
    double numeric;
    {
      torch::NoGradGuard no_grad;
      auto entry = t.view(-1)[k];
      const double orig = entry.item<double>();
      entry.fill_(orig + h);
      const double up = loss_value();
      entry.fill_(orig - h);
      const double down = loss_value();
      entry.fill_(orig);
      numeric = (up - down) / (2.0 * h);
    }
    const double abs_err = std::abs(analytic - numeric);
    const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
    report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
    if (rel >= report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_entry = names[which] + "[" + std::to_string(k) + "]";
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    ++report.parameters_checked;
  }
  return report;
}

}  // namespace promptcount
