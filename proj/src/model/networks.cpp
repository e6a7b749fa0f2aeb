#include "model/networks.hpp"

#include <cmath>
#include <numbers>

namespace promptcount::detail {

namespace F = torch::nn::functional;

namespace {

int norm_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

torch::nn::Conv2dOptions conv3x3(int in, int out, int stride) {
  return torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).padding_mode(torch::kReplicate);
}

/// [..., C] -> [..., C * n] sinusoidal features (n/2 frequencies, sin then cos).
torch::Tensor sine_embed(const torch::Tensor& values, int n) {
  const int64_t half = n / 2;
  auto opts = values.options();
  auto k = torch::arange(half, opts);
  auto freqs = 2.0 * std::numbers::pi * torch::pow(10000.0, -k / static_cast<double>(half));
  auto angles = values.unsqueeze(-1) * freqs;  // [..., C, half]
  auto emb = torch::cat({angles.sin(), angles.cos()}, -1);
  auto sizes = values.sizes().vec();
  sizes.back() *= n;
  return emb.reshape(sizes);
}

torch::Tensor logit(const torch::Tensor& p) { return torch::log(p / (1.0 - p)); }

}  // namespace

int select_level(double box_size_px) {
  const double target = box_size_px / 8.0;
  int best = 0;
  for (int i = 1; i < 3; ++i) {
    if (std::abs(kPyramidStrides[i] - target) < std::abs(kPyramidStrides[best] - target)) best = i;
  }
  return best;
}

torch::Tensor sine_position_encoding(const torch::Tensor& xy, int dim) { return sine_embed(xy, dim / 2); }

torch::Tensor center_to_corner(const torch::Tensor& b) {
  auto c = b.unbind(-1);
  return torch::stack({c[0] - 0.5 * c[2], c[1] - 0.5 * c[3], c[0] + 0.5 * c[2], c[1] + 0.5 * c[3]}, -1);
}

torch::Tensor corner_to_center(const torch::Tensor& b) {
  auto c = b.unbind(-1);
  return torch::stack({0.5 * (c[0] + c[2]), 0.5 * (c[1] + c[3]), c[2] - c[0], c[3] - c[1]}, -1);
}

torch::Tensor paired_giou(const torch::Tensor& a, const torch::Tensor& b) {
  auto area_a = (a.select(-1, 2) - a.select(-1, 0)) * (a.select(-1, 3) - a.select(-1, 1));
  auto area_b = (b.select(-1, 2) - b.select(-1, 0)) * (b.select(-1, 3) - b.select(-1, 1));
  auto lt = torch::max(a.slice(-1, 0, 2), b.slice(-1, 0, 2));
  auto rb = torch::min(a.slice(-1, 2, 4), b.slice(-1, 2, 4));
  auto wh = (rb - lt).clamp_min(0.0);
  auto inter = wh.select(-1, 0) * wh.select(-1, 1);
  auto uni = area_a + area_b - inter;
  auto elt = torch::min(a.slice(-1, 0, 2), b.slice(-1, 0, 2));
  auto erb = torch::max(a.slice(-1, 2, 4), b.slice(-1, 2, 4));
  auto ewh = erb - elt;
  auto enclosure = ewh.select(-1, 0) * ewh.select(-1, 1);
  return inter / uni - (enclosure - uni) / enclosure;
}

// --- backbone -------------------------------------------------------------

ResidualStageImpl::ResidualStageImpl(int in_channels, int out_channels) {
  down = register_module("down", torch::nn::Conv2d(conv3x3(in_channels, out_channels, 2)));
  norm_down = register_module("norm_down",
                              torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(out_channels), out_channels)));
  conv_a = register_module("conv_a", torch::nn::Conv2d(conv3x3(out_channels, out_channels, 1)));
  norm_a = register_module("norm_a",
                           torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(out_channels), out_channels)));
  conv_b = register_module("conv_b", torch::nn::Conv2d(conv3x3(out_channels, out_channels, 1)));
  norm_b = register_module("norm_b",
                           torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(out_channels), out_channels)));
}

torch::Tensor ResidualStageImpl::forward(const torch::Tensor& input) {
  auto x = torch::silu(norm_down(down(input)));
  auto y = torch::silu(norm_a(conv_a(x)));
  y = norm_b(conv_b(y));
  return torch::silu(x + y);
}

BackboneImpl::BackboneImpl(const ModelConfig& cfg) {
  stem = register_module("stem", torch::nn::Conv2d(conv3x3(3, cfg.stem_channels, 2)));
  stem_norm = register_module(
      "stem_norm",
      torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(cfg.stem_channels), cfg.stem_channels)));
  stages = register_module("stages", torch::nn::ModuleList());
  projections = register_module("projections", torch::nn::ModuleList());
  int in = cfg.stem_channels;
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    stages->push_back(ResidualStage(in, cfg.stage_channels[i]));
    in = cfg.stage_channels[i];
    if (i >= 1) {
      projections->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, cfg.dim, 1)));
    }
  }
}

std::vector<torch::Tensor> BackboneImpl::forward(const torch::Tensor& images) {
  auto x = torch::silu(stem_norm(stem(images)));
  std::vector<torch::Tensor> out;
  for (std::size_t i = 0; i < stages->size(); ++i) {
    x = stages[i]->as<ResidualStage>()->forward(x);
    if (i >= 1) out.push_back(projections[i - 1]->as<torch::nn::Conv2d>()->forward(x));
  }
  return out;
}

// --- attention ------------------------------------------------------------

AttentionImpl::AttentionImpl(int dim, int heads_) : heads(heads_) {
  q_proj = register_module("q_proj", torch::nn::Linear(dim, dim));
  k_proj = register_module("k_proj", torch::nn::Linear(dim, dim));
  v_proj = register_module("v_proj", torch::nn::Linear(dim, dim));
  out_proj = register_module("out_proj", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key, const torch::Tensor& value,
                                     const torch::Tensor& bias) {
  const int64_t b = query.size(0), nq = query.size(1), nk = key.size(1), d = query.size(2);
  const int64_t dh = d / heads;
  auto q = q_proj(query).view({b, nq, heads, dh}).transpose(1, 2);
  auto k = k_proj(key).view({b, nk, heads, dh}).transpose(1, 2);
  auto v = v_proj(value).view({b, nk, heads, dh}).transpose(1, 2);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  if (bias.defined()) scores = scores + bias;
  auto out = torch::matmul(torch::softmax(scores, -1), v);
  return out_proj(out.transpose(1, 2).reshape({b, nq, d}));
}

// --- decoder --------------------------------------------------------------

DecoderLayerImpl::DecoderLayerImpl(const ModelConfig& cfg) {
  const int d = cfg.dim;
  self_attn = register_module("self_attn", Attention(d, cfg.heads));
  cross_attn = register_module("cross_attn", Attention(d, cfg.heads));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  norm3 = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  ffn_in = register_module("ffn_in", torch::nn::Linear(d, cfg.ffn_dim));
  ffn_out = register_module("ffn_out", torch::nn::Linear(cfg.ffn_dim, d));
  box_head = register_module("box_head", torch::nn::Sequential(torch::nn::Linear(d, d), torch::nn::SiLU(),
                                                                torch::nn::Linear(d, d), torch::nn::SiLU(),
                                                                torch::nn::Linear(d, 4)));
  {
    torch::NoGradGuard no_grad;
    auto last = box_head[4]->as<torch::nn::Linear>();
    last->weight.zero_();
    last->bias.zero_();
  }
  // softplus^-1 of sharpness values spread geometrically from broad to local.
  std::vector<double> raw;
  for (int h = 0; h < cfg.heads; ++h) {
    const double t = cfg.heads > 1 ? static_cast<double>(h) / (cfg.heads - 1) : 0.5;
    const double sharpness = 0.05 * std::pow(40.0, t);
    raw.push_back(std::log(std::expm1(sharpness)));
  }
  locality = register_parameter("locality", torch::tensor(raw, torch::kFloat32));
}

NetworkImpl::NetworkImpl(const ModelConfig& c) : cfg(c) {
  const int d = cfg.dim;
  backbone = register_module("backbone", Backbone(cfg));
  level_embed = register_parameter("level_embed", torch::randn({3, d}) * 0.1);
  prompt_fc1 = register_module("prompt_fc1", torch::nn::Linear(d, d));
  prompt_fc2 = register_module("prompt_fc2", torch::nn::Linear(d, d));
  fuse_gate = register_module("fuse_gate", torch::nn::Linear(d, d));
  fuse_out = register_module("fuse_out", torch::nn::Linear(d, d));
  fuse_norm = register_module("fuse_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  query_content = register_parameter("query_content", torch::randn({cfg.num_queries, d}) * 0.1);
  prompt_to_query = register_module("prompt_to_query", torch::nn::Linear(d, d));

  const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.num_queries))));
  std::vector<float> anchor_values;
  for (int i = 0; i < cfg.num_queries; ++i) {
    const double cx = (i % grid + 0.5) / grid;
    const double cy = (i / grid + 0.5) / grid;
    const double side = 0.6 / grid;
    for (double v : {cx, cy, side, side}) anchor_values.push_back(static_cast<float>(std::log(v / (1.0 - v))));
  }
  anchors = register_parameter("anchors", torch::tensor(anchor_values).view({cfg.num_queries, 4}));

  pos_fc1 = register_module("pos_fc1", torch::nn::Linear(2 * d, d));
  pos_fc2 = register_module("pos_fc2", torch::nn::Linear(d, d));
  layers = register_module("layers", torch::nn::ModuleList());
  for (int l = 0; l < cfg.decoder_layers; ++l) layers->push_back(DecoderLayer(cfg));
  score_proj = register_module("score_proj", torch::nn::Linear(d, d));
  log_temperature =
      register_parameter("log_temperature", torch::tensor(std::log(cfg.temperature_init), torch::kFloat32));
}

torch::Tensor NetworkImpl::pool(const std::vector<torch::Tensor>& levels, const torch::Tensor& boxes,
                                const std::vector<int64_t>& batch_index) const {
  constexpr int64_t kSamples = 4;
  const int64_t p = boxes.size(0);
  auto opts = boxes.options();
  auto steps = (torch::arange(kSamples, opts) + 0.5) / static_cast<double>(kSamples);  // [S]
  std::vector<torch::Tensor> pooled;
  pooled.reserve(static_cast<std::size_t>(p));
  auto cpu_boxes = boxes.detach().to(torch::kCPU, torch::kFloat64);
  for (int64_t i = 0; i < p; ++i) {
    const double x0 = cpu_boxes[i][0].item<double>(), y0 = cpu_boxes[i][1].item<double>();
    const double x1 = cpu_boxes[i][2].item<double>(), y1 = cpu_boxes[i][3].item<double>();
    const double size_px = std::sqrt(std::max(0.0, (x1 - x0) * (y1 - y0))) * cfg.resolution;
    const auto& level = levels[static_cast<std::size_t>(select_level(size_px))];
    auto feat = level[batch_index[static_cast<std::size_t>(i)]].unsqueeze(0);  // [1,d,h,w]
    auto xs = boxes[i][0] + (boxes[i][2] - boxes[i][0]) * steps;
    auto ys = boxes[i][1] + (boxes[i][3] - boxes[i][1]) * steps;
    auto grid = torch::stack(torch::meshgrid({ys, xs}, "ij"), -1).flip(-1);  // [S,S,(x,y)]
    grid = (grid * 2.0 - 1.0).unsqueeze(0);
    auto sampled = F::grid_sample(feat, grid,
                                  F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
    pooled.push_back(sampled.mean({2, 3}).squeeze(0));
  }
  return torch::stack(pooled, 0);
}

torch::Tensor NetworkImpl::embed_prompts(const torch::Tensor& pooled) {
  return F::normalize(prompt_fc2(torch::silu(prompt_fc1(pooled))), F::NormalizeFuncOptions().dim(-1));
}

torch::Tensor NetworkImpl::similarity_logits(const torch::Tensor& embeddings, const torch::Tensor& vector,
                                             const torch::Tensor& temperature) {
  return temperature * (embeddings * vector.unsqueeze(1)).sum(-1);
}

DecoderOutputs NetworkImpl::decode(const std::vector<torch::Tensor>& levels, const torch::Tensor& prompt) {
  const int64_t b = prompt.size(0);
  const int d = cfg.dim;
  auto opts = prompt.options();

  std::vector<torch::Tensor> memory_parts, pos_parts, xy_parts;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (kPyramidStrides[l] < cfg.decoder_min_stride) continue;
    const int64_t h = levels[l].size(2), w = levels[l].size(3);
    memory_parts.push_back(levels[l].flatten(2).transpose(1, 2));
    auto ys = (torch::arange(h, opts) + 0.5) / static_cast<double>(h);
    auto xs = (torch::arange(w, opts) + 0.5) / static_cast<double>(w);
    auto mesh = torch::meshgrid({ys, xs}, "ij");
    auto xy = torch::stack({mesh[1].reshape({-1}), mesh[0].reshape({-1})}, -1);  // [h*w,2]
    xy_parts.push_back(xy);
    pos_parts.push_back(sine_position_encoding(xy, d) + level_embed[static_cast<int64_t>(l)]);
  }
  auto memory = torch::cat(memory_parts, 1);           // [B,Nk,d]
  auto memory_pos = torch::cat(pos_parts, 0).unsqueeze(0);  // [1,Nk,d]
  auto token_xy = torch::cat(xy_parts, 0);             // [Nk,2]
  memory = fuse_norm(memory + fuse_out(memory * fuse_gate(prompt).unsqueeze(1)));
  auto keys = memory + memory_pos;
  auto token_x = token_xy.select(1, 0).view({1, 1, -1});
  auto token_y = token_xy.select(1, 1).view({1, 1, -1});

  auto tgt = query_content.unsqueeze(0) + prompt_to_query(prompt).unsqueeze(1);  // [B,Nq,d]
  auto ref_logit = anchors.unsqueeze(0).expand({b, cfg.num_queries, 4});

  DecoderOutputs out;
  out.temperature = log_temperature.exp();
  for (std::size_t l = 0; l < layers->size(); ++l) {
    auto layer = layers[l]->as<DecoderLayer>();
    auto ref = torch::sigmoid(ref_logit);
    auto query_pos = pos_fc2(torch::silu(pos_fc1(sine_embed(ref, d / 2))));

    auto q = tgt + query_pos;
    tgt = layer->norm1(tgt + layer->self_attn(q, q, tgt));

    // Gaussian prior centred on each query's box, scaled by its half-size.
    auto r = ref.unbind(-1);
    auto dx = (token_x - r[0].unsqueeze(-1)) / (0.5 * r[2].unsqueeze(-1) + 0.01);
    auto dy = (token_y - r[1].unsqueeze(-1)) / (0.5 * r[3].unsqueeze(-1) + 0.01);
    auto dist2 = (dx * dx + dy * dy).unsqueeze(1);  // [B,1,Nq,Nk]
    auto bias = -F::softplus(layer->locality).view({1, -1, 1, 1}) * dist2;
    tgt = layer->norm2(tgt + layer->cross_attn(tgt + query_pos, keys, memory, bias));

    tgt = layer->norm3(tgt + layer->ffn_out(torch::silu(layer->ffn_in(tgt))));

    ref_logit = ref_logit + layer->box_head->forward(tgt);
    out.boxes.push_back(torch::sigmoid(ref_logit));
    out.embeddings.push_back(F::normalize(score_proj(tgt), F::NormalizeFuncOptions().dim(-1)));
  }
  return out;
}

// --- conversions ----------------------------------------------------------

torch::Tensor image_tensor(const Image& img, const Letterbox& lb) {
  auto src = torch::from_blob(const_cast<std::uint8_t*>(img.pixels.data()), {img.height, img.width, 3}, torch::kUInt8)
                 .permute({2, 0, 1})
                 .to(torch::kFloat32)
                 .div(255.0)
                 .sub(0.5);
  if (lb.content_w != img.width || lb.content_h != img.height) {
    src = F::interpolate(src.unsqueeze(0), F::InterpolateFuncOptions()
                                               .size(std::vector<int64_t>{lb.content_h, lb.content_w})
                                               .mode(torch::kBilinear)
                                               .align_corners(false)
                                               .antialias(true))
              .squeeze(0);
  }
  if (lb.content_w == lb.resolution && lb.content_h == lb.resolution) return src.contiguous();
  auto out = torch::zeros({3, lb.resolution, lb.resolution});
  out.slice(1, lb.offset_y, lb.offset_y + lb.content_h).slice(2, lb.offset_x, lb.offset_x + lb.content_w).copy_(src);
  return out;
}

torch::Tensor pyramid_level_tensor(const FeatureLevel& level) {
  return torch::from_blob(const_cast<float*>(level.data.data()), {1, level.channels, level.height, level.width},
                          torch::kFloat32)
      .clone();
}

}  // namespace promptcount::detail
