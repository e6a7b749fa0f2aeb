#pragma once

// libtorch modules behind promptcount::Model. Internal: only model, training
// and verification code include this.

#include <torch/torch.h>

#include <vector>

#include "promptcount/model.hpp"

namespace promptcount::detail {

/// Strided 3x3 conv, GroupNorm, then a two-conv residual block.
struct ResidualStageImpl : torch::nn::Module {
  ResidualStageImpl(int in_channels, int out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d down{nullptr}, conv_a{nullptr}, conv_b{nullptr};
  torch::nn::GroupNorm norm_down{nullptr}, norm_a{nullptr}, norm_b{nullptr};
};
TORCH_MODULE(ResidualStage);

struct BackboneImpl : torch::nn::Module {
  explicit BackboneImpl(const ModelConfig& cfg);
  /// Returns projected features at strides 8, 16, 32, each [B, d, H/s, W/s].
  std::vector<torch::Tensor> forward(const torch::Tensor& images);

  torch::nn::Conv2d stem{nullptr};
  torch::nn::GroupNorm stem_norm{nullptr};
  torch::nn::ModuleList stages;
  torch::nn::ModuleList projections;
};
TORCH_MODULE(Backbone);

struct AttentionImpl : torch::nn::Module {
  AttentionImpl(int dim, int heads);
  /// query [B,Nq,d], key/value [B,Nk,d], optional additive bias [B,H,Nq,Nk].
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key, const torch::Tensor& value,
                        const torch::Tensor& bias = {});

  int heads;
  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
};
TORCH_MODULE(Attention);

struct DecoderLayerImpl : torch::nn::Module {
  DecoderLayerImpl(const ModelConfig& cfg);

  Attention self_attn{nullptr}, cross_attn{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr};
  torch::nn::Linear ffn_in{nullptr}, ffn_out{nullptr};
  torch::nn::Sequential box_head{nullptr};
  /// Per-head sharpness of the spatial prior around each query's box.
  torch::Tensor locality;
};
TORCH_MODULE(DecoderLayer);

struct DecoderOutputs {
  /// Per decoder layer: boxes [B,Nq,4] in center form, model frame.
  std::vector<torch::Tensor> boxes;
  /// Per decoder layer: unit query embeddings [B,Nq,d].
  std::vector<torch::Tensor> embeddings;
  torch::Tensor temperature;  // scalar
};

struct NetworkImpl : torch::nn::Module {
  explicit NetworkImpl(const ModelConfig& cfg);

  std::vector<torch::Tensor> encode(const torch::Tensor& images) { return backbone->forward(images); }

  /// Region-aligned average pooling. `boxes` [P,4] corner form in the model
  /// frame, `batch_index` [P] selects the image of each box. Returns [P,d].
  torch::Tensor pool(const std::vector<torch::Tensor>& levels, const torch::Tensor& boxes,
                     const std::vector<int64_t>& batch_index) const;
  /// Pooled region features -> unit prompt vectors [P,d].
  torch::Tensor embed_prompts(const torch::Tensor& pooled);

  DecoderOutputs decode(const std::vector<torch::Tensor>& levels, const torch::Tensor& prompt);

  /// temperature * <embedding, vector>; vector [B,d] broadcast over queries.
  static torch::Tensor similarity_logits(const torch::Tensor& embeddings, const torch::Tensor& vector,
                                         const torch::Tensor& temperature);

  ModelConfig cfg;
  Backbone backbone{nullptr};
  torch::Tensor level_embed;
  torch::nn::Linear prompt_fc1{nullptr}, prompt_fc2{nullptr};
  torch::nn::Linear fuse_gate{nullptr}, fuse_out{nullptr};
  torch::nn::LayerNorm fuse_norm{nullptr};
  torch::Tensor query_content;
  torch::nn::Linear prompt_to_query{nullptr};
  torch::Tensor anchors;  // [Nq,4] center form, logit space
  torch::nn::Linear pos_fc1{nullptr}, pos_fc2{nullptr};
  torch::nn::ModuleList layers;
  torch::nn::Linear score_proj{nullptr};
  torch::Tensor log_temperature;
};
TORCH_MODULE(Network);

/// Pyramid level whose stride is closest to box_size_px / 8 (ties go to the
/// finer level). `box_size_px` is sqrt(w*h) in model-frame pixels.
int select_level(double box_size_px);

/// 2D sinusoidal encoding of normalized positions [N,2] -> [N,dim].
torch::Tensor sine_position_encoding(const torch::Tensor& xy, int dim);

torch::Tensor center_to_corner(const torch::Tensor& cxcywh);
torch::Tensor corner_to_center(const torch::Tensor& xyxy);
/// Generalized IoU of paired corner-form boxes [N,4] x [N,4] -> [N].
torch::Tensor paired_giou(const torch::Tensor& a, const torch::Tensor& b);

/// Letterboxed, normalized image tensor [3,R,R] (padding is zero).
torch::Tensor image_tensor(const Image& img, const Letterbox& lb);

torch::Tensor pyramid_level_tensor(const FeatureLevel& level);

struct ModelState {
  ModelConfig config;
  Network net{nullptr};
};

}  // namespace promptcount::detail
