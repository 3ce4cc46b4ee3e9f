#pragma once

#include "dfd/nn/layers.hpp"

#include <array>
#include <cstdint>

namespace dfd::nn {

/// Feature extractor split at the class-activation target layer:
///
///   image --trunk--> target activation --neck--> pooled embedding [N, D]
///
/// `forward`/`backward` run both halves; the explainer drives the halves
/// separately to obtain gradients at the target layer.
template <typename Scalar>
class Backbone : public Module<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x) override { return forward_neck(forward_trunk(x)); }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    return backward_trunk(backward_neck(grad_out));
  }
  Shape trace(const Shape& in, OpCounter& ops) const override { return trace_neck(trace_trunk(in, ops), ops); }
  Shape trace_trunk(const Shape& in) const {
    OpCounter scratch;
    return trace_trunk(in, scratch);
  }

  virtual Tensor<Scalar> forward_trunk(const Tensor<Scalar>& x) = 0;
  virtual Tensor<Scalar> backward_trunk(const Tensor<Scalar>& grad) = 0;
  virtual Tensor<Scalar> forward_neck(const Tensor<Scalar>& a) = 0;
  virtual Tensor<Scalar> backward_neck(const Tensor<Scalar>& grad) = 0;
  virtual Shape trace_trunk(const Shape& in, OpCounter& ops) const = 0;
  virtual Shape trace_neck(const Shape& in, OpCounter& ops) const = 0;

  /// Reinterprets a trunk-output-shaped tensor (activation or its gradient)
  /// as K spatial maps [N, K, h, w].
  virtual Tensor<Scalar> to_grid(const Tensor<Scalar>& trunk_tensor) const { return trunk_tensor; }

  virtual Index feature_dim() const = 0;
  /// Square input side the backbone was built for.
  virtual Index input_side() const = 0;
  virtual std::string target_layer() const = 0;

  /// Deterministic random initialization following the reference recipes.
  virtual void reset_parameters(std::uint64_t seed) = 0;
};

// ---------------------------------------------------------------------------
// CLIP-style modified ResNet: three-conv stem, anti-aliased (avg-pool) strides,
// attention pooling head.

struct ResNetSpec {
  std::array<Index, 4> layers{3, 4, 6, 3};
  Index width = 64;
  Index heads = 32;
  Index output_dim = 1024;
  Index image_size = 224;
};

template <typename Scalar>
class Bottleneck : public Module<Scalar> {
 public:
  static constexpr Index kExpansion = 4;
  Bottleneck(Index inplanes, Index planes, Index stride);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "bottleneck"; }

  BatchNorm2d<Scalar>& last_norm() { return *bn3_; }

 private:
  ModuleChain<Scalar> main_;
  BatchNorm2d<Scalar>* bn3_ = nullptr;
  Sequential<Scalar>* downsample_ = nullptr;
  Activation<Scalar>* relu3_ = nullptr;
};

template <typename Scalar>
class ResNetBackbone : public Backbone<Scalar> {
 public:
  explicit ResNetBackbone(const ResNetSpec& spec);

  Tensor<Scalar> forward_trunk(const Tensor<Scalar>& x) override { return trunk_.forward(x); }
  Tensor<Scalar> backward_trunk(const Tensor<Scalar>& g) override { return trunk_.backward(g); }
  Tensor<Scalar> forward_neck(const Tensor<Scalar>& a) override { return attnpool_->forward(a); }
  Tensor<Scalar> backward_neck(const Tensor<Scalar>& g) override { return attnpool_->backward(g); }
  Shape trace_trunk(const Shape& in, OpCounter& ops) const override { return trunk_.trace(in, ops); }
  Shape trace_neck(const Shape& in, OpCounter& ops) const override { return attnpool_->trace(in, ops); }

  std::string_view kind() const override { return "resnet"; }
  Index feature_dim() const override { return spec_.output_dim; }
  Index input_side() const override { return spec_.image_size; }
  std::string target_layer() const override { return "layer4"; }
  void reset_parameters(std::uint64_t seed) override;

  const ResNetSpec& spec() const { return spec_; }

 private:
  ResNetSpec spec_;
  ModuleChain<Scalar> trunk_;
  AttentionPool2d<Scalar>* attnpool_ = nullptr;
};

// ---------------------------------------------------------------------------
// CLIP-style vision transformer: patch embedding, class token, pre-norm
// residual attention blocks, class-token projection.

struct ViTSpec {
  Index image_size = 224;
  Index patch_size = 32;
  Index width = 768;
  Index layers = 12;
  Index heads = 12;
  Index mlp_ratio = 4;
  Index output_dim = 512;
  bool quick_gelu = true;
};

template <typename Scalar>
class ResidualAttentionBlock : public Module<Scalar> {
 public:
  ResidualAttentionBlock(Index width, Index heads, Index mlp_ratio, ActivationKind act);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "residual_attention_block"; }

 private:
  LayerNorm<Scalar>* ln_1_;
  MultiheadSelfAttention<Scalar>* attn_;
  LayerNorm<Scalar>* ln_2_;
  Sequential<Scalar>* mlp_;
};

template <typename Scalar>
class VisionTransformerBackbone : public Backbone<Scalar> {
 public:
  explicit VisionTransformerBackbone(const ViTSpec& spec);

  Tensor<Scalar> forward_trunk(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward_trunk(const Tensor<Scalar>& g) override;
  Tensor<Scalar> forward_neck(const Tensor<Scalar>& a) override;
  Tensor<Scalar> backward_neck(const Tensor<Scalar>& g) override;
  Shape trace_trunk(const Shape& in, OpCounter& ops) const override;
  Shape trace_neck(const Shape& in, OpCounter& ops) const override;
  Tensor<Scalar> to_grid(const Tensor<Scalar>& tokens) const override;

  std::string_view kind() const override { return "vision_transformer"; }
  Index feature_dim() const override { return spec_.output_dim; }
  Index input_side() const override { return spec_.image_size; }
  std::string target_layer() const override {
    return "transformer.resblocks." + std::to_string(spec_.layers - 1) + " (patch tokens)";
  }
  void reset_parameters(std::uint64_t seed) override;

  Index grid() const { return spec_.image_size / spec_.patch_size; }
  const ViTSpec& spec() const { return spec_; }

 protected:
  void release_cache() override { pooled_ = {}; }

 private:
  ViTSpec spec_;
  Parameter<Scalar> class_embedding_, positional_embedding_, proj_;
  Conv2d<Scalar>* conv1_;
  LayerNorm<Scalar>* ln_pre_;
  Sequential<Scalar>* resblocks_;
  LayerNorm<Scalar>* ln_post_;
  Tensor<Scalar> pooled_;  // ln_post output, cached for the projection gradient
  Index tokens_ = 0;
};

// ---------------------------------------------------------------------------
// ConvNeXt: patchify stem, depthwise 7x7 + inverted-bottleneck MLP blocks with
// layer scale, pooled + normalized + linearly projected.

struct ConvNeXtSpec {
  std::array<Index, 4> depths{3, 3, 27, 3};
  std::array<Index, 4> dims{128, 256, 512, 1024};
  Index output_dim = 512;
  Index image_size = 224;
};

template <typename Scalar>
class ConvNeXtBlock : public Module<Scalar> {
 public:
  explicit ConvNeXtBlock(Index dim);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "convnext_block"; }

 protected:
  void release_cache() override { mlp_out_ = {}; }

 private:
  Index dim_;
  Parameter<Scalar> gamma_;
  Conv2d<Scalar>* conv_dw_;
  LayerNorm<Scalar>* norm_;
  Sequential<Scalar>* mlp_;
  Tensor<Scalar> mlp_out_;
};

template <typename Scalar>
class ConvNeXtBackbone : public Backbone<Scalar> {
 public:
  explicit ConvNeXtBackbone(const ConvNeXtSpec& spec);

  Tensor<Scalar> forward_trunk(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward_trunk(const Tensor<Scalar>& g) override;
  Tensor<Scalar> forward_neck(const Tensor<Scalar>& a) override;
  Tensor<Scalar> backward_neck(const Tensor<Scalar>& g) override;
  Shape trace_trunk(const Shape& in, OpCounter& ops) const override;
  Shape trace_neck(const Shape& in, OpCounter& ops) const override;

  std::string_view kind() const override { return "convnext"; }
  Index feature_dim() const override { return spec_.output_dim; }
  Index input_side() const override { return spec_.image_size; }
  std::string target_layer() const override { return "trunk.stages.3"; }
  void reset_parameters(std::uint64_t seed) override;

  const ConvNeXtSpec& spec() const { return spec_; }

 private:
  ConvNeXtSpec spec_;
  Sequential<Scalar>* stem_;
  Sequential<Scalar>* stages_;
  GlobalAvgPool2d<Scalar> pool_;
  LayerNorm<Scalar>* head_norm_;
  Linear<Scalar>* head_proj_;
};

}  // namespace dfd::nn
