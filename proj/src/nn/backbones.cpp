#include "dfd/nn/backbones.hpp"

#include <cmath>
#include <random>

namespace dfd::nn {

namespace {

template <typename Scalar>
void fill_normal(Tensor<Scalar>& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
}

/// Normal truncated to two standard deviations (resampling).
template <typename Scalar>
void fill_trunc_normal(Tensor<Scalar>& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Index i = 0; i < t.size(); ++i) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    t[i] = static_cast<Scalar>(z * stddev);
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Biases to zero, norm scales to one, running stats to identity.
template <typename Scalar>
void reset_affine(const std::string& name, Parameter<Scalar>& p) {
  if (ends_with(name, "running_var")) {
    p.value.array().setOnes();
  } else if (p.role == Role::buffer || ends_with(name, "bias")) {
    p.value.set_zero();
  } else if (p.role == Role::no_decay && p.value.rank() == 1) {
    p.value.array().setOnes();
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ResNet

template <typename Scalar>
Bottleneck<Scalar>::Bottleneck(Index inplanes, Index planes, Index stride) {
  auto& conv1 = this->register_module("conv1", std::make_unique<Conv2d<Scalar>>(inplanes, planes, 1, 1, 0, false));
  auto& bn1 = this->register_module("bn1", std::make_unique<BatchNorm2d<Scalar>>(planes));
  auto& relu1 = this->register_module("relu1", std::make_unique<Activation<Scalar>>(ActivationKind::relu));
  auto& conv2 = this->register_module("conv2", std::make_unique<Conv2d<Scalar>>(planes, planes, 3, 1, 1, false));
  auto& bn2 = this->register_module("bn2", std::make_unique<BatchNorm2d<Scalar>>(planes));
  auto& relu2 = this->register_module("relu2", std::make_unique<Activation<Scalar>>(ActivationKind::relu));
  main_.order = {&conv1, &bn1, &relu1, &conv2, &bn2, &relu2};
  if (stride > 1) main_.order.push_back(&this->register_module("avgpool", std::make_unique<AvgPool2d<Scalar>>(stride)));
  auto& conv3 =
      this->register_module("conv3", std::make_unique<Conv2d<Scalar>>(planes, planes * kExpansion, 1, 1, 0, false));
  bn3_ = &this->register_module("bn3", std::make_unique<BatchNorm2d<Scalar>>(planes * kExpansion));
  main_.order.push_back(&conv3);
  main_.order.push_back(bn3_);
  relu3_ = &this->register_module("relu3", std::make_unique<Activation<Scalar>>(ActivationKind::relu));

  if (stride > 1 || inplanes != planes * kExpansion) {
    auto ds = std::make_unique<Sequential<Scalar>>();
    if (stride > 1) ds->add("-1", std::make_unique<AvgPool2d<Scalar>>(stride));
    ds->add("0", std::make_unique<Conv2d<Scalar>>(inplanes, planes * kExpansion, 1, 1, 0, false));
    ds->add("1", std::make_unique<BatchNorm2d<Scalar>>(planes * kExpansion));
    downsample_ = &this->register_module("downsample", std::move(ds));
  }
}

template <typename Scalar>
Tensor<Scalar> Bottleneck<Scalar>::forward(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = main_.forward(x);
  if (downsample_) {
    out.array() += downsample_->forward(x).array();
  } else {
    out.array() += x.array();
  }
  return relu3_->forward(out);
}

template <typename Scalar>
Tensor<Scalar> Bottleneck<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Tensor<Scalar> g = relu3_->backward(grad_out);
  Tensor<Scalar> dx = main_.backward(g);
  if (downsample_) {
    dx.array() += downsample_->backward(g).array();
  } else {
    dx.array() += g.array();
  }
  return dx;
}

template <typename Scalar>
Shape Bottleneck<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  const Shape out = main_.trace(in, ops);
  if (downsample_) downsample_->trace(in, ops);
  return relu3_->trace(out, ops);
}

template <typename Scalar>
ResNetBackbone<Scalar>::ResNetBackbone(const ResNetSpec& spec) : spec_(spec) {
  if (spec.image_size % 32 != 0) throw std::invalid_argument("ResNet input side must be a multiple of 32");
  const Index w = spec.width;
  auto relu = [] { return std::make_unique<Activation<Scalar>>(ActivationKind::relu); };
  trunk_.order = {
      &this->register_module("conv1", std::make_unique<Conv2d<Scalar>>(3, w / 2, 3, 2, 1, false)),
      &this->register_module("bn1", std::make_unique<BatchNorm2d<Scalar>>(w / 2)),
      &this->register_module("relu1", relu()),
      &this->register_module("conv2", std::make_unique<Conv2d<Scalar>>(w / 2, w / 2, 3, 1, 1, false)),
      &this->register_module("bn2", std::make_unique<BatchNorm2d<Scalar>>(w / 2)),
      &this->register_module("relu2", relu()),
      &this->register_module("conv3", std::make_unique<Conv2d<Scalar>>(w / 2, w, 3, 1, 1, false)),
      &this->register_module("bn3", std::make_unique<BatchNorm2d<Scalar>>(w)),
      &this->register_module("relu3", relu()),
      &this->register_module("avgpool", std::make_unique<AvgPool2d<Scalar>>(2)),
  };
  Index inplanes = w;
  for (std::size_t stage = 0; stage < 4; ++stage) {
    const Index planes = w << stage;
    auto layer = std::make_unique<Sequential<Scalar>>();
    for (Index b = 0; b < spec.layers[stage]; ++b) {
      const Index stride = (b == 0 && stage > 0) ? 2 : 1;
      layer->add(std::to_string(b), std::make_unique<Bottleneck<Scalar>>(inplanes, planes, stride));
      inplanes = planes * Bottleneck<Scalar>::kExpansion;
    }
    trunk_.order.push_back(&this->register_module("layer" + std::to_string(stage + 1), std::move(layer)));
  }
  attnpool_ = &this->register_module(
      "attnpool", std::make_unique<AttentionPool2d<Scalar>>(spec.image_size / 32, w * 32, spec.heads, spec.output_dim));
}

template <typename Scalar>
void ResNetBackbone<Scalar>::reset_parameters(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(spec_.width * 32));
  for (auto& [name, p] : this->named_parameters()) {
    reset_affine(name, *p);
    if (name.rfind("attnpool.", 0) == 0) {
      if (p->role == Role::weight) fill_normal(p->value, attn_std, rng);
    } else if (p->role == Role::weight && p->value.rank() == 4) {
      // Kaiming normal, fan-out, ReLU gain.
      const double fan_out = static_cast<double>(p->value.dim(0) * p->value.dim(2) * p->value.dim(3));
      fill_normal(p->value, std::sqrt(2.0 / fan_out), rng);
    }
    // Residual branches start as identity.
    if (ends_with(name, "bn3.weight") && name.rfind("layer", 0) == 0) p->value.set_zero();
  }
}

// ---------------------------------------------------------------------------
// Vision transformer

template <typename Scalar>
ResidualAttentionBlock<Scalar>::ResidualAttentionBlock(Index width, Index heads, Index mlp_ratio, ActivationKind act) {
  ln_1_ = &this->register_module("ln_1", std::make_unique<LayerNorm<Scalar>>(width));
  attn_ = &this->register_module("attn", std::make_unique<MultiheadSelfAttention<Scalar>>(width, heads));
  ln_2_ = &this->register_module("ln_2", std::make_unique<LayerNorm<Scalar>>(width));
  auto mlp = std::make_unique<Sequential<Scalar>>();
  mlp->add("c_fc", std::make_unique<Linear<Scalar>>(width, width * mlp_ratio));
  mlp->add("gelu", std::make_unique<Activation<Scalar>>(act));
  mlp->add("c_proj", std::make_unique<Linear<Scalar>>(width * mlp_ratio, width));
  mlp_ = &this->register_module("mlp", std::move(mlp));
}

template <typename Scalar>
Tensor<Scalar> ResidualAttentionBlock<Scalar>::forward(const Tensor<Scalar>& x) {
  Tensor<Scalar> h = attn_->forward(ln_1_->forward(x));
  h.array() += x.array();
  Tensor<Scalar> y = mlp_->forward(ln_2_->forward(h));
  y.array() += h.array();
  return y;
}

template <typename Scalar>
Tensor<Scalar> ResidualAttentionBlock<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> gh = ln_2_->backward(mlp_->backward(grad_out));
  gh.array() += grad_out.array();
  Tensor<Scalar> gx = ln_1_->backward(attn_->backward(gh));
  gx.array() += gh.array();
  return gx;
}

template <typename Scalar>
Shape ResidualAttentionBlock<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  ln_1_->trace(in, ops);
  attn_->trace(in, ops);
  ln_2_->trace(in, ops);
  return mlp_->trace(in, ops);
}

template <typename Scalar>
VisionTransformerBackbone<Scalar>::VisionTransformerBackbone(const ViTSpec& spec) : spec_(spec) {
  if (spec.image_size % spec.patch_size != 0) {
    throw std::invalid_argument("ViT input side must be a multiple of the patch size");
  }
  const Index w = spec.width, g = grid();
  class_embedding_ = make_parameter<Scalar>({w}, Role::no_decay);
  positional_embedding_ = make_parameter<Scalar>({g * g + 1, w}, Role::no_decay);
  proj_ = make_parameter<Scalar>({w, spec.output_dim});
  this->register_parameter("class_embedding", class_embedding_);
  this->register_parameter("positional_embedding", positional_embedding_);
  this->register_parameter("proj", proj_);
  conv1_ = &this->register_module("conv1",
                                  std::make_unique<Conv2d<Scalar>>(3, w, spec.patch_size, spec.patch_size, 0, false));
  ln_pre_ = &this->register_module("ln_pre", std::make_unique<LayerNorm<Scalar>>(w));
  auto blocks = std::make_unique<Sequential<Scalar>>();
  const auto act = spec.quick_gelu ? ActivationKind::quick_gelu : ActivationKind::gelu;
  for (Index i = 0; i < spec.layers; ++i) {
    blocks->add(std::to_string(i), std::make_unique<ResidualAttentionBlock<Scalar>>(w, spec.heads, spec.mlp_ratio, act));
  }
  resblocks_ = &this->register_module("transformer.resblocks", std::move(blocks));
  ln_post_ = &this->register_module("ln_post", std::make_unique<LayerNorm<Scalar>>(w));
}

template <typename Scalar>
Tensor<Scalar> VisionTransformerBackbone<Scalar>::forward_trunk(const Tensor<Scalar>& x) {
  const Tensor<Scalar> patches = conv1_->forward(x);  // [N, W, g, g]
  const Index n = patches.dim(0), w = spec_.width, gg = patches.dim(2) * patches.dim(3), l = gg + 1;
  if (l != positional_embedding_.value.dim(0)) {
    throw ShapeError("ViT: input " + to_string(x.shape()) + " does not match the positional grid for side " +
                     std::to_string(spec_.image_size));
  }
  Tensor<Scalar> tokens({n, l, w});
  for (Index i = 0; i < n; ++i) {
    auto t = tokens.block(i * l * w, l, w);
    t.row(0) = class_embedding_.value.array().matrix().transpose();
    t.bottomRows(gg) = patches.block(i * w * gg, w, gg).transpose();
    t += positional_embedding_.value.block(0, l, w);
  }
  return resblocks_->forward(ln_pre_->forward(tokens));
}

template <typename Scalar>
Tensor<Scalar> VisionTransformerBackbone<Scalar>::backward_trunk(const Tensor<Scalar>& g) {
  const Tensor<Scalar> dtokens = ln_pre_->backward(resblocks_->backward(g));
  const Index n = dtokens.dim(0), l = dtokens.dim(1), w = spec_.width, gg = l - 1, side = grid();
  Tensor<Scalar> dpatches({n, w, side, side});
  auto dpos = positional_embedding_.grad.block(0, l, w);
  for (Index i = 0; i < n; ++i) {
    auto dt = dtokens.block(i * l * w, l, w);
    dpos += dt;
    class_embedding_.grad.array() += dt.row(0).transpose().array();
    dpatches.block(i * w * gg, w, gg) = dt.bottomRows(gg).transpose();
  }
  return conv1_->backward(dpatches);
}

template <typename Scalar>
Tensor<Scalar> VisionTransformerBackbone<Scalar>::forward_neck(const Tensor<Scalar>& a) {
  expect_rank(a.shape(), 3, "ViT neck");
  const Index n = a.dim(0), l = a.dim(1), w = spec_.width;
  Tensor<Scalar> cls({n, w});
  for (Index i = 0; i < n; ++i) cls.block(i * w, 1, w) = a.block(i * l * w, 1, w);
  Tensor<Scalar> pooled = ln_post_->forward(cls);
  Tensor<Scalar> out({n, spec_.output_dim});
  out.block(0, n, spec_.output_dim).noalias() = pooled.block(0, n, w) * proj_.value.block(0, w, spec_.output_dim);
  if (this->recording()) {
    pooled_ = std::move(pooled);
    tokens_ = l;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> VisionTransformerBackbone<Scalar>::backward_neck(const Tensor<Scalar>& g) {
  if (pooled_.empty()) throw std::logic_error("ViT::backward_neck without a recorded forward");
  const Index n = g.dim(0), w = spec_.width, o = spec_.output_dim, l = tokens_;
  auto dy = g.block(0, n, o);
  proj_.grad.block(0, w, o).noalias() += pooled_.block(0, n, w).transpose() * dy;
  Tensor<Scalar> dpooled({n, w});
  dpooled.block(0, n, w).noalias() = dy * proj_.value.block(0, w, o).transpose();
  const Tensor<Scalar> dcls = ln_post_->backward(dpooled);
  Tensor<Scalar> da({n, l, w});
  for (Index i = 0; i < n; ++i) da.block(i * l * w, 1, w) = dcls.block(i * w, 1, w);
  return da;
}

template <typename Scalar>
Shape VisionTransformerBackbone<Scalar>::trace_trunk(const Shape& in, OpCounter& ops) const {
  const Shape patches = conv1_->trace(in, ops);
  const Shape tokens{patches[0], patches[2] * patches[3] + 1, spec_.width};
  ln_pre_->trace(tokens, ops);
  return resblocks_->trace(tokens, ops);
}

template <typename Scalar>
Shape VisionTransformerBackbone<Scalar>::trace_neck(const Shape& in, OpCounter& ops) const {
  const Shape cls{in[0], spec_.width};
  ln_post_->trace(cls, ops);
  ops.add("linear", static_cast<std::uint64_t>(in[0] * spec_.width * spec_.output_dim));
  return {in[0], spec_.output_dim};
}

template <typename Scalar>
Tensor<Scalar> VisionTransformerBackbone<Scalar>::to_grid(const Tensor<Scalar>& tokens) const {
  expect_rank(tokens.shape(), 3, "ViT to_grid");
  const Index n = tokens.dim(0), l = tokens.dim(1), w = spec_.width, side = grid(), gg = side * side;
  if (l != gg + 1) throw ShapeError("ViT to_grid: token count mismatch " + to_string(tokens.shape()));
  Tensor<Scalar> out({n, w, side, side});
  for (Index i = 0; i < n; ++i) {
    out.block(i * w * gg, w, gg) = tokens.block(i * l * w + w, gg, w).transpose();
  }
  return out;
}

template <typename Scalar>
void VisionTransformerBackbone<Scalar>::reset_parameters(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec_.width));
  for (auto& [name, p] : this->named_parameters()) {
    reset_affine(name, *p);
    if (name == "class_embedding" || name == "positional_embedding" || name == "proj") {
      fill_normal(p->value, scale, rng);
    } else if (p->role == Role::weight) {
      fill_trunc_normal(p->value, 0.02, rng);
    }
  }
}

// ---------------------------------------------------------------------------
// ConvNeXt

template <typename Scalar>
ConvNeXtBlock<Scalar>::ConvNeXtBlock(Index dim) : dim_(dim) {
  gamma_ = make_parameter<Scalar>({dim}, Role::no_decay);
  this->register_parameter("gamma", gamma_);
  conv_dw_ = &this->register_module("conv_dw", std::make_unique<Conv2d<Scalar>>(dim, dim, 7, 1, 3, true, dim));
  norm_ = &this->register_module("norm", std::make_unique<LayerNorm<Scalar>>(dim, Scalar(1e-6)));
  auto mlp = std::make_unique<Sequential<Scalar>>();
  mlp->add("fc1", std::make_unique<Linear<Scalar>>(dim, 4 * dim));
  mlp->add("act", std::make_unique<Activation<Scalar>>(ActivationKind::gelu));
  mlp->add("fc2", std::make_unique<Linear<Scalar>>(4 * dim, dim));
  mlp_ = &this->register_module("mlp", std::move(mlp));
}

template <typename Scalar>
Tensor<Scalar> ConvNeXtBlock<Scalar>::forward(const Tensor<Scalar>& x) {
  Tensor<Scalar> t = mlp_->forward(norm_->forward(nchw_to_nhwc(conv_dw_->forward(x))));
  Tensor<Scalar> scaled(t.shape());
  const Index rows = t.size() / dim_;
  scaled.block(0, rows, dim_).array() = t.block(0, rows, dim_).array().rowwise() * gamma_.value.array().transpose();
  Tensor<Scalar> y = nhwc_to_nchw(scaled);
  y.array() += x.array();
  if (this->recording()) mlp_out_ = std::move(t);
  return y;
}

template <typename Scalar>
Tensor<Scalar> ConvNeXtBlock<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (mlp_out_.empty()) throw std::logic_error("ConvNeXtBlock::backward without a recorded forward");
  Tensor<Scalar> g = nchw_to_nhwc(grad_out);
  const Index rows = g.size() / dim_;
  gamma_.grad.array() += (g.block(0, rows, dim_).array() * mlp_out_.block(0, rows, dim_).array()).colwise().sum().transpose();
  g.block(0, rows, dim_).array().rowwise() *= gamma_.value.array().transpose();
  Tensor<Scalar> dx = conv_dw_->backward(nhwc_to_nchw(norm_->backward(mlp_->backward(g))));
  dx.array() += grad_out.array();
  return dx;
}

template <typename Scalar>
Shape ConvNeXtBlock<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  const Shape dw = conv_dw_->trace(in, ops);
  const Shape nhwc{dw[0], dw[2], dw[3], dw[1]};
  norm_->trace(nhwc, ops);
  mlp_->trace(nhwc, ops);
  return in;
}

template <typename Scalar>
ConvNeXtBackbone<Scalar>::ConvNeXtBackbone(const ConvNeXtSpec& spec) : spec_(spec) {
  if (spec.image_size % 32 != 0) throw std::invalid_argument("ConvNeXt input side must be a multiple of 32");
  auto stem = std::make_unique<Sequential<Scalar>>();
  stem->add("0", std::make_unique<Conv2d<Scalar>>(3, spec.dims[0], 4, 4, 0, true));
  stem->add("1", std::make_unique<LayerNorm2d<Scalar>>(spec.dims[0]));
  stem_ = &this->register_module("trunk.stem", std::move(stem));

  auto stages = std::make_unique<Sequential<Scalar>>();
  for (std::size_t s = 0; s < 4; ++s) {
    auto stage = std::make_unique<Sequential<Scalar>>();
    if (s > 0) {
      auto down = std::make_unique<Sequential<Scalar>>();
      down->add("0", std::make_unique<LayerNorm2d<Scalar>>(spec.dims[s - 1]));
      down->add("1", std::make_unique<Conv2d<Scalar>>(spec.dims[s - 1], spec.dims[s], 2, 2, 0, true));
      stage->add("downsample", std::move(down));
    }
    auto blocks = std::make_unique<Sequential<Scalar>>();
    for (Index b = 0; b < spec.depths[s]; ++b) {
      blocks->add(std::to_string(b), std::make_unique<ConvNeXtBlock<Scalar>>(spec.dims[s]));
    }
    stage->add("blocks", std::move(blocks));
    stages->add(std::to_string(s), std::move(stage));
  }
  stages_ = &this->register_module("trunk.stages", std::move(stages));
  head_norm_ = &this->register_module("trunk.head.norm", std::make_unique<LayerNorm<Scalar>>(spec.dims[3], Scalar(1e-6)));
  head_proj_ = &this->register_module("head.proj", std::make_unique<Linear<Scalar>>(spec.dims[3], spec.output_dim, false));
}

template <typename Scalar>
Tensor<Scalar> ConvNeXtBackbone<Scalar>::forward_trunk(const Tensor<Scalar>& x) {
  return stages_->forward(stem_->forward(x));
}

template <typename Scalar>
Tensor<Scalar> ConvNeXtBackbone<Scalar>::backward_trunk(const Tensor<Scalar>& g) {
  return stem_->backward(stages_->backward(g));
}

template <typename Scalar>
Tensor<Scalar> ConvNeXtBackbone<Scalar>::forward_neck(const Tensor<Scalar>& a) {
  return head_proj_->forward(head_norm_->forward(pool_.forward(a)));
}

template <typename Scalar>
Tensor<Scalar> ConvNeXtBackbone<Scalar>::backward_neck(const Tensor<Scalar>& g) {
  return pool_.backward(head_norm_->backward(head_proj_->backward(g)));
}

template <typename Scalar>
Shape ConvNeXtBackbone<Scalar>::trace_trunk(const Shape& in, OpCounter& ops) const {
  return stages_->trace(stem_->trace(in, ops), ops);
}

template <typename Scalar>
Shape ConvNeXtBackbone<Scalar>::trace_neck(const Shape& in, OpCounter& ops) const {
  const Shape pooled = pool_.trace(in, ops);
  head_norm_->trace(pooled, ops);
  return head_proj_->trace(pooled, ops);
}

template <typename Scalar>
void ConvNeXtBackbone<Scalar>::reset_parameters(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [name, p] : this->named_parameters()) {
    reset_affine(name, *p);
    if (ends_with(name, "gamma")) {
      p->value.array().setConstant(Scalar(1e-6));
    } else if (p->role == Role::weight) {
      fill_trunc_normal(p->value, 0.02, rng);
    }
  }
}

#define DFD_INSTANTIATE_BACKBONES(S)         \
  template class Bottleneck<S>;              \
  template class ResNetBackbone<S>;          \
  template class ResidualAttentionBlock<S>;  \
  template class VisionTransformerBackbone<S>; \
  template class ConvNeXtBlock<S>;           \
  template class ConvNeXtBackbone<S>;

DFD_INSTANTIATE_BACKBONES(float)
DFD_INSTANTIATE_BACKBONES(double)

}  // namespace dfd::nn
