#pragma once

#include "dfd/nn/module.hpp"

#include <random>

namespace dfd::nn {

/// 2-D convolution on [N, C, H, W]. Supports dense (groups = 1) and
/// depthwise (groups = in_channels = out_channels) layouts.
template <typename Scalar>
class Conv2d : public Module<Scalar> {
 public:
  Conv2d(Index in_channels, Index out_channels, Index kernel, Index stride = 1, Index padding = 0,
         bool bias = true, Index groups = 1);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return groups_ == 1 ? "conv2d" : "conv2d_depthwise"; }

  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }

 protected:
  void release_cache() override { input_ = {}; }

 private:
  Index out_extent(Index in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }
  void im2col(const Scalar* x, Index h, Index w, MatrixR<Scalar>& col) const;
  void col2im(const MatrixR<Scalar>& col, Index h, Index w, Scalar* dx) const;

  Index in_, out_, kernel_, stride_, padding_, groups_;
  bool has_bias_;
  Parameter<Scalar> weight_, bias_;
  Tensor<Scalar> input_;
};

/// Batch normalization over the channel axis of [N, C, H, W]; batch statistics
/// in training mode, running statistics otherwise.
template <typename Scalar>
class BatchNorm2d : public Module<Scalar> {
 public:
  explicit BatchNorm2d(Index channels, Scalar eps = Scalar(1e-5), Scalar momentum = Scalar(0.1));

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "batch_norm"; }

  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }
  Parameter<Scalar>& running_mean() { return running_mean_; }
  Parameter<Scalar>& running_var() { return running_var_; }

 protected:
  void release_cache() override {
    xhat_ = {};
    inv_std_ = {};
  }

 private:
  Index channels_;
  Scalar eps_, momentum_;
  Parameter<Scalar> weight_, bias_, running_mean_, running_var_;
  Tensor<Scalar> xhat_;
  ArrayX<Scalar> inv_std_;
  bool batch_stats_ = false;
};

/// Layer normalization over the trailing axis.
template <typename Scalar>
class LayerNorm : public Module<Scalar> {
 public:
  explicit LayerNorm(Index features, Scalar eps = Scalar(1e-5));

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "layer_norm"; }

  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }

 protected:
  void release_cache() override {
    xhat_ = {};
    inv_std_ = {};
  }

 private:
  Index features_;
  Scalar eps_;
  Parameter<Scalar> weight_, bias_;
  Tensor<Scalar> xhat_;
  ArrayX<Scalar> inv_std_;
};

/// Layer normalization over the channel axis of [N, C, H, W].
template <typename Scalar>
class LayerNorm2d : public Module<Scalar> {
 public:
  explicit LayerNorm2d(Index channels, Scalar eps = Scalar(1e-6));

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "layer_norm"; }

 private:
  std::unique_ptr<LayerNorm<Scalar>> owned_norm_;
  LayerNorm<Scalar>* norm_;
};

/// Affine map over the trailing axis: y = x W^T + b. `WeightLayout::in_out`
/// stores W transposed ([in, out]), as CLIP's projection matrices do.
enum class WeightLayout { out_in, in_out };

template <typename Scalar>
class Linear : public Module<Scalar> {
 public:
  Linear(Index in_features, Index out_features, bool bias = true, WeightLayout layout = WeightLayout::out_in);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "linear"; }

  Index in_features() const { return in_; }
  Index out_features() const { return out_; }
  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }
  WeightLayout layout() const { return layout_; }

 protected:
  void release_cache() override { input_ = {}; }

 private:
  Index in_, out_;
  bool has_bias_;
  WeightLayout layout_;
  Parameter<Scalar> weight_, bias_;
  Tensor<Scalar> input_;
};

enum class ActivationKind { relu, gelu, quick_gelu };

template <typename Scalar>
class Activation : public Module<Scalar> {
 public:
  explicit Activation(ActivationKind kind) : kind_(kind) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override;

 protected:
  void release_cache() override { input_ = {}; }

 private:
  ActivationKind kind_;
  Tensor<Scalar> input_;
};

/// Inverted dropout; identity outside training mode.
template <typename Scalar>
class Dropout : public Module<Scalar> {
 public:
  explicit Dropout(double rate);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "dropout"; }

  void reseed(std::uint64_t seed) { engine_.seed(seed); }
  double rate() const { return rate_; }

 protected:
  void release_cache() override { mask_ = {}; }

 private:
  double rate_;
  std::mt19937_64 engine_{0};
  Tensor<Scalar> mask_;
  bool active_ = false;
};

/// Non-overlapping average pooling (kernel = stride), floor mode.
template <typename Scalar>
class AvgPool2d : public Module<Scalar> {
 public:
  explicit AvgPool2d(Index kernel) : kernel_(kernel) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "avg_pool"; }

 private:
  Index kernel_;
  Shape in_shape_;
};

/// [N, C, H, W] -> [N, C] spatial mean.
template <typename Scalar>
class GlobalAvgPool2d : public Module<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "global_avg_pool"; }

 private:
  Shape in_shape_;
};

/// Per-head scaled dot-product attention state shared by the attention layers.
template <typename Scalar>
struct AttentionCache {
  MatrixR<Scalar> q, k, v;            // [L, D] projected
  std::vector<MatrixR<Scalar>> probs; // per head [Lq, Lk]
  MatrixR<Scalar> context;            // [L, D] concatenated head outputs
};

/// Multi-head self-attention on [N, L, D] with a packed input projection.
template <typename Scalar>
class MultiheadSelfAttention : public Module<Scalar> {
 public:
  MultiheadSelfAttention(Index dim, Index heads);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "multihead_attention"; }

 protected:
  void release_cache() override {
    input_ = {};
    cache_.clear();
  }

 private:
  Index dim_, heads_;
  Parameter<Scalar> in_proj_weight_, in_proj_bias_;
  Linear<Scalar>* out_proj_;
  Tensor<Scalar> input_;
  std::vector<AttentionCache<Scalar>> cache_;
};

/// Attention pooling over a spatial grid: the spatial mean token is prepended,
/// a learned positional embedding is added, every token attends to every token
/// and the output projection of the mean token is returned. [N, C, H, W] -> [N, out].
template <typename Scalar>
class AttentionPool2d : public Module<Scalar> {
 public:
  AttentionPool2d(Index spatial, Index dim, Index heads, Index out_dim);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override;
  Shape trace(const Shape& in, OpCounter& ops) const override;
  std::string_view kind() const override { return "attention_pool"; }

  Index spatial() const { return spatial_; }

 protected:
  void release_cache() override {
    tokens_.clear();
    cache_.clear();
  }

 private:
  Index spatial_, dim_, heads_, out_dim_;
  Parameter<Scalar> positional_embedding_;
  Linear<Scalar>* k_proj_;
  Linear<Scalar>* q_proj_;
  Linear<Scalar>* v_proj_;
  Linear<Scalar>* c_proj_;
  Shape in_shape_;
  std::vector<MatrixR<Scalar>> tokens_;
  std::vector<AttentionCache<Scalar>> cache_;
};

/// Runs children in insertion order; names become path components.
template <typename Scalar>
class Sequential : public Module<Scalar> {
 public:
  template <typename M>
  M& add(const std::string& name, std::unique_ptr<M> module) {
    M& ref = this->register_module(name, std::move(module));
    order_.push_back(&ref);
    return ref;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override {
    Tensor<Scalar> y = x;
    for (auto* m : order_) y = m->forward(y);
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    Tensor<Scalar> g = grad_out;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  Shape trace(const Shape& in, OpCounter& ops) const override {
    Shape s = in;
    for (auto* m : order_) s = m->trace(s, ops);
    return s;
  }
  std::string_view kind() const override { return "sequential"; }

  std::size_t size() const { return order_.size(); }
  Module<Scalar>& operator[](std::size_t i) { return *order_.at(i); }

 private:
  std::vector<Module<Scalar>*> order_;
};

/// Non-owning execution order over modules registered elsewhere; lets a
/// parent keep reference parameter names flat while still chaining children.
template <typename Scalar>
struct ModuleChain {
  std::vector<Module<Scalar>*> order;

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    Tensor<Scalar> y = x;
    for (auto* m : order) y = m->forward(y);
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const {
    Tensor<Scalar> g = grad_out;
    for (auto it = order.rbegin(); it != order.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  Shape trace(const Shape& in, OpCounter& ops) const {
    Shape s = in;
    for (auto* m : order) s = m->trace(s, ops);
    return s;
  }
};

/// [N, C, H, W] <-> [N, H, W, C]
template <typename Scalar>
Tensor<Scalar> nchw_to_nhwc(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> nhwc_to_nchw(const Tensor<Scalar>& x);

}  // namespace dfd::nn
