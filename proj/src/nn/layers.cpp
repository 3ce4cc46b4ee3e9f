#include "dfd/nn/layers.hpp"

#include <cmath>

namespace dfd::nn {

// ---------------------------------------------------------------------------
// layout helpers

template <typename Scalar>
Tensor<Scalar> nchw_to_nhwc(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 4, "nchw_to_nhwc");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out({n, x.dim(2), x.dim(3), c});
  for (Index i = 0; i < n; ++i) {
    out.block(i * hw * c, hw, c) = x.block(i * c * hw, c, hw).transpose();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> nhwc_to_nchw(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 4, "nhwc_to_nchw");
  const Index n = x.dim(0), c = x.dim(3), hw = x.dim(1) * x.dim(2);
  Tensor<Scalar> out({n, c, x.dim(1), x.dim(2)});
  for (Index i = 0; i < n; ++i) {
    out.block(i * c * hw, c, hw) = x.block(i * hw * c, hw, c).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conv2d

namespace {
Index floor_div(Index a, Index b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
Index ceil_div(Index a, Index b) { return -floor_div(-a, b); }
}  // namespace

template <typename Scalar>
Conv2d<Scalar>::Conv2d(Index in_channels, Index out_channels, Index kernel, Index stride, Index padding, bool bias,
                       Index groups)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      groups_(groups),
      has_bias_(bias) {
  if (groups != 1 && !(groups == in_channels && groups == out_channels)) {
    throw std::invalid_argument("Conv2d: only dense or depthwise grouping is supported");
  }
  weight_ = make_parameter<Scalar>({out_, in_ / groups_, kernel_, kernel_});
  this->register_parameter("weight", weight_);
  if (has_bias_) {
    bias_ = make_parameter<Scalar>({out_}, Role::no_decay);
    this->register_parameter("bias", bias_);
  }
}

template <typename Scalar>
void Conv2d<Scalar>::im2col(const Scalar* x, Index h, Index w, MatrixR<Scalar>& col) const {
  const Index oh = out_extent(h), ow = out_extent(w), k = kernel_;
  col.resize(in_ * k * k, oh * ow);
  for (Index c = 0; c < in_; ++c) {
    const Scalar* plane = x + c * h * w;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = col.row((c * k + ky) * k + kx).data();
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride_ - padding_ + ky;
          Scalar* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, Scalar(0));
            continue;
          }
          const Scalar* src = plane + iy * w;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride_ - padding_ + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void Conv2d<Scalar>::col2im(const MatrixR<Scalar>& col, Index h, Index w, Scalar* dx) const {
  const Index oh = out_extent(h), ow = out_extent(w), k = kernel_;
  for (Index c = 0; c < in_; ++c) {
    Scalar* plane = dx + c * h * w;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* row = col.row((c * k + ky) * k + kx).data();
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= h) continue;
          Scalar* dst = plane + iy * w;
          const Scalar* src = row + oy * ow;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride_ - padding_ + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 4, "Conv2d");
  if (x.dim(1) != in_) {
    throw ShapeError("Conv2d: expected " + std::to_string(in_) + " input channels, got " + to_string(x.shape()));
  }
  const Index n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const Index oh = out_extent(h), ow = out_extent(w);
  if (oh <= 0 || ow <= 0) throw ShapeError("Conv2d: input " + to_string(x.shape()) + " smaller than kernel");
  Tensor<Scalar> y({n, out_, oh, ow});
  const Index in_plane = in_ * h * w, out_plane = out_ * oh * ow;

  if (groups_ == 1) {
    const bool pointwise = kernel_ == 1 && stride_ == 1 && padding_ == 0;
    ConstMatrixMap<Scalar> wmat(weight_.value.data(), out_, in_ * kernel_ * kernel_);
    MatrixR<Scalar> col;
    for (Index i = 0; i < n; ++i) {
      auto out = y.block(i * out_plane, out_, oh * ow);
      if (pointwise) {
        out.noalias() = wmat * x.block(i * in_plane, in_, h * w);
      } else {
        im2col(x.data() + i * in_plane, h, w, col);
        out.noalias() = wmat * col;
      }
      if (has_bias_) out.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias_.value.data(), out_);
    }
  } else {
    const Index k = kernel_;
    for (Index i = 0; i < n; ++i) {
      for (Index c = 0; c < out_; ++c) {
        const Scalar* src = x.data() + i * in_plane + c * h * w;
        Scalar* dst = y.data() + i * out_plane + c * oh * ow;
        const Scalar* wk = weight_.value.data() + c * k * k;
        std::fill(dst, dst + oh * ow, has_bias_ ? bias_.value[c] : Scalar(0));
        for (Index ky = 0; ky < k; ++ky) {
          for (Index oy = 0; oy < oh; ++oy) {
            const Index iy = oy * stride_ - padding_ + ky;
            if (iy < 0 || iy >= h) continue;
            const Scalar* srow = src + iy * w;
            Scalar* drow = dst + oy * ow;
            for (Index kx = 0; kx < k; ++kx) {
              const Scalar wv = wk[ky * k + kx];
              const Index ox_lo = std::max<Index>(0, ceil_div(padding_ - kx, stride_));
              const Index ox_hi = std::min<Index>(ow, floor_div(w - 1 + padding_ - kx, stride_) + 1);
              for (Index ox = ox_lo; ox < ox_hi; ++ox) drow[ox] += wv * srow[ox * stride_ - padding_ + kx];
            }
          }
        }
      }
    }
  }
  if (this->recording()) input_ = x;
  return y;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (input_.empty()) throw std::logic_error("Conv2d::backward without a recorded forward");
  const Index n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const Index oh = out_extent(h), ow = out_extent(w);
  const Index in_plane = in_ * h * w, out_plane = out_ * oh * ow;
  Tensor<Scalar> dx(input_.shape());

  if (groups_ == 1) {
    const bool pointwise = kernel_ == 1 && stride_ == 1 && padding_ == 0;
    const Index kk = in_ * kernel_ * kernel_;
    ConstMatrixMap<Scalar> wmat(weight_.value.data(), out_, kk);
    MatrixMap<Scalar> dw(weight_.grad.data(), out_, kk);
    MatrixR<Scalar> col, dcol;
    for (Index i = 0; i < n; ++i) {
      auto dy = grad_out.block(i * out_plane, out_, oh * ow);
      if (has_bias_) {
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias_.grad.data(), out_) += dy.rowwise().sum();
      }
      if (pointwise) {
        auto xi = input_.block(i * in_plane, in_, h * w);
        dw.noalias() += dy * xi.transpose();
        dx.block(i * in_plane, in_, h * w).noalias() = wmat.transpose() * dy;
      } else {
        im2col(input_.data() + i * in_plane, h, w, col);
        dw.noalias() += dy * col.transpose();
        dcol.noalias() = wmat.transpose() * dy;
        col2im(dcol, h, w, dx.data() + i * in_plane);
      }
    }
  } else {
    const Index k = kernel_;
    for (Index i = 0; i < n; ++i) {
      for (Index c = 0; c < out_; ++c) {
        const Scalar* src = input_.data() + i * in_plane + c * h * w;
        Scalar* dsrc = dx.data() + i * in_plane + c * h * w;
        const Scalar* dy = grad_out.data() + i * out_plane + c * oh * ow;
        const Scalar* wk = weight_.value.data() + c * k * k;
        Scalar* dwk = weight_.grad.data() + c * k * k;
        if (has_bias_) {
          Scalar s = 0;
          for (Index j = 0; j < oh * ow; ++j) s += dy[j];
          bias_.grad[c] += s;
        }
        for (Index ky = 0; ky < k; ++ky) {
          for (Index oy = 0; oy < oh; ++oy) {
            const Index iy = oy * stride_ - padding_ + ky;
            if (iy < 0 || iy >= h) continue;
            const Scalar* srow = src + iy * w;
            Scalar* dsrow = dsrc + iy * w;
            const Scalar* dyrow = dy + oy * ow;
            for (Index kx = 0; kx < k; ++kx) {
              const Scalar wv = wk[ky * k + kx];
              const Index ox_lo = std::max<Index>(0, ceil_div(padding_ - kx, stride_));
              const Index ox_hi = std::min<Index>(ow, floor_div(w - 1 + padding_ - kx, stride_) + 1);
              Scalar acc = 0;
              for (Index ox = ox_lo; ox < ox_hi; ++ox) {
                const Index ix = ox * stride_ - padding_ + kx;
                acc += dyrow[ox] * srow[ix];
                dsrow[ix] += wv * dyrow[ox];
              }
              dwk[ky * k + kx] += acc;
            }
          }
        }
      }
    }
  }
  return dx;
}

template <typename Scalar>
Shape Conv2d<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  expect_rank(in, 4, "Conv2d");
  if (in[1] != in_) throw ShapeError("Conv2d: channel mismatch in trace " + to_string(in));
  const Index oh = out_extent(in[2]), ow = out_extent(in[3]);
  const auto per_output = static_cast<std::uint64_t>((in_ / groups_) * kernel_ * kernel_);
  ops.add(std::string(kind()), static_cast<std::uint64_t>(in[0] * out_ * oh * ow) * per_output);
  return {in[0], out_, oh, ow};
}

// ---------------------------------------------------------------------------
// BatchNorm2d

template <typename Scalar>
BatchNorm2d<Scalar>::BatchNorm2d(Index channels, Scalar eps, Scalar momentum)
    : channels_(channels), eps_(eps), momentum_(momentum) {
  weight_ = make_parameter<Scalar>({channels}, Role::no_decay);
  weight_.value.array().setOnes();
  bias_ = make_parameter<Scalar>({channels}, Role::no_decay);
  running_mean_ = make_parameter<Scalar>({channels}, Role::buffer);
  running_var_ = make_parameter<Scalar>({channels}, Role::buffer);
  running_var_.value.array().setOnes();
  this->register_parameter("weight", weight_);
  this->register_parameter("bias", bias_);
  this->register_parameter("running_mean", running_mean_);
  this->register_parameter("running_var", running_var_);
}

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::forward(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 4, "BatchNorm2d");
  if (x.dim(1) != channels_) throw ShapeError("BatchNorm2d: channel mismatch " + to_string(x.shape()));
  const Index n = x.dim(0), c = channels_, hw = x.dim(2) * x.dim(3);
  const Index m = n * hw;
  ArrayX<Scalar> mean(c), inv_std(c);
  batch_stats_ = this->training();
  if (batch_stats_) {
    ArrayX<Scalar> sum = ArrayX<Scalar>::Zero(c), sq = ArrayX<Scalar>::Zero(c);
    for (Index i = 0; i < n; ++i) {
      auto xi = x.block(i * c * hw, c, hw);
      sum += xi.rowwise().sum().array();
    }
    mean = sum / Scalar(m);
    for (Index i = 0; i < n; ++i) {
      auto xi = x.block(i * c * hw, c, hw).array().colwise() - mean;
      sq += xi.square().rowwise().sum();
    }
    const ArrayX<Scalar> var = sq / Scalar(m);
    inv_std = (var + eps_).rsqrt();
    const Scalar unbias = m > 1 ? Scalar(m) / Scalar(m - 1) : Scalar(1);
    running_mean_.value.array() = (1 - momentum_) * running_mean_.value.array() + momentum_ * mean;
    running_var_.value.array() = (1 - momentum_) * running_var_.value.array() + momentum_ * var * unbias;
  } else {
    mean = running_mean_.value.array();
    inv_std = (running_var_.value.array() + eps_).rsqrt();
  }
  Tensor<Scalar> xhat(x.shape());
  Tensor<Scalar> y(x.shape());
  for (Index i = 0; i < n; ++i) {
    auto xh = xhat.block(i * c * hw, c, hw);
    xh.array() = (x.block(i * c * hw, c, hw).array().colwise() - mean).colwise() * inv_std;
    y.block(i * c * hw, c, hw).array() =
        (xh.array().colwise() * weight_.value.array()).colwise() + bias_.value.array();
  }
  if (this->recording()) {
    xhat_ = std::move(xhat);
    inv_std_ = inv_std;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (xhat_.empty()) throw std::logic_error("BatchNorm2d::backward without a recorded forward");
  const Index n = xhat_.dim(0), c = channels_, hw = xhat_.dim(2) * xhat_.dim(3);
  const Index m = n * hw;
  ArrayX<Scalar> dgamma = ArrayX<Scalar>::Zero(c), dbeta = ArrayX<Scalar>::Zero(c);
  for (Index i = 0; i < n; ++i) {
    auto dy = grad_out.block(i * c * hw, c, hw).array();
    dbeta += dy.rowwise().sum();
    dgamma += (dy * xhat_.block(i * c * hw, c, hw).array()).rowwise().sum();
  }
  weight_.grad.array() += dgamma;
  bias_.grad.array() += dbeta;

  Tensor<Scalar> dx(xhat_.shape());
  const ArrayX<Scalar> scale = weight_.value.array() * inv_std_;
  for (Index i = 0; i < n; ++i) {
    auto dy = grad_out.block(i * c * hw, c, hw).array();
    auto out = dx.block(i * c * hw, c, hw).array();
    if (batch_stats_) {
      // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
      auto xh = xhat_.block(i * c * hw, c, hw).array();
      out = ((dy * Scalar(m)).colwise() - dbeta - (xh.colwise() * dgamma)).colwise() * (scale / Scalar(m));
    } else {
      out = dy.colwise() * scale;
    }
  }
  return dx;
}

template <typename Scalar>
Shape BatchNorm2d<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  expect_rank(in, 4, "BatchNorm2d");
  ops.touch(std::string(kind()));
  return in;
}

// ---------------------------------------------------------------------------
// LayerNorm

template <typename Scalar>
LayerNorm<Scalar>::LayerNorm(Index features, Scalar eps) : features_(features), eps_(eps) {
  weight_ = make_parameter<Scalar>({features}, Role::no_decay);
  weight_.value.array().setOnes();
  bias_ = make_parameter<Scalar>({features}, Role::no_decay);
  this->register_parameter("weight", weight_);
  this->register_parameter("bias", bias_);
}

template <typename Scalar>
Tensor<Scalar> LayerNorm<Scalar>::forward(const Tensor<Scalar>& x) {
  if (x.rank() < 1 || x.dim(-1) != features_) {
    throw ShapeError("LayerNorm: expected trailing dim " + std::to_string(features_) + ", got " + to_string(x.shape()));
  }
  const Index rows = x.size() / features_;
  auto xm = x.block(0, rows, features_).array();
  const ArrayX<Scalar> mean = xm.rowwise().mean();
  Tensor<Scalar> xhat(x.shape());
  auto xh = xhat.block(0, rows, features_).array();
  xh = xm.colwise() - mean;
  const ArrayX<Scalar> inv_std = (xh.square().rowwise().mean() + eps_).rsqrt();
  xh.colwise() *= inv_std;
  Tensor<Scalar> y(x.shape());
  y.block(0, rows, features_).array() =
      (xh.rowwise() * weight_.value.array().transpose()).rowwise() + bias_.value.array().transpose();
  if (this->recording()) {
    xhat_ = std::move(xhat);
    inv_std_ = inv_std;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> LayerNorm<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (xhat_.empty()) throw std::logic_error("LayerNorm::backward without a recorded forward");
  const Index rows = xhat_.size() / features_;
  auto dy = grad_out.block(0, rows, features_).array();
  auto xh = xhat_.block(0, rows, features_).array();
  weight_.grad.array() += (dy * xh).colwise().sum().transpose();
  bias_.grad.array() += dy.colwise().sum().transpose();

  Tensor<Scalar> dx(xhat_.shape());
  const MatrixR<Scalar> dxhat = (dy.rowwise() * weight_.value.array().transpose()).matrix();
  const ArrayX<Scalar> mean_dxhat = dxhat.array().rowwise().mean();
  const ArrayX<Scalar> mean_dxhat_xhat = (dxhat.array() * xh).rowwise().mean();
  dx.block(0, rows, features_).array() =
      ((dxhat.array().colwise() - mean_dxhat) - (xh.colwise() * mean_dxhat_xhat)).colwise() * inv_std_;
  return dx;
}

template <typename Scalar>
Shape LayerNorm<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  ops.touch(std::string(kind()));
  return in;
}

template <typename Scalar>
LayerNorm2d<Scalar>::LayerNorm2d(Index channels, Scalar eps) {
  // Registered as a flat alias so names match the reference layout ("<name>.weight").
  auto norm = std::make_unique<LayerNorm<Scalar>>(channels, eps);
  norm_ = norm.get();
  this->register_parameter("weight", norm_->weight());
  this->register_parameter("bias", norm_->bias());
  owned_norm_ = std::move(norm);
}

template <typename Scalar>
Tensor<Scalar> LayerNorm2d<Scalar>::forward(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 4, "LayerNorm2d");
  norm_->set_recording(this->recording());
  return nhwc_to_nchw(norm_->forward(nchw_to_nhwc(x)));
}

template <typename Scalar>
Tensor<Scalar> LayerNorm2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  return nhwc_to_nchw(norm_->backward(nchw_to_nhwc(grad_out)));
}

template <typename Scalar>
Shape LayerNorm2d<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  expect_rank(in, 4, "LayerNorm2d");
  ops.touch(std::string(kind()));
  return in;
}

// ---------------------------------------------------------------------------
// Linear

template <typename Scalar>
Linear<Scalar>::Linear(Index in_features, Index out_features, bool bias, WeightLayout layout)
    : in_(in_features), out_(out_features), has_bias_(bias), layout_(layout) {
  weight_ = make_parameter<Scalar>(layout == WeightLayout::out_in ? Shape{out_, in_} : Shape{in_, out_});
  this->register_parameter("weight", weight_);
  if (has_bias_) {
    bias_ = make_parameter<Scalar>({out_}, Role::no_decay);
    this->register_parameter("bias", bias_);
  }
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::forward(const Tensor<Scalar>& x) {
  if (x.rank() < 1 || x.dim(-1) != in_) {
    throw ShapeError("Linear: expected trailing dim " + std::to_string(in_) + ", got " + to_string(x.shape()));
  }
  const Index rows = x.size() / in_;
  Shape out_shape = x.shape();
  out_shape.back() = out_;
  Tensor<Scalar> y(out_shape);
  auto ym = y.block(0, rows, out_);
  auto xm = x.block(0, rows, in_);
  if (layout_ == WeightLayout::out_in) {
    ym.noalias() = xm * weight_.value.block(0, out_, in_).transpose();
  } else {
    ym.noalias() = xm * weight_.value.block(0, in_, out_);
  }
  if (has_bias_) ym.rowwise() += bias_.value.array().matrix().transpose();
  if (this->recording()) input_ = x;
  return y;
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (input_.empty()) throw std::logic_error("Linear::backward without a recorded forward");
  const Index rows = input_.size() / in_;
  auto dy = grad_out.block(0, rows, out_);
  auto xm = input_.block(0, rows, in_);
  Tensor<Scalar> dx(input_.shape());
  if (layout_ == WeightLayout::out_in) {
    weight_.grad.block(0, out_, in_).noalias() += dy.transpose() * xm;
    dx.block(0, rows, in_).noalias() = dy * weight_.value.block(0, out_, in_);
  } else {
    weight_.grad.block(0, in_, out_).noalias() += xm.transpose() * dy;
    dx.block(0, rows, in_).noalias() = dy * weight_.value.block(0, in_, out_).transpose();
  }
  if (has_bias_) bias_.grad.array() += dy.colwise().sum().transpose().array();
  return dx;
}

template <typename Scalar>
Shape Linear<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  if (in.empty() || in.back() != in_) throw ShapeError("Linear: trace shape mismatch " + to_string(in));
  ops.add(std::string(kind()), static_cast<std::uint64_t>(numel(in) / in_ * in_ * out_));
  Shape out = in;
  out.back() = out_;
  return out;
}

// ---------------------------------------------------------------------------
// Activation

namespace {
constexpr double kQuickGeluScale = 1.702;
}

template <typename Scalar>
std::string_view Activation<Scalar>::kind() const {
  switch (kind_) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::gelu: return "gelu";
    case ActivationKind::quick_gelu: return "quick_gelu";
  }
  return "activation";
}

template <typename Scalar>
Tensor<Scalar> Activation<Scalar>::forward(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  auto xa = x.array();
  switch (kind_) {
    case ActivationKind::relu:
      y.array() = xa.max(Scalar(0));
      break;
    case ActivationKind::gelu:
      y.array() = Scalar(0.5) * xa * (Scalar(1) + (xa * Scalar(M_SQRT1_2)).unaryExpr([](Scalar v) { return std::erf(v); }));
      break;
    case ActivationKind::quick_gelu:
      y.array() = xa / (Scalar(1) + (-Scalar(kQuickGeluScale) * xa).exp());
      break;
  }
  if (this->recording()) input_ = x;
  return y;
}

template <typename Scalar>
Tensor<Scalar> Activation<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (input_.empty()) throw std::logic_error("Activation::backward without a recorded forward");
  Tensor<Scalar> dx(input_.shape());
  auto xa = input_.array();
  auto dy = grad_out.array();
  switch (kind_) {
    case ActivationKind::relu:
      dx.array() = (xa > Scalar(0)).select(dy, Scalar(0));
      break;
    case ActivationKind::gelu: {
      const Scalar inv_sqrt_2pi = Scalar(0.5 * M_2_SQRTPI * M_SQRT1_2);
      const ArrayX<Scalar> cdf = Scalar(0.5) * (Scalar(1) + (xa * Scalar(M_SQRT1_2)).unaryExpr([](Scalar v) { return std::erf(v); }));
      const ArrayX<Scalar> pdf = inv_sqrt_2pi * (Scalar(-0.5) * xa.square()).exp();
      dx.array() = dy * (cdf + xa * pdf);
      break;
    }
    case ActivationKind::quick_gelu: {
      const Scalar a = Scalar(kQuickGeluScale);
      const ArrayX<Scalar> s = Scalar(1) / (Scalar(1) + (-a * xa).exp());
      dx.array() = dy * (s + a * xa * s * (Scalar(1) - s));
      break;
    }
  }
  return dx;
}

template <typename Scalar>
Shape Activation<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  ops.touch(std::string(kind()));
  return in;
}

// ---------------------------------------------------------------------------
// Dropout

template <typename Scalar>
Dropout<Scalar>::Dropout(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("Dropout: rate must lie in [0, 1)");
}

template <typename Scalar>
Tensor<Scalar> Dropout<Scalar>::forward(const Tensor<Scalar>& x) {
  active_ = this->training() && rate_ > 0.0;
  if (!active_) return x;
  std::bernoulli_distribution keep(1.0 - rate_);
  Tensor<Scalar> mask(x.shape());
  const Scalar scale = Scalar(1.0 / (1.0 - rate_));
  for (Index i = 0; i < mask.size(); ++i) mask[i] = keep(engine_) ? scale : Scalar(0);
  Tensor<Scalar> y(x.shape());
  y.array() = x.array() * mask.array();
  if (this->recording()) mask_ = std::move(mask);
  return y;
}

template <typename Scalar>
Tensor<Scalar> Dropout<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (!active_) return grad_out;
  Tensor<Scalar> dx(grad_out.shape());
  dx.array() = grad_out.array() * mask_.array();
  return dx;
}

template <typename Scalar>
Shape Dropout<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  ops.touch(std::string(kind()));
  return in;
}

// ---------------------------------------------------------------------------
// pooling

template <typename Scalar>
Tensor<Scalar> AvgPool2d<Scalar>::forward(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 4, "AvgPool2d");
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), k = kernel_;
  const Index oh = h / k, ow = w / k;
  if (oh == 0 || ow == 0) throw ShapeError("AvgPool2d: input " + to_string(x.shape()) + " smaller than kernel");
  Tensor<Scalar> y({x.dim(0), x.dim(1), oh, ow});
  const Scalar inv = Scalar(1) / Scalar(k * k);
  for (Index p = 0; p < nc; ++p) {
    const Scalar* src = x.data() + p * h * w;
    Scalar* dst = y.data() + p * oh * ow;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ky = 0; ky < k; ++ky) {
        const Scalar* row = src + (oy * k + ky) * w;
        for (Index ox = 0; ox < ow; ++ox) {
          Scalar s = 0;
          for (Index kx = 0; kx < k; ++kx) s += row[ox * k + kx];
          dst[oy * ow + ox] += s * inv;
        }
      }
    }
  }
  in_shape_ = x.shape();
  return y;
}

template <typename Scalar>
Tensor<Scalar> AvgPool2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Index nc = in_shape_[0] * in_shape_[1], h = in_shape_[2], w = in_shape_[3], k = kernel_;
  const Index oh = h / k, ow = w / k;
  Tensor<Scalar> dx(in_shape_);
  const Scalar inv = Scalar(1) / Scalar(k * k);
  for (Index p = 0; p < nc; ++p) {
    const Scalar* dy = grad_out.data() + p * oh * ow;
    Scalar* dst = dx.data() + p * h * w;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ky = 0; ky < k; ++ky) {
        Scalar* row = dst + (oy * k + ky) * w;
        for (Index ox = 0; ox < ow; ++ox) {
          const Scalar g = dy[oy * ow + ox] * inv;
          for (Index kx = 0; kx < k; ++kx) row[ox * k + kx] = g;
        }
      }
    }
  }
  return dx;
}

template <typename Scalar>
Shape AvgPool2d<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  expect_rank(in, 4, "AvgPool2d");
  ops.touch(std::string(kind()));
  return {in[0], in[1], in[2] / kernel_, in[3] / kernel_};
}

template <typename Scalar>
Tensor<Scalar> GlobalAvgPool2d<Scalar>::forward(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 4, "GlobalAvgPool2d");
  const Index nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> y({x.dim(0), x.dim(1)});
  y.block(0, nc, 1) = x.block(0, nc, hw).rowwise().mean();
  in_shape_ = x.shape();
  return y;
}

template <typename Scalar>
Tensor<Scalar> GlobalAvgPool2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Index nc = in_shape_[0] * in_shape_[1], hw = in_shape_[2] * in_shape_[3];
  Tensor<Scalar> dx(in_shape_);
  dx.block(0, nc, hw).colwise() = grad_out.block(0, nc, 1).col(0) / Scalar(hw);
  return dx;
}

template <typename Scalar>
Shape GlobalAvgPool2d<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  expect_rank(in, 4, "GlobalAvgPool2d");
  ops.touch(std::string(kind()));
  return {in[0], in[1]};
}

// ---------------------------------------------------------------------------
// attention core: q, k, v are [L, D] per batch item, heads split along D.

namespace {

template <typename Scalar>
void attend(AttentionCache<Scalar>& c, Index heads) {
  const Index lq = c.q.rows(), lk = c.k.rows(), d = c.q.cols(), dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  c.probs.resize(static_cast<std::size_t>(heads));
  c.context.resize(lq, d);
  for (Index h = 0; h < heads; ++h) {
    MatrixR<Scalar>& p = c.probs[static_cast<std::size_t>(h)];
    p.noalias() = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
    for (Index r = 0; r < lq; ++r) {
      auto row = p.row(r).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
    }
    c.context.middleCols(h * dh, dh).noalias() = p * c.v.middleCols(h * dh, dh);
  }
  (void)lk;
}

/// Given d(context), fills dq, dk, dv.
template <typename Scalar>
void attend_backward(const AttentionCache<Scalar>& c, Index heads, const MatrixR<Scalar>& dctx, MatrixR<Scalar>& dq,
                     MatrixR<Scalar>& dk, MatrixR<Scalar>& dv) {
  const Index d = c.q.cols(), dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  dq.setZero(c.q.rows(), d);
  dk.setZero(c.k.rows(), d);
  dv.setZero(c.v.rows(), d);
  MatrixR<Scalar> dp, ds;
  for (Index h = 0; h < heads; ++h) {
    const MatrixR<Scalar>& p = c.probs[static_cast<std::size_t>(h)];
    auto dctx_h = dctx.middleCols(h * dh, dh);
    dp.noalias() = dctx_h * c.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh).noalias() = p.transpose() * dctx_h;
    const ArrayX<Scalar> rowdot = (dp.array() * p.array()).rowwise().sum();
    ds = (p.array() * (dp.array().colwise() - rowdot)).matrix() * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
}

std::uint64_t attention_macs(Index lq, Index lk, Index d) {
  return static_cast<std::uint64_t>(2 * lq * lk * d);
}

}  // namespace

template <typename Scalar>
MultiheadSelfAttention<Scalar>::MultiheadSelfAttention(Index dim, Index heads) : dim_(dim), heads_(heads) {
  if (dim % heads != 0) throw std::invalid_argument("MultiheadSelfAttention: dim not divisible by heads");
  in_proj_weight_ = make_parameter<Scalar>({3 * dim, dim});
  in_proj_bias_ = make_parameter<Scalar>({3 * dim}, Role::no_decay);
  this->register_parameter("in_proj_weight", in_proj_weight_);
  this->register_parameter("in_proj_bias", in_proj_bias_);
  out_proj_ = &this->register_module("out_proj", std::make_unique<Linear<Scalar>>(dim, dim));
}

template <typename Scalar>
Tensor<Scalar> MultiheadSelfAttention<Scalar>::forward(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 3, "MultiheadSelfAttention");
  if (x.dim(2) != dim_) throw ShapeError("MultiheadSelfAttention: width mismatch " + to_string(x.shape()));
  const Index n = x.dim(0), l = x.dim(1), d = dim_;
  ConstMatrixMap<Scalar> w(in_proj_weight_.value.data(), 3 * d, d);
  const auto b = in_proj_bias_.value.array().matrix().transpose();
  Tensor<Scalar> context({n, l, d});
  std::vector<AttentionCache<Scalar>> caches(static_cast<std::size_t>(n));
  MatrixR<Scalar> qkv;
  for (Index i = 0; i < n; ++i) {
    auto& c = caches[static_cast<std::size_t>(i)];
    qkv.noalias() = x.block(i * l * d, l, d) * w.transpose();
    qkv.rowwise() += b;
    c.q = qkv.leftCols(d);
    c.k = qkv.middleCols(d, d);
    c.v = qkv.rightCols(d);
    attend(c, heads_);
    context.block(i * l * d, l, d) = c.context;
  }
  if (this->recording()) {
    input_ = x;
    cache_ = std::move(caches);
  }
  return out_proj_->forward(context);
}

template <typename Scalar>
Tensor<Scalar> MultiheadSelfAttention<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (input_.empty()) throw std::logic_error("MultiheadSelfAttention::backward without a recorded forward");
  const Tensor<Scalar> dcontext = out_proj_->backward(grad_out);
  const Index n = input_.dim(0), l = input_.dim(1), d = dim_;
  ConstMatrixMap<Scalar> w(in_proj_weight_.value.data(), 3 * d, d);
  MatrixMap<Scalar> dw(in_proj_weight_.grad.data(), 3 * d, d);
  Tensor<Scalar> dx(input_.shape());
  MatrixR<Scalar> dq, dk, dv, dqkv(l, 3 * d), dctx;
  for (Index i = 0; i < n; ++i) {
    dctx = dcontext.block(i * l * d, l, d);
    attend_backward(cache_[static_cast<std::size_t>(i)], heads_, dctx, dq, dk, dv);
    dqkv << dq, dk, dv;
    dw.noalias() += dqkv.transpose() * input_.block(i * l * d, l, d);
    in_proj_bias_.grad.array() += dqkv.colwise().sum().transpose().array();
    dx.block(i * l * d, l, d).noalias() = dqkv * w;
  }
  return dx;
}

template <typename Scalar>
Shape MultiheadSelfAttention<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  expect_rank(in, 3, "MultiheadSelfAttention");
  const Index n = in[0], l = in[1], d = in[2];
  ops.add("linear", static_cast<std::uint64_t>(n * l * d * 3 * d));
  ops.add("attention", static_cast<std::uint64_t>(n) * attention_macs(l, l, d));
  out_proj_->trace(in, ops);
  return in;
}

// ---------------------------------------------------------------------------
// AttentionPool2d

template <typename Scalar>
AttentionPool2d<Scalar>::AttentionPool2d(Index spatial, Index dim, Index heads, Index out_dim)
    : spatial_(spatial), dim_(dim), heads_(heads), out_dim_(out_dim) {
  if (dim % heads != 0) throw std::invalid_argument("AttentionPool2d: dim not divisible by heads");
  positional_embedding_ = make_parameter<Scalar>({spatial * spatial + 1, dim});
  this->register_parameter("positional_embedding", positional_embedding_);
  k_proj_ = &this->register_module("k_proj", std::make_unique<Linear<Scalar>>(dim, dim));
  q_proj_ = &this->register_module("q_proj", std::make_unique<Linear<Scalar>>(dim, dim));
  v_proj_ = &this->register_module("v_proj", std::make_unique<Linear<Scalar>>(dim, dim));
  c_proj_ = &this->register_module("c_proj", std::make_unique<Linear<Scalar>>(dim, out_dim));
}

template <typename Scalar>
Tensor<Scalar> AttentionPool2d<Scalar>::forward(const Tensor<Scalar>& x) {
  expect_rank(x.shape(), 4, "AttentionPool2d");
  if (x.dim(1) != dim_ || x.dim(2) != spatial_ || x.dim(3) != spatial_) {
    throw ShapeError("AttentionPool2d: expected [N, " + std::to_string(dim_) + ", " + std::to_string(spatial_) + ", " +
                     std::to_string(spatial_) + "], got " + to_string(x.shape()));
  }
  const Index n = x.dim(0), hw = spatial_ * spatial_, l = hw + 1, d = dim_;
  Tensor<Scalar> tokens({n, l, d});
  for (Index i = 0; i < n; ++i) {
    auto t = tokens.block(i * l * d, l, d);
    auto xi = x.block(i * d * hw, d, hw);
    t.row(0) = xi.rowwise().mean().transpose();
    t.bottomRows(hw) = xi.transpose();
    t += positional_embedding_.value.block(0, l, d);
  }
  const Tensor<Scalar> q = q_proj_->forward(tokens);
  const Tensor<Scalar> k = k_proj_->forward(tokens);
  const Tensor<Scalar> v = v_proj_->forward(tokens);
  Tensor<Scalar> context({n, l, d});
  std::vector<AttentionCache<Scalar>> caches(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    auto& c = caches[static_cast<std::size_t>(i)];
    c.q = q.block(i * l * d, l, d);
    c.k = k.block(i * l * d, l, d);
    c.v = v.block(i * l * d, l, d);
    attend(c, heads_);
    context.block(i * l * d, l, d) = c.context;
  }
  const Tensor<Scalar> projected = c_proj_->forward(context);
  Tensor<Scalar> y({n, out_dim_});
  for (Index i = 0; i < n; ++i) y.block(i * out_dim_, 1, out_dim_) = projected.block(i * l * out_dim_, 1, out_dim_);
  if (this->recording()) cache_ = std::move(caches);
  in_shape_ = x.shape();
  return y;
}

template <typename Scalar>
Tensor<Scalar> AttentionPool2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (cache_.empty()) throw std::logic_error("AttentionPool2d::backward without a recorded forward");
  const Index n = in_shape_[0], hw = spatial_ * spatial_, l = hw + 1, d = dim_;
  Tensor<Scalar> dprojected({n, l, out_dim_});
  for (Index i = 0; i < n; ++i) dprojected.block(i * l * out_dim_, 1, out_dim_) = grad_out.block(i * out_dim_, 1, out_dim_);
  const Tensor<Scalar> dcontext = c_proj_->backward(dprojected);
  Tensor<Scalar> dq({n, l, d}), dk({n, l, d}), dv({n, l, d});
  MatrixR<Scalar> dctx, gq, gk, gv;
  for (Index i = 0; i < n; ++i) {
    dctx = dcontext.block(i * l * d, l, d);
    attend_backward(cache_[static_cast<std::size_t>(i)], heads_, dctx, gq, gk, gv);
    dq.block(i * l * d, l, d) = gq;
    dk.block(i * l * d, l, d) = gk;
    dv.block(i * l * d, l, d) = gv;
  }
  Tensor<Scalar> dtokens = q_proj_->backward(dq);
  dtokens.array() += k_proj_->backward(dk).array();
  dtokens.array() += v_proj_->backward(dv).array();

  Tensor<Scalar> dx(in_shape_);
  auto dpos = positional_embedding_.grad.block(0, l, d);
  for (Index i = 0; i < n; ++i) {
    auto dt = dtokens.block(i * l * d, l, d);
    dpos += dt;
    auto dxi = dx.block(i * d * hw, d, hw);
    dxi = dt.bottomRows(hw).transpose();
    dxi.colwise() += dt.row(0).transpose() / Scalar(hw);
  }
  return dx;
}

template <typename Scalar>
Shape AttentionPool2d<Scalar>::trace(const Shape& in, OpCounter& ops) const {
  expect_rank(in, 4, "AttentionPool2d");
  if (in[1] != dim_ || in[2] != spatial_ || in[3] != spatial_) {
    throw ShapeError("AttentionPool2d: trace shape mismatch " + to_string(in));
  }
  const Index n = in[0], l = spatial_ * spatial_ + 1;
  const Shape tokens{n, l, dim_};
  q_proj_->trace(tokens, ops);
  k_proj_->trace(tokens, ops);
  v_proj_->trace(tokens, ops);
  ops.add("attention", static_cast<std::uint64_t>(n) * attention_macs(l, l, dim_));
  c_proj_->trace(tokens, ops);
  return {n, out_dim_};
}

#define DFD_INSTANTIATE_LAYERS(S)                                  \
  template class Conv2d<S>;                                        \
  template class BatchNorm2d<S>;                                   \
  template class LayerNorm<S>;                                     \
  template class LayerNorm2d<S>;                                   \
  template class Linear<S>;                                        \
  template class Activation<S>;                                    \
  template class Dropout<S>;                                       \
  template class AvgPool2d<S>;                                     \
  template class GlobalAvgPool2d<S>;                               \
  template class MultiheadSelfAttention<S>;                        \
  template class AttentionPool2d<S>;                               \
  template Tensor<S> nchw_to_nhwc<S>(const Tensor<S>&);            \
  template Tensor<S> nhwc_to_nchw<S>(const Tensor<S>&);

DFD_INSTANTIATE_LAYERS(float)
DFD_INSTANTIATE_LAYERS(double)

}  // namespace dfd::nn
