#pragma once

#include "dfd/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dfd::nn {

/// How the optimizer treats a state tensor. Buffers (e.g. batch-norm running
/// statistics) are persisted but never trained; `no_decay` covers biases and
/// normalization affine parameters, which are excluded from L2 weight decay.
enum class Role { weight, no_decay, buffer };

template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  Role role = Role::weight;
  bool frozen = false;

  bool trainable() const { return role != Role::buffer && !frozen; }
};

/// Shape-only multiply-accumulate bookkeeping. Only matrix-product style work
/// (convolutions, affine maps, attention products) contributes MACs; norms,
/// activations and pooling register as supported with zero MACs.
struct OpCounter {
  std::uint64_t macs = 0;
  std::map<std::string, std::uint64_t> macs_by_kind;

  void add(const std::string& kind, std::uint64_t n) {
    macs += n;
    macs_by_kind[kind] += n;
  }
  void touch(const std::string& kind) { macs_by_kind.emplace(kind, 0); }
};

class UnsupportedLayer : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using NamedParameter = std::pair<std::string, Parameter<Scalar>*>;

/// Layer with explicit reverse-mode differentiation. `forward` caches what
/// `backward` needs only while recording is enabled; `backward` accumulates
/// into parameter gradients and returns the gradient w.r.t. the input of the
/// most recent recorded `forward`.
///
/// Modules own their children and are neither copyable nor movable (children
/// and parameters are registered by address).
template <typename Scalar>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x) = 0;
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) = 0;
  virtual std::string_view kind() const = 0;

  /// Output shape for input `in`; adds this layer's MACs. Layers without a
  /// registered counter throw UnsupportedLayer rather than being skipped.
  virtual Shape trace(const Shape& in, OpCounter& ops) const {
    (void)in;
    (void)ops;
    throw UnsupportedLayer("no op counter registered for layer kind '" + std::string(kind()) + "'");
  }

  void set_training(bool on) {
    training_ = on;
    for (auto& [name, child] : children_) child->set_training(on);
  }
  void set_recording(bool on) {
    recording_ = on;
    if (!on) release_cache();
    for (auto& [name, child] : children_) child->set_recording(on);
  }
  bool training() const { return training_; }
  bool recording() const { return recording_; }

  /// Depth-first list of every parameter and buffer, with dotted names.
  std::vector<NamedParameter<Scalar>> named_parameters(const std::string& prefix = "") {
    std::vector<NamedParameter<Scalar>> out;
    collect(prefix, out);
    return out;
  }

  void zero_grad() {
    for (auto& [name, p] : named_parameters()) {
      if (p->role != Role::buffer) p->grad.set_zero();
    }
  }

  void set_frozen(bool frozen) {
    for (auto& [name, p] : named_parameters()) p->frozen = frozen;
  }

 protected:
  Parameter<Scalar>& register_parameter(const std::string& name, Parameter<Scalar>& p) {
    if (p.role != Role::buffer) p.grad = Tensor<Scalar>::zeros_like(p.value);
    params_.emplace_back(name, &p);
    return p;
  }
  template <typename M>
  M& register_module(const std::string& name, std::unique_ptr<M> module) {
    M& ref = *module;
    owned_.push_back(std::move(module));
    children_.emplace_back(name, &ref);
    return ref;
  }

  virtual void release_cache() {}

 private:
  void collect(const std::string& prefix, std::vector<NamedParameter<Scalar>>& out) {
    for (auto& [name, p] : params_) out.emplace_back(prefix + name, p);
    for (auto& [name, child] : children_) child->collect(prefix + name + ".", out);
  }

  bool training_ = false;
  bool recording_ = false;
  std::vector<std::pair<std::string, Parameter<Scalar>*>> params_;
  std::vector<std::pair<std::string, Module*>> children_;
  std::vector<std::unique_ptr<Module>> owned_;
};

template <typename Scalar>
Parameter<Scalar> make_parameter(Shape shape, Role role = Role::weight) {
  Parameter<Scalar> p;
  p.value = Tensor<Scalar>(std::move(shape));
  p.role = role;
  return p;
}

}  // namespace dfd::nn
