#pragma once

#include "dfd/archive.hpp"
#include "dfd/nn/module.hpp"

#include <map>
#include <string>
#include <vector>

namespace dfd {

template <typename Scalar>
struct LossAndGrad {
  double loss = 0.0;        // mean over the batch
  Tensor<Scalar> grad;      // d(mean loss)/d(logits), [N, C]
};

/// Mean softmax cross-entropy of [N, C] logits against class indices.
template <typename Scalar>
LossAndGrad<Scalar> cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& targets);

/// Adam with coupled L2: role-`weight` parameters get `weight_decay * w`
/// added to their gradient before the moment updates.
template <typename Scalar>
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Adam(std::vector<nn::NamedParameter<Scalar>> params, Options options);

  void step(double lr);
  void zero_grad();

  std::int64_t steps() const { return t_; }
  const Options& options() const { return options_; }

  /// Moment tensors named "<prefix>m.<param>" / "<prefix>v.<param>".
  std::map<std::string, Tensor<float>> state_tensors(const std::string& prefix = "adam.") const;
  /// Restores moments saved by state_tensors; throws ArchiveError when any are missing.
  void load_state(const TensorArchive& archive, std::int64_t steps, const std::string& prefix = "adam.");

 private:
  struct Slot {
    std::string name;
    nn::Parameter<Scalar>* param;
    ArrayX<Scalar> m, v;
  };
  std::vector<Slot> slots_;
  Options options_;
  std::int64_t t_ = 0;
};

}  // namespace dfd
