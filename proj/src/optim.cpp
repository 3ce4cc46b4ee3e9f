#include "dfd/optim.hpp"

#include <cmath>

namespace dfd {

template <typename Scalar>
LossAndGrad<Scalar> cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& targets) {
  expect_rank(logits.shape(), 2, "cross_entropy");
  const Index n = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(targets.size()) != n) throw ShapeError("cross_entropy: target count differs from batch size");
  LossAndGrad<Scalar> out;
  out.grad = Tensor<Scalar>(logits.shape());
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw std::out_of_range("cross_entropy: target out of range");
    const auto row = logits.block(i * c, 1, c).template cast<double>().array();
    const double mx = row.maxCoeff();
    const Eigen::ArrayXXd e = (row - mx).exp();
    const double z = e.sum();
    total += std::log(z) + mx - row(0, y);
    auto g = out.grad.block(i * c, 1, c);
    for (Index k = 0; k < c; ++k) g(0, k) = static_cast<Scalar>((e(0, k) / z - (k == y ? 1.0 : 0.0)) / static_cast<double>(n));
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

template <typename Scalar>
Adam<Scalar>::Adam(std::vector<nn::NamedParameter<Scalar>> params, Options options) : options_(options) {
  for (auto& [name, p] : params) {
    if (!p->trainable()) continue;
    slots_.push_back({name, p, ArrayX<Scalar>::Zero(p->value.size()), ArrayX<Scalar>::Zero(p->value.size())});
  }
}

template <typename Scalar>
void Adam<Scalar>::zero_grad() {
  for (auto& s : slots_) s.param->grad.set_zero();
}

template <typename Scalar>
void Adam<Scalar>::step(double lr) {
  ++t_;
  const Scalar b1 = static_cast<Scalar>(options_.beta1), b2 = static_cast<Scalar>(options_.beta2);
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  const Scalar step = static_cast<Scalar>(lr / c1);
  const Scalar root_c2 = static_cast<Scalar>(std::sqrt(c2));
  const Scalar eps = static_cast<Scalar>(options_.eps);
  const Scalar wd = static_cast<Scalar>(options_.weight_decay);
  for (auto& s : slots_) {
    auto& w = s.param->value.array();
    ArrayX<Scalar> g = s.param->grad.array();
    if (s.param->role == nn::Role::weight && wd != Scalar(0)) g += wd * w;
    s.m = b1 * s.m + (Scalar(1) - b1) * g;
    s.v = b2 * s.v + (Scalar(1) - b2) * g.square();
    w -= step * s.m / (s.v.sqrt() / root_c2 + eps);
  }
}

template <typename Scalar>
std::map<std::string, Tensor<float>> Adam<Scalar>::state_tensors(const std::string& prefix) const {
  std::map<std::string, Tensor<float>> out;
  for (const auto& s : slots_) {
    Tensor<float> m(s.param->value.shape()), v(s.param->value.shape());
    m.array() = s.m.template cast<float>();
    v.array() = s.v.template cast<float>();
    out.emplace(prefix + "m." + s.name, std::move(m));
    out.emplace(prefix + "v." + s.name, std::move(v));
  }
  return out;
}

template <typename Scalar>
void Adam<Scalar>::load_state(const TensorArchive& archive, std::int64_t steps, const std::string& prefix) {
  for (auto& s : slots_) {
    const auto& m = archive.at(prefix + "m." + s.name);
    const auto& v = archive.at(prefix + "v." + s.name);
    if (m.size() != s.m.size() || v.size() != s.v.size()) throw ArchiveError("optimizer state shape mismatch for " + s.name);
    s.m = m.array().template cast<Scalar>();
    s.v = v.array().template cast<Scalar>();
  }
  t_ = steps;
}

template struct LossAndGrad<float>;
template struct LossAndGrad<double>;
template LossAndGrad<float> cross_entropy<float>(const Tensor<float>&, const std::vector<int>&);
template LossAndGrad<double> cross_entropy<double>(const Tensor<double>&, const std::vector<int>&);
template class Adam<float>;
template class Adam<double>;

}  // namespace dfd
