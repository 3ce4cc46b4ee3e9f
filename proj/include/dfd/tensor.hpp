#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfd {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape);

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<MatrixR<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixR<Scalar>>;
template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

/// Dense row-major n-d array. Storage is a contiguous Eigen array so any
/// contiguous slab can be viewed as a row-major matrix without copying.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(ArrayX<Scalar>::Zero(numel(shape_))) {}
  Tensor(std::initializer_list<Index> shape) : Tensor(Shape(shape)) {}
  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(ArrayX<Scalar>::Constant(numel(shape_), fill)) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  ArrayX<Scalar>& array() { return data_; }
  const ArrayX<Scalar>& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Same storage, new shape; element count must agree.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }
  void reshape(Shape shape) {
    if (numel(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

  /// Row-major matrix view over the whole buffer; the trailing dim is the column axis.
  MatrixMap<Scalar> matrix() { return MatrixMap<Scalar>(data(), size() / cols(), cols()); }
  ConstMatrixMap<Scalar> matrix() const { return ConstMatrixMap<Scalar>(data(), size() / cols(), cols()); }

  /// View of a contiguous block of `rows * cols` elements starting at `offset`.
  MatrixMap<Scalar> block(Index offset, Index rows, Index cols) {
    return MatrixMap<Scalar>(data() + offset, rows, cols);
  }
  ConstMatrixMap<Scalar> block(Index offset, Index rows, Index cols) const {
    return ConstMatrixMap<Scalar>(data() + offset, rows, cols);
  }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

 private:
  Index cols() const { return shape_.empty() ? 1 : std::max<Index>(shape_.back(), 1); }

  Shape shape_;
  ArrayX<Scalar> data_;
};

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline void expect_rank(const Shape& shape, Index rank, const char* who) {
  if (static_cast<Index>(shape.size()) != rank) {
    throw ShapeError(std::string(who) + ": expected rank " + std::to_string(rank) + " input, got " +
                     to_string(shape));
  }
}

}  // namespace dfd
