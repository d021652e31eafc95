#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hair {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Thrown for any shape or argument contract violation inside the numeric core.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a loss, gradient or activation stops being finite.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape);

/// Dense row-major array with explicit shape metadata.
///
/// Storage is an Eigen column vector so every elementwise kernel can work on
/// `vec()` / `array()` directly; 2-D views are obtained with `matrix()`.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  /// Zero-filled tensor.
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(checked_numel(shape_))) {}

  /// Takes ownership of `data`; rejects size mismatches and non-finite values.
  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
    if (!all_finite()) throw std::domain_error("tensor constructed with non-finite values");
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Eigen::Map<const Vector>(values.begin(), static_cast<Index>(values.size()))) {}

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  /// Shape-[1] tensor holding `value`.
  static Tensor scalar(Scalar value) { return constant(Shape{1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(axis < 0 ? shape_.size() + axis : axis); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty() && data_.size() == 0; }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }
  auto array() { return data_.array(); }
  auto array() const { return data_.array(); }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Multi-index access; bounds are checked against the shape.
  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  /// Row-major 2-D view over the contiguous range starting at `start`.
  MatrixMap matrix(Index rows, Index cols, Index start = 0) { return MatrixMap(data_.data() + start, rows, cols); }
  ConstMatrixMap matrix(Index rows, Index cols, Index start = 0) const {
    return ConstMatrixMap(data_.data() + start, rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (checked_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  void set_zero() { data_.setZero(); }

 private:
  static Index checked_numel(const Shape& shape) {
    for (Index d : shape) {
      if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    }
    return numel(shape);
  }

  Index offset(std::initializer_list<Index> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank does not match tensor rank");
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace hair
