#pragma once

#include <Eigen/Dense>

#include <complex>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "eegssm/errors.hpp"

namespace eegssm {

using Index = Eigen::Index;

template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using RowMajorMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_product(const std::vector<Index>& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const std::vector<Index>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense N-d array with row-major flat storage. The scalar type is part of the
// type, so real and complex arrays never convert into each other implicitly.
template <class Scalar>
class NdArray {
 public:
  using Flat = VectorX<Scalar>;

  NdArray() = default;

  explicit NdArray(std::vector<Index> shape)
      : shape_(std::move(shape)), data_(Flat::Zero(shape_product(shape_))) {}

  NdArray(std::vector<Index> shape, Flat data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size())
      throw ShapeError("NdArray: shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }

  static NdArray vector(Flat data) {
    const Index n = data.size();
    return NdArray({n}, std::move(data));
  }

  static NdArray vector(std::initializer_list<Scalar> values) {
    Flat data(static_cast<Index>(values.size()));
    Index i = 0;
    for (const auto& v : values) data[i++] = v;
    return vector(std::move(data));
  }

  // Copies a column-major Eigen matrix into a rank-2 row-major array.
  template <class Derived>
  static NdArray from_matrix(const Eigen::MatrixBase<Derived>& m) {
    NdArray out({m.rows(), m.cols()});
    out.matrix() = m;
    return out;
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  Flat& flat() { return data_; }
  const Flat& flat() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  template <class... Idx>
  Scalar& operator()(Idx... idx) {
    return data_[offset({static_cast<Index>(idx)...})];
  }
  template <class... Idx>
  const Scalar& operator()(Idx... idx) const {
    return data_[offset({static_cast<Index>(idx)...})];
  }

  Eigen::Map<RowMajorMatrixX<Scalar>> matrix() {
    require_rank2();
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<const RowMajorMatrixX<Scalar>> matrix() const {
    require_rank2();
    return {data_.data(), shape_[0], shape_[1]};
  }

  void reshape(std::vector<Index> shape) {
    if (shape_product(shape) != size())
      throw ShapeError("NdArray::reshape: " + shape_string(shape) + " incompatible with " +
                       shape_string(shape_));
    shape_ = std::move(shape);
  }

 private:
  Index offset(std::initializer_list<Index> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("NdArray: index rank mismatch");
    Index off = 0;
    std::size_t a = 0;
    for (Index i : idx) off = off * shape_[a++] + i;
    return off;
  }

  void require_rank2() const {
    if (shape_.size() != 2) throw ShapeError("NdArray::matrix requires rank 2, got " + shape_string(shape_));
  }

  std::vector<Index> shape_;
  Flat data_;
};

using RealArray = NdArray<double>;
using ComplexArray = NdArray<std::complex<double>>;

}  // namespace eegssm
