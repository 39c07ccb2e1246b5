#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <random>

namespace tumorseg {

using Index = Eigen::Index;

/// Extents of an NCHW feature map.
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index numel() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  Index sample() const { return c * h * w; }
  bool operator==(const Shape&) const = default;
};

std::ostream& operator<<(std::ostream& os, const Shape& s);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense 4-D array in NCHW order backed by a contiguous Eigen vector.
///
/// Per-sample views are exposed as (channels x pixels) row-major matrices so
/// convolutions reduce to plain Eigen products.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using SampleMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstSampleMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Vector::Zero(shape.numel())) {}
  Tensor(const Shape& shape, Scalar fill) : shape_(shape), data_(Vector::Constant(shape.numel(), fill)) {}
  Tensor(Index n, Index c, Index h, Index w) : Tensor(Shape{n, c, h, w}) {}

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }

  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  SampleMap sample(Index n) { return SampleMap(data() + n * shape_.sample(), shape_.c, shape_.plane()); }
  ConstSampleMap sample(Index n) const {
    return ConstSampleMap(data() + n * shape_.sample(), shape_.c, shape_.plane());
  }

  void set_zero() { data_.setZero(); }
  void resize(const Shape& shape) {
    shape_ = shape;
    data_.setZero(shape.numel());
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.vec() = data_.template cast<Other>();
    return out;
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  Shape shape_;
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename Scalar>
Tensor<Scalar> random_normal(const Shape& shape, std::mt19937_64& rng, Scalar stddev = Scalar(1));

template <typename Scalar>
Tensor<Scalar> random_uniform(const Shape& shape, std::mt19937_64& rng, Scalar lo, Scalar hi);

/// Copies samples [first, first + count) into a new tensor.
template <typename Scalar>
Tensor<Scalar> slice_batch(const Tensor<Scalar>& t, Index first, Index count);

/// Gathers the listed samples, in order, into a new tensor.
template <typename Scalar, typename IndexRange>
Tensor<Scalar> gather_batch(const Tensor<Scalar>& t, const IndexRange& indices) {
  Shape s = t.shape();
  s.n = static_cast<Index>(std::size(indices));
  Tensor<Scalar> out(s);
  Index k = 0;
  for (auto i : indices) {
    out.sample(k++) = t.sample(static_cast<Index>(i));
  }
  return out;
}

}  // namespace tumorseg
