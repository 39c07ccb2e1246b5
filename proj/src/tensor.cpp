#include "tumorseg/tensor.hpp"

#include "tumorseg/error.hpp"

#include <ostream>

namespace tumorseg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMissingField: return "MissingField";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kUnsupportedContainer: return "UnsupportedContainer";
    case ErrorCode::kInvalidRecord: return "InvalidRecord";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kDuplicateStem: return "DuplicateStem";
    case ErrorCode::kCountMismatch: return "CountMismatch";
    case ErrorCode::kChannelMismatch: return "ChannelMismatch";
    case ErrorCode::kSpatialMismatch: return "SpatialMismatch";
    case ErrorCode::kRatioError: return "RatioError";
    case ErrorCode::kEmptyRates: return "EmptyRates";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kInvalidBackbone: return "InvalidBackbone";
    case ErrorCode::kBadInputSize: return "BadInputSize";
    case ErrorCode::kConfigMismatch: return "ConfigMismatch";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kEmptySplit: return "EmptySplit";
    case ErrorCode::kDivergedLoss: return "DivergedLoss";
    case ErrorCode::kEmptyHistory: return "EmptyHistory";
    case ErrorCode::kBadThreshold: return "BadThreshold";
    case ErrorCode::kMixedSplit: return "MixedSplit";
    case ErrorCode::kDuplicateModel: return "DuplicateModel";
    case ErrorCode::kEmptySet: return "EmptySet";
    case ErrorCode::kMissingPrediction: return "MissingPrediction";
  }
  return "Unknown";
}

std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
}

template <typename Scalar>
Tensor<Scalar> random_normal(const Shape& shape, std::mt19937_64& rng, Scalar stddev) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> random_uniform(const Shape& shape, std::mt19937_64& rng, Scalar lo, Scalar hi) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> slice_batch(const Tensor<Scalar>& t, Index first, Index count) {
  Shape s = t.shape();
  s.n = count;
  Tensor<Scalar> out(s);
  out.vec() = t.vec().segment(first * s.sample(), count * s.sample());
  return out;
}

#define TUMORSEG_INSTANTIATE(Scalar)                                                          \
  template Tensor<Scalar> random_normal(const Shape&, std::mt19937_64&, Scalar);              \
  template Tensor<Scalar> random_uniform(const Shape&, std::mt19937_64&, Scalar, Scalar);     \
  template Tensor<Scalar> slice_batch(const Tensor<Scalar>&, Index, Index);

TUMORSEG_INSTANTIATE(float)
TUMORSEG_INSTANTIATE(double)

}  // namespace tumorseg
