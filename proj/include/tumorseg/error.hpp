#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tumorseg {

enum class ErrorCode {
  // dataset
  kMissingField,
  kShapeMismatch,
  kUnsupportedContainer,
  kInvalidRecord,
  kIoFailure,
  kDuplicateStem,
  kCountMismatch,
  // blocks
  kChannelMismatch,
  kSpatialMismatch,
  kRatioError,
  kEmptyRates,
  kInvalidConfig,
  // model zoo
  kInvalidBackbone,
  kBadInputSize,
  kConfigMismatch,
  // training
  kNonFiniteGradient,
  kEmptySplit,
  kDivergedLoss,
  kEmptyHistory,
  // metrics / reporting
  kBadThreshold,
  kMixedSplit,
  kDuplicateModel,
  kEmptySet,
  kMissingPrediction,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers dispatch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tumorseg
