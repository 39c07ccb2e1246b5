#pragma once

#include "tumorseg/blocks.hpp"

#include <memory>
#include <vector>

namespace tumorseg {

/// Multi-resolution features of an encoder. skips[i] has spatial extent
/// input / 2^i; bottom has input / 2^depth.
template <typename Scalar>
struct EncoderFeatures {
  std::vector<Var<Scalar>> skips;
  Var<Scalar> bottom;
};

template <typename Scalar>
class Encoder : public Module<Scalar> {
 public:
  virtual EncoderFeatures<Scalar> forward(const Var<Scalar>& x, Phase phase) = 0;
  virtual std::vector<Index> skip_channels() const = 0;
  virtual Index bottom_channels() const = 0;
  virtual Index input_channels() const = 0;
};

/// Block-per-level encoder. Double-conv and recurrent blocks are preceded by
/// 2x2 max pooling; residual blocks downsample with stride 2 instead.
template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_plain_encoder(BlockKind kind, int depth, Index base_width,
                                                    const BlockConfig& block, Initializer& init);

/// VGG-19 convolution layout: stages of {2, 2, 4, 4, 4} 3x3 convolutions with
/// widths base x {1, 2, 4, 8, 8}. Supports depth <= 4.
template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_vgg19_encoder(int depth, Index base_width, bool batch_norm, Initializer& init);

/// ResNet-152 layout: 7x7/2 stem, 3x3/2 max pool, then {3, 8, 36, 3}
/// bottleneck blocks of width base x {1, 2, 4, 8} with 4x expansion.
/// Supports depth <= 5; stages beyond the requested depth are not built.
template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_resnet152_encoder(int depth, Index base_width, Initializer& init);

/// DenseNet-201 layout: 7x7/2 stem, 3x3/2 max pool, dense blocks of
/// {6, 12, 48, 32} bottleneck layers with growth base/2, halving transitions.
/// Supports depth <= 5.
template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_densenet201_encoder(int depth, Index base_width, Initializer& init);

}  // namespace tumorseg
