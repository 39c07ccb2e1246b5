#pragma once

#include "tumorseg/nn.hpp"

#include <memory>
#include <vector>

namespace tumorseg {

/// Knobs shared by the building blocks. Only the fields a block reads are
/// validated by that block.
struct BlockConfig {
  Index in_channels = 1;
  Index out_channels = 1;
  int stride = 1;
  int recurrence_steps = 2;
  int se_ratio = 8;
  std::vector<int> aspp_rates{1, 2, 4};
  bool use_batch_norm = true;
  /// 0 selects half of the skip channels (at least one).
  Index gate_inter_channels = 0;
};

/// Single-input block with a fixed channel contract.
template <typename Scalar>
class Block : public Module<Scalar> {
 public:
  virtual Var<Scalar> forward(const Var<Scalar>& x, Phase phase) = 0;
  virtual Index in_channels() const = 0;
  virtual Index out_channels() const = 0;
};

/// Two 3x3 same-padded convolutions, each followed by (optional BN and) ReLU.
template <typename Scalar>
class DoubleConv : public Block<Scalar> {
 public:
  DoubleConv(const BlockConfig& cfg, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) override;
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;
  Index in_channels() const override { return in_; }
  Index out_channels() const override { return out_; }

  ConvBnAct<Scalar> first;
  ConvBnAct<Scalar> second;

 private:
  Index in_, out_;
};

/// Additive attention gate. The gating signal g sits one level deeper than
/// the skip map x, so each spatial extent of x is exactly twice that of g.
///
///   q     = relu(W_x * x (2x2, stride 2) + W_g * g (1x1))
///   alpha = upsample2(sigmoid(psi * q))           (N, 1, H_x, W_x)
///   out   = alpha .* x
template <typename Scalar>
class AttentionGate : public Module<Scalar> {
 public:
  AttentionGate(Index gate_channels, Index skip_channels, Index inter_channels, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& g, const Var<Scalar>& x, Phase phase);
  /// The single-channel coefficient map applied to x.
  Var<Scalar> coefficients(const Var<Scalar>& g, const Var<Scalar>& x);
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;

  Conv2d<Scalar> skip_proj;
  Conv2d<Scalar> gate_proj;
  Conv2d<Scalar> psi;

 private:
  Index gate_channels_, skip_channels_;
};

/// Pre-activation residual unit: H(x) = F(x) + shortcut(x) with
/// F = (BN -> ReLU -> 3x3 conv) x 2. The first conv carries the stride. The
/// shortcut is the identity when shapes allow, else a strided 1x1 projection.
template <typename Scalar>
class ResidualUnit : public Block<Scalar> {
 public:
  ResidualUnit(const BlockConfig& cfg, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) override;
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;
  Index in_channels() const override { return in_; }
  Index out_channels() const override { return out_; }
  bool projects() const { return project_; }

  BatchNorm2d<Scalar> bn1, bn2;
  Conv2d<Scalar> conv1, conv2;
  ConvBnAct<Scalar> shortcut;

 private:
  Index in_, out_;
  bool bn_, project_;
};

/// Channel recalibration: s = sigmoid(W2 relu(W1 avgpool(x))), out = s .* x.
template <typename Scalar>
class SqueezeExcitation : public Block<Scalar> {
 public:
  SqueezeExcitation(Index channels, int ratio, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) override;
  Var<Scalar> excitation(const Var<Scalar>& x);
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;
  Index in_channels() const override { return channels_; }
  Index out_channels() const override { return channels_; }
  Index bottleneck() const { return squeeze.weight.shape().n; }

  Conv2d<Scalar> squeeze;
  Conv2d<Scalar> expand;

 private:
  Index channels_;
};

/// Parallel dilated 3x3 branches (one per rate), concatenated and fused by a
/// 1x1 convolution.
template <typename Scalar>
class Aspp : public Block<Scalar> {
 public:
  Aspp(Index in, Index out, const std::vector<int>& rates, bool batch_norm, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) override;
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;
  Index in_channels() const override { return in_; }
  Index out_channels() const override { return out_; }

  std::vector<ConvBnAct<Scalar>> branches;
  Conv2d<Scalar> fuse;

 private:
  Index in_, out_;
};

/// Recurrent convolutional layer unrolled for t steps:
///   o_0 = conv_f(x),  o_k = relu(bn_k(conv_f(x) + conv_r(o_{k-1}))).
/// Convolutions are shared across steps; each step keeps its own batch-norm
/// statistics.
template <typename Scalar>
class RecurrentConv : public Module<Scalar> {
 public:
  RecurrentConv(Index in, Index out, int steps, bool batch_norm, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase);
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;

  Conv2d<Scalar> feed;
  Conv2d<Scalar> recur;
  std::vector<BatchNorm2d<Scalar>> bn;
  int steps = 2;

 private:
  bool bn_;
};

/// Recurrent residual unit: RCL2(RCL1(x)) + shortcut(x).
template <typename Scalar>
class Rrcu : public Block<Scalar> {
 public:
  Rrcu(const BlockConfig& cfg, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) override;
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;
  Index in_channels() const override { return in_; }
  Index out_channels() const override { return out_; }

  RecurrentConv<Scalar> rcl1, rcl2;
  Conv2d<Scalar> shortcut;

 private:
  Index in_, out_;
  bool project_;
};

/// Input stem: conv(stride) -> BN -> ReLU -> conv, plus a shortcut.
template <typename Scalar>
class Stem : public Block<Scalar> {
 public:
  Stem(const BlockConfig& cfg, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) override;
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;
  Index in_channels() const override { return in_; }
  Index out_channels() const override { return out_; }

  ConvBnAct<Scalar> conv1;
  Conv2d<Scalar> conv2;
  ConvBnAct<Scalar> shortcut;

 private:
  Index in_, out_;
  bool project_;
};

enum class BlockKind { kDoubleConv, kResidual, kRecurrentResidual };

template <typename Scalar>
std::unique_ptr<Block<Scalar>> make_block(BlockKind kind, const BlockConfig& cfg, Initializer& init);

}  // namespace tumorseg
