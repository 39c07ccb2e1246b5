#pragma once

#include "tumorseg/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace tumorseg {

/// Reverse-mode graph node. Interior nodes own their parents so a result keeps
/// the whole subgraph alive until backward() releases it.
template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<Scalar>& grad_buffer() {
    if (grad.shape() != value.shape()) grad.resize(value.shape());
    return grad;
  }
};

/// Handle to a graph node. Copies share the node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient; zeros of value().shape() if nothing flowed back.
  const Tensor<Scalar>& grad() const;
  void zero_grad();

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Wraps an op result; records the backward closure only when some input
/// needs a gradient and recording is enabled.
template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                        std::function<void(Node<Scalar>&)> backward_fn);

/// Propagates d(root)/d(leaf) into every reachable leaf. The root must be a
/// single element. The traversed graph is released afterwards.
template <typename Scalar>
void backward(const Var<Scalar>& root);

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Differentiable ops. All feature maps are NCHW.

struct ConvGeometry {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
};

/// weight: (out, in, kh, kw); bias: (1, out, 1, 1) or undefined.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   ConvGeometry geometry = {});

/// 2x2 kernel, stride 2. weight: (in, out, 2, 2); bias: (1, out, 1, 1) or undefined.
template <typename Scalar>
Var<Scalar> conv_transpose2x2(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

/// Per-channel normalization. In training mode batch statistics are used and
/// the running estimates are updated in place; otherwise the running
/// estimates are used.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training,
                       Scalar momentum, Scalar eps);

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x);
/// Sigmoid bounded to [eps/2, 1 - eps/2] for the scalar type, so saturated
/// logits still give probabilities strictly inside (0, 1).
template <typename Scalar>
Var<Scalar> probability(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

/// alpha: (N, 1, H, W) broadcast over the channels of x.
template <typename Scalar>
Var<Scalar> scale_spatial(const Var<Scalar>& alpha, const Var<Scalar>& x);

/// s: (N, C, 1, 1) broadcast over the pixels of x.
template <typename Scalar>
Var<Scalar> scale_channels(const Var<Scalar>& s, const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> max_pool(const Var<Scalar>& x, int kernel, int stride, int pad = 0);

template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts);

/// Bilinear resampling with half-pixel centers (align_corners = false).
template <typename Scalar>
Var<Scalar> resize_bilinear(const Var<Scalar>& x, Index out_h, Index out_w);

/// sum(weights * x) as a 1x1x1x1 value.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& x, const Tensor<Scalar>& weights);

/// Mean pixelwise binary cross-entropy of probabilities against {0,1}
/// targets. Probabilities are clamped to [eps, 1 - eps]; the gradient is
/// evaluated at the clamped value and passed straight through.
template <typename Scalar>
Var<Scalar> bce_loss(const Var<Scalar>& pred, const Tensor<Scalar>& target, double eps = 1e-7);

// Non-differentiable helper shared by the data pipeline.
template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& x, Index out_h, Index out_w);

template <typename Scalar>
Tensor<Scalar> resize_nearest(const Tensor<Scalar>& x, Index out_h, Index out_w);

}  // namespace tumorseg
