#pragma once

#include "tumorseg/autograd.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace tumorseg {

enum class Phase { kTrain, kEval };

/// Walks a module tree, reporting trainable parameters and state buffers by
/// dotted path in a stable order.
template <typename Scalar>
class ParameterVisitor {
 public:
  virtual ~ParameterVisitor() = default;
  virtual void parameter(const std::string& name, Var<Scalar>& p) = 0;
  virtual void buffer(const std::string& name, Tensor<Scalar>& b) = 0;
};

template <typename Scalar>
class Module {
 public:
  virtual ~Module() = default;
  virtual void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) = 0;
};

inline std::string join_name(const std::string& prefix, std::string_view name) {
  return prefix.empty() ? std::string(name) : prefix + "." + std::string(name);
}

template <typename Scalar>
std::vector<Var<Scalar>> parameters(Module<Scalar>& m);

template <typename Scalar>
std::int64_t parameter_count(Module<Scalar>& m);

template <typename Scalar>
void zero_grad(Module<Scalar>& m);

/// Seeded weight initializer: fan-in scaled normal (He), zero biases.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename Scalar>
  Var<Scalar> fan_in_normal(const Shape& shape, Index fan_in);

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

struct ConvOptions {
  Index in = 1;
  Index out = 1;
  int kernel = 3;
  int stride = 1;
  int dilation = 1;
  bool bias = true;
};

template <typename Scalar>
class Conv2d : public Module<Scalar> {
 public:
  using Options = ConvOptions;

  Conv2d() = default;
  Conv2d(const Options& opt, Initializer& init);

  /// "Same" padding for odd kernels: pad = dilation * (kernel - 1) / 2.
  Var<Scalar> forward(const Var<Scalar>& x) const;
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;

  Var<Scalar> weight;
  Var<Scalar> bias;
  ConvGeometry geometry;
};

/// 2x2 stride-2 up-convolution.
template <typename Scalar>
class UpConv2x2 : public Module<Scalar> {
 public:
  UpConv2x2() = default;
  UpConv2x2(Index in, Index out, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x) const;
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;

  Var<Scalar> weight;
  Var<Scalar> bias;
};

template <typename Scalar>
class BatchNorm2d : public Module<Scalar> {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(Index channels);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase);
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;

  Var<Scalar> gamma;
  Var<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);
};

/// Conv followed by optional batch norm and optional ReLU.
template <typename Scalar>
class ConvBnAct : public Module<Scalar> {
 public:
  ConvBnAct() = default;
  ConvBnAct(const ConvOptions& opt, bool batch_norm, bool activation, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase);
  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override;

  Conv2d<Scalar> conv;
  bool use_bn = false;
  bool use_relu = true;
  BatchNorm2d<Scalar> bn;
};

}  // namespace tumorseg
