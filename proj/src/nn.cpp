#include "tumorseg/nn.hpp"

#include <cmath>

namespace tumorseg {

namespace {

template <typename Scalar>
class Collector : public ParameterVisitor<Scalar> {
 public:
  void parameter(const std::string&, Var<Scalar>& p) override { params.push_back(p); }
  void buffer(const std::string&, Tensor<Scalar>&) override {}
  std::vector<Var<Scalar>> params;
};

}  // namespace

template <typename Scalar>
std::vector<Var<Scalar>> parameters(Module<Scalar>& m) {
  Collector<Scalar> c;
  m.visit(c, "");
  return std::move(c.params);
}

template <typename Scalar>
std::int64_t parameter_count(Module<Scalar>& m) {
  std::int64_t total = 0;
  for (const auto& p : parameters(m)) total += p.value().size();
  return total;
}

template <typename Scalar>
void zero_grad(Module<Scalar>& m) {
  for (auto& p : parameters(m)) p.zero_grad();
}

template <typename Scalar>
Var<Scalar> Initializer::fan_in_normal(const Shape& shape, Index fan_in) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(std::max<Index>(fan_in, 1)));
  return Var<Scalar>(random_normal<Scalar>(shape, rng_, static_cast<Scalar>(stddev)), true);
}

template <typename Scalar>
Conv2d<Scalar>::Conv2d(const Options& opt, Initializer& init) {
  weight = init.fan_in_normal<Scalar>(Shape{opt.out, opt.in, opt.kernel, opt.kernel}, opt.in * opt.kernel * opt.kernel);
  if (opt.bias) bias = Var<Scalar>(Tensor<Scalar>(Shape{1, opt.out, 1, 1}), true);
  geometry = ConvGeometry{opt.stride, opt.dilation * (opt.kernel - 1) / 2, opt.dilation};
}

template <typename Scalar>
Var<Scalar> Conv2d<Scalar>::forward(const Var<Scalar>& x) const {
  return conv2d(x, weight, bias, geometry);
}

template <typename Scalar>
void Conv2d<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  v.parameter(join_name(prefix, "weight"), weight);
  if (bias.defined()) v.parameter(join_name(prefix, "bias"), bias);
}

template <typename Scalar>
UpConv2x2<Scalar>::UpConv2x2(Index in, Index out, Initializer& init) {
  weight = init.fan_in_normal<Scalar>(Shape{in, out, 2, 2}, in);
  bias = Var<Scalar>(Tensor<Scalar>(Shape{1, out, 1, 1}), true);
}

template <typename Scalar>
Var<Scalar> UpConv2x2<Scalar>::forward(const Var<Scalar>& x) const {
  return conv_transpose2x2(x, weight, bias);
}

template <typename Scalar>
void UpConv2x2<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  v.parameter(join_name(prefix, "weight"), weight);
  v.parameter(join_name(prefix, "bias"), bias);
}

template <typename Scalar>
BatchNorm2d<Scalar>::BatchNorm2d(Index channels)
    : gamma(Tensor<Scalar>(Shape{1, channels, 1, 1}, Scalar(1)), true),
      beta(Tensor<Scalar>(Shape{1, channels, 1, 1}), true),
      running_mean(Shape{1, channels, 1, 1}),
      running_var(Shape{1, channels, 1, 1}, Scalar(1)) {}

template <typename Scalar>
Var<Scalar> BatchNorm2d<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  return batch_norm(x, gamma, beta, running_mean, running_var, phase == Phase::kTrain, momentum, eps);
}

template <typename Scalar>
void BatchNorm2d<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  v.parameter(join_name(prefix, "gamma"), gamma);
  v.parameter(join_name(prefix, "beta"), beta);
  v.buffer(join_name(prefix, "running_mean"), running_mean);
  v.buffer(join_name(prefix, "running_var"), running_var);
}

template <typename Scalar>
ConvBnAct<Scalar>::ConvBnAct(const ConvOptions& opt, bool batch_norm, bool activation,
                             Initializer& init)
    : conv(opt, init), use_bn(batch_norm), use_relu(activation) {
  if (use_bn) bn = BatchNorm2d<Scalar>(opt.out);
}

template <typename Scalar>
Var<Scalar> ConvBnAct<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  Var<Scalar> y = conv.forward(x);
  if (use_bn) y = bn.forward(y, phase);
  return use_relu ? relu(y) : y;
}

template <typename Scalar>
void ConvBnAct<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  conv.visit(v, join_name(prefix, "conv"));
  if (use_bn) bn.visit(v, join_name(prefix, "bn"));
}

#define TUMORSEG_INSTANTIATE(S)                                                    \
  template std::vector<Var<S>> parameters(Module<S>&);                             \
  template std::int64_t parameter_count(Module<S>&);                               \
  template void zero_grad(Module<S>&);                                             \
  template Var<S> Initializer::fan_in_normal<S>(const Shape&, Index);              \
  template class Conv2d<S>;                                                        \
  template class UpConv2x2<S>;                                                     \
  template class BatchNorm2d<S>;                                                   \
  template class ConvBnAct<S>;

TUMORSEG_INSTANTIATE(float)
TUMORSEG_INSTANTIATE(double)

}  // namespace tumorseg
