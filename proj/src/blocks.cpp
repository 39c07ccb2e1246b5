#include "tumorseg/blocks.hpp"

#include "tumorseg/error.hpp"

#include <sstream>

namespace tumorseg {

namespace {

template <typename Scalar>
void expect_channels(const Var<Scalar>& x, Index expected, const char* block) {
  if (x.shape().c != expected) {
    std::ostringstream os;
    os << block << " expects " << expected << " input channels, got " << x.shape();
    throw Error(ErrorCode::kChannelMismatch, os.str());
  }
}

void expect_positive(Index value, const char* what) {
  if (value < 1) throw Error(ErrorCode::kInvalidConfig, std::string(what) + " must be positive");
}

ConvOptions same3x3(Index in, Index out, int stride = 1) {
  return {.in = in, .out = out, .kernel = 3, .stride = stride, .dilation = 1, .bias = true};
}

ConvOptions pointwise(Index in, Index out, int stride = 1) {
  return {.in = in, .out = out, .kernel = 1, .stride = stride, .dilation = 1, .bias = true};
}

}  // namespace

// --- DoubleConv ------------------------------------------------------------

template <typename Scalar>
DoubleConv<Scalar>::DoubleConv(const BlockConfig& cfg, Initializer& init)
    : in_(cfg.in_channels), out_(cfg.out_channels) {
  expect_positive(in_, "in_channels");
  expect_positive(out_, "out_channels");
  first = ConvBnAct<Scalar>(same3x3(in_, out_), cfg.use_batch_norm, true, init);
  second = ConvBnAct<Scalar>(same3x3(out_, out_), cfg.use_batch_norm, true, init);
}

template <typename Scalar>
Var<Scalar> DoubleConv<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  expect_channels(x, in_, "double_conv");
  return second.forward(first.forward(x, phase), phase);
}

template <typename Scalar>
void DoubleConv<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  first.visit(v, join_name(prefix, "conv1"));
  second.visit(v, join_name(prefix, "conv2"));
}

// --- AttentionGate ---------------------------------------------------------

template <typename Scalar>
AttentionGate<Scalar>::AttentionGate(Index gate_channels, Index skip_channels, Index inter_channels,
                                     Initializer& init)
    : gate_channels_(gate_channels), skip_channels_(skip_channels) {
  expect_positive(gate_channels, "gate channels");
  expect_positive(skip_channels, "skip channels");
  const Index inter = inter_channels > 0 ? inter_channels : std::max<Index>(1, skip_channels / 2);
  skip_proj = Conv2d<Scalar>({.in = skip_channels, .out = inter, .kernel = 2, .stride = 2, .bias = false}, init);
  gate_proj = Conv2d<Scalar>(pointwise(gate_channels, inter), init);
  psi = Conv2d<Scalar>(pointwise(inter, 1), init);
}

template <typename Scalar>
Var<Scalar> AttentionGate<Scalar>::coefficients(const Var<Scalar>& g, const Var<Scalar>& x) {
  expect_channels(g, gate_channels_, "attention_gate (gating signal)");
  expect_channels(x, skip_channels_, "attention_gate (skip map)");
  const Shape gs = g.shape(), xs = x.shape();
  if (gs.n != xs.n || xs.h != 2 * gs.h || xs.w != 2 * gs.w) {
    std::ostringstream os;
    os << "gating signal " << gs << " is not one level coarser than skip map " << xs;
    throw Error(ErrorCode::kSpatialMismatch, os.str());
  }
  Var<Scalar> q = relu(add(skip_proj.forward(x), gate_proj.forward(g)));
  return resize_bilinear(sigmoid(psi.forward(q)), xs.h, xs.w);
}

template <typename Scalar>
Var<Scalar> AttentionGate<Scalar>::forward(const Var<Scalar>& g, const Var<Scalar>& x, Phase) {
  return scale_spatial(coefficients(g, x), x);
}

template <typename Scalar>
void AttentionGate<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  skip_proj.visit(v, join_name(prefix, "skip_proj"));
  gate_proj.visit(v, join_name(prefix, "gate_proj"));
  psi.visit(v, join_name(prefix, "psi"));
}

// --- ResidualUnit ----------------------------------------------------------

template <typename Scalar>
ResidualUnit<Scalar>::ResidualUnit(const BlockConfig& cfg, Initializer& init)
    : in_(cfg.in_channels), out_(cfg.out_channels), bn_(cfg.use_batch_norm) {
  expect_positive(in_, "in_channels");
  expect_positive(out_, "out_channels");
  if (cfg.stride != 1 && cfg.stride != 2) throw Error(ErrorCode::kInvalidConfig, "residual_unit stride must be 1 or 2");
  project_ = in_ != out_ || cfg.stride != 1;
  if (bn_) {
    bn1 = BatchNorm2d<Scalar>(in_);
    bn2 = BatchNorm2d<Scalar>(out_);
  }
  conv1 = Conv2d<Scalar>(same3x3(in_, out_, cfg.stride), init);
  conv2 = Conv2d<Scalar>(same3x3(out_, out_), init);
  if (project_) shortcut = ConvBnAct<Scalar>(pointwise(in_, out_, cfg.stride), bn_, false, init);
}

template <typename Scalar>
Var<Scalar> ResidualUnit<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  expect_channels(x, in_, "residual_unit");
  Var<Scalar> h = bn_ ? bn1.forward(x, phase) : x;
  h = conv1.forward(relu(h));
  if (bn_) h = bn2.forward(h, phase);
  h = conv2.forward(relu(h));
  return add(h, project_ ? shortcut.forward(x, phase) : x);
}

template <typename Scalar>
void ResidualUnit<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  if (bn_) bn1.visit(v, join_name(prefix, "bn1"));
  conv1.visit(v, join_name(prefix, "conv1"));
  if (bn_) bn2.visit(v, join_name(prefix, "bn2"));
  conv2.visit(v, join_name(prefix, "conv2"));
  if (project_) shortcut.visit(v, join_name(prefix, "shortcut"));
}

// --- SqueezeExcitation -----------------------------------------------------

template <typename Scalar>
SqueezeExcitation<Scalar>::SqueezeExcitation(Index channels, int ratio, Initializer& init) : channels_(channels) {
  expect_positive(channels, "channels");
  if (ratio < 1 || channels % ratio != 0) {
    throw Error(ErrorCode::kRatioError,
                "ratio " + std::to_string(ratio) + " does not divide " + std::to_string(channels) + " channels");
  }
  squeeze = Conv2d<Scalar>(pointwise(channels, channels / ratio), init);
  expand = Conv2d<Scalar>(pointwise(channels / ratio, channels), init);
}

template <typename Scalar>
Var<Scalar> SqueezeExcitation<Scalar>::excitation(const Var<Scalar>& x) {
  expect_channels(x, channels_, "squeeze_excitation");
  return sigmoid(expand.forward(relu(squeeze.forward(global_avg_pool(x)))));
}

template <typename Scalar>
Var<Scalar> SqueezeExcitation<Scalar>::forward(const Var<Scalar>& x, Phase) {
  return scale_channels(excitation(x), x);
}

template <typename Scalar>
void SqueezeExcitation<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  squeeze.visit(v, join_name(prefix, "squeeze"));
  expand.visit(v, join_name(prefix, "expand"));
}

// --- Aspp ------------------------------------------------------------------

template <typename Scalar>
Aspp<Scalar>::Aspp(Index in, Index out, const std::vector<int>& rates, bool batch_norm, Initializer& init)
    : in_(in), out_(out) {
  if (rates.empty()) throw Error(ErrorCode::kEmptyRates, "aspp needs at least one dilation rate");
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (rates[i] < 1 || (i > 0 && rates[i] <= rates[i - 1])) {
      throw Error(ErrorCode::kInvalidConfig, "aspp rates must be positive and strictly increasing");
    }
  }
  expect_positive(in, "in_channels");
  expect_positive(out, "out_channels");
  for (int r : rates) {
    branches.emplace_back(
        ConvOptions{.in = in, .out = out, .kernel = 3, .stride = 1, .dilation = r, .bias = true},
        batch_norm, false, init);
  }
  fuse = Conv2d<Scalar>(pointwise(out * static_cast<Index>(rates.size()), out), init);
}

template <typename Scalar>
Var<Scalar> Aspp<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  expect_channels(x, in_, "aspp");
  std::vector<Var<Scalar>> parts;
  parts.reserve(branches.size());
  for (auto& b : branches) parts.push_back(b.forward(x, phase));
  return fuse.forward(parts.size() == 1 ? parts.front() : concat_channels(parts));
}

template <typename Scalar>
void Aspp<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  for (std::size_t i = 0; i < branches.size(); ++i) {
    branches[i].visit(v, join_name(prefix, "branch" + std::to_string(i)));
  }
  fuse.visit(v, join_name(prefix, "fuse"));
}

// --- Recurrent units -------------------------------------------------------

template <typename Scalar>
RecurrentConv<Scalar>::RecurrentConv(Index in, Index out, int t, bool batch_norm, Initializer& init)
    : steps(t), bn_(batch_norm) {
  if (t < 1) throw Error(ErrorCode::kInvalidConfig, "recurrence steps must be >= 1");
  feed = Conv2d<Scalar>(same3x3(in, out), init);
  recur = Conv2d<Scalar>(same3x3(out, out), init);
  if (bn_) {
    for (int k = 0; k < t; ++k) bn.emplace_back(out);
  }
}

template <typename Scalar>
Var<Scalar> RecurrentConv<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  const Var<Scalar> fx = feed.forward(x);
  Var<Scalar> o = fx;
  for (int k = 1; k <= steps; ++k) {
    Var<Scalar> pre = add(fx, recur.forward(o));
    if (bn_) pre = bn[static_cast<std::size_t>(k - 1)].forward(pre, phase);
    o = relu(pre);
  }
  return o;
}

template <typename Scalar>
void RecurrentConv<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  feed.visit(v, join_name(prefix, "feed"));
  recur.visit(v, join_name(prefix, "recur"));
  for (std::size_t k = 0; k < bn.size(); ++k) bn[k].visit(v, join_name(prefix, "bn" + std::to_string(k + 1)));
}

template <typename Scalar>
Rrcu<Scalar>::Rrcu(const BlockConfig& cfg, Initializer& init)
    : rcl1(cfg.in_channels, cfg.out_channels, cfg.recurrence_steps, cfg.use_batch_norm, init),
      rcl2(cfg.out_channels, cfg.out_channels, cfg.recurrence_steps, cfg.use_batch_norm, init),
      in_(cfg.in_channels),
      out_(cfg.out_channels),
      project_(cfg.in_channels != cfg.out_channels) {
  if (cfg.stride != 1) throw Error(ErrorCode::kInvalidConfig, "rrcu supports stride 1 only");
  if (project_) shortcut = Conv2d<Scalar>(pointwise(in_, out_), init);
}

template <typename Scalar>
Var<Scalar> Rrcu<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  expect_channels(x, in_, "rrcu");
  Var<Scalar> y = rcl2.forward(rcl1.forward(x, phase), phase);
  return add(y, project_ ? shortcut.forward(x) : x);
}

template <typename Scalar>
void Rrcu<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  rcl1.visit(v, join_name(prefix, "rcl1"));
  rcl2.visit(v, join_name(prefix, "rcl2"));
  if (project_) shortcut.visit(v, join_name(prefix, "shortcut"));
}

// --- Stem ------------------------------------------------------------------

template <typename Scalar>
Stem<Scalar>::Stem(const BlockConfig& cfg, Initializer& init) : in_(cfg.in_channels), out_(cfg.out_channels) {
  expect_positive(in_, "in_channels");
  expect_positive(out_, "out_channels");
  if (cfg.stride != 1 && cfg.stride != 2) throw Error(ErrorCode::kInvalidConfig, "stem stride must be 1 or 2");
  project_ = in_ != out_ || cfg.stride != 1;
  conv1 = ConvBnAct<Scalar>(same3x3(in_, out_, cfg.stride), cfg.use_batch_norm, true, init);
  conv2 = Conv2d<Scalar>(same3x3(out_, out_), init);
  if (project_) {
    shortcut = ConvBnAct<Scalar>(pointwise(in_, out_, cfg.stride), cfg.use_batch_norm, false, init);
  }
}

template <typename Scalar>
Var<Scalar> Stem<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  expect_channels(x, in_, "stem");
  Var<Scalar> h = conv2.forward(conv1.forward(x, phase));
  return add(h, project_ ? shortcut.forward(x, phase) : x);
}

template <typename Scalar>
void Stem<Scalar>::visit(ParameterVisitor<Scalar>& v, const std::string& prefix) {
  conv1.visit(v, join_name(prefix, "conv1"));
  conv2.visit(v, join_name(prefix, "conv2"));
  if (project_) shortcut.visit(v, join_name(prefix, "shortcut"));
}

template <typename Scalar>
std::unique_ptr<Block<Scalar>> make_block(BlockKind kind, const BlockConfig& cfg, Initializer& init) {
  switch (kind) {
    case BlockKind::kDoubleConv: return std::make_unique<DoubleConv<Scalar>>(cfg, init);
    case BlockKind::kResidual: return std::make_unique<ResidualUnit<Scalar>>(cfg, init);
    case BlockKind::kRecurrentResidual: return std::make_unique<Rrcu<Scalar>>(cfg, init);
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown block kind");
}

#define TUMORSEG_INSTANTIATE(S)            \
  template class DoubleConv<S>;            \
  template class AttentionGate<S>;         \
  template class ResidualUnit<S>;          \
  template class SqueezeExcitation<S>;     \
  template class Aspp<S>;                  \
  template class RecurrentConv<S>;         \
  template class Rrcu<S>;                  \
  template class Stem<S>;                  \
  template std::unique_ptr<Block<S>> make_block(BlockKind, const BlockConfig&, Initializer&);

TUMORSEG_INSTANTIATE(float)
TUMORSEG_INSTANTIATE(double)

}  // namespace tumorseg
