#include "support/fixtures.hpp"
#include "tumorseg/blocks.hpp"

#include <gtest/gtest.h>

using namespace tumorseg;
using namespace tumorseg::testing;

namespace {

constexpr double kTol = 1e-4;

Var<double> input(const Shape& s, std::uint64_t seed, bool grad = true) {
  std::mt19937_64 rng(seed);
  return Var<double>(random_normal<double>(s, rng), grad);
}

void zero(Conv2d<double>& c) {
  c.weight.mutable_value().set_zero();
  if (c.bias.defined()) c.bias.mutable_value().set_zero();
}

template <typename M>
std::vector<Var<double>> with_params(M& m, std::vector<Var<double>> leaves) {
  for (auto& p : parameters(m)) leaves.push_back(p);
  return leaves;
}

BlockConfig config(Index in, Index out, bool bn = true, int stride = 1) {
  BlockConfig c;
  c.in_channels = in;
  c.out_channels = out;
  c.use_batch_norm = bn;
  c.stride = stride;
  return c;
}

template <typename Fn>
void expect_error(ErrorCode code, Fn&& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

// --- DoubleConv ------------------------------------------------------------

TEST(DoubleConv, ShapeContract) {
  Initializer init(1);
  DoubleConv<double> b(config(1, 16, false), init);
  EXPECT_EQ(b.forward(input({1, 1, 64, 64}, 1, false), Phase::kTrain).shape(), (Shape{1, 16, 64, 64}));
}

TEST(DoubleConv, ZeroWeightsGiveZeros) {
  Initializer init(2);
  DoubleConv<double> b(config(3, 4, false), init);
  zero(b.first.conv);
  zero(b.second.conv);
  EXPECT_EQ(b.forward(input({2, 3, 6, 6}, 2, false), Phase::kEval).value().vec().cwiseAbs().maxCoeff(), 0.0);
}

TEST(DoubleConv, GradientMatchesFiniteDifferences) {
  Initializer init(3);
  DoubleConv<double> b(config(1, 3, true), init);
  auto x = input({1, 1, 6, 6}, 3);
  const auto r = check_gradients(with_params(b, {x}), [&] { return random_projection(b.forward(x, Phase::kTrain), 4); },
                                 5, 5);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(DoubleConv, ChannelMismatch) {
  Initializer init(4);
  DoubleConv<double> b(config(2, 4), init);
  expect_error(ErrorCode::kChannelMismatch, [&] { b.forward(input({1, 3, 4, 4}, 4, false), Phase::kEval); });
}

// --- AttentionGate ---------------------------------------------------------

TEST(AttentionGate, ShapeContract) {
  Initializer init(5);
  AttentionGate<double> gate(32, 16, 0, init);
  const auto y = gate.forward(input({1, 32, 8, 8}, 5, false), input({1, 16, 16, 16}, 6, false), Phase::kEval);
  EXPECT_EQ(y.shape(), (Shape{1, 16, 16, 16}));
}

TEST(AttentionGate, ZeroWeightsHalveTheSkipMap) {
  Initializer init(6);
  AttentionGate<double> gate(8, 4, 0, init);
  zero(gate.skip_proj);
  zero(gate.gate_proj);
  zero(gate.psi);
  const auto x = input({2, 4, 8, 8}, 7, false);
  const auto y = gate.forward(input({2, 8, 4, 4}, 8, false), x, Phase::kEval);
  for (Index i = 0; i < x.value().size(); ++i) ASSERT_EQ(y.value().data()[i], 0.5 * x.value().data()[i]);
}

TEST(AttentionGate, CoefficientsStayInUnitInterval) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Initializer init(seed);
    AttentionGate<double> gate(6, 4, 0, init);
    randomize_parameters(gate, seed + 100, 3.0);
    const auto a = gate.coefficients(input({1, 6, 5, 3}, seed, false), input({1, 4, 10, 6}, seed + 1, false));
    EXPECT_EQ(a.shape(), (Shape{1, 1, 10, 6}));
    EXPECT_GE(a.value().vec().minCoeff(), 0.0);
    EXPECT_LE(a.value().vec().maxCoeff(), 1.0);
  }
}

TEST(AttentionGate, GradientMatchesFiniteDifferences) {
  Initializer init(7);
  AttentionGate<double> gate(4, 3, 0, init);
  auto g = input({1, 4, 3, 3}, 9), x = input({1, 3, 6, 6}, 10);
  const auto r = check_gradients(with_params(gate, {g, x}), [&] {
    return weighted_sum(gate.forward(g, x, Phase::kTrain), TensorD(x.shape(), 1.0));
  }, 5, 6);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(AttentionGate, SpatialMismatch) {
  Initializer init(8);
  AttentionGate<double> gate(4, 3, 0, init);
  expect_error(ErrorCode::kSpatialMismatch,
               [&] { gate.forward(input({1, 4, 4, 4}, 1, false), input({1, 3, 6, 6}, 2, false), Phase::kEval); });
  expect_error(ErrorCode::kSpatialMismatch,
               [&] { gate.forward(input({1, 4, 3, 3}, 1, false), input({2, 3, 6, 6}, 2, false), Phase::kEval); });
}

// --- ResidualUnit ----------------------------------------------------------

TEST(ResidualUnit, ZeroResidualBranchIsIdentity) {
  Initializer init(9);
  ResidualUnit<double> b(config(5, 5, false), init);
  zero(b.conv1);
  zero(b.conv2);
  ASSERT_FALSE(b.projects());
  const auto x = input({2, 5, 6, 6}, 11, false);
  EXPECT_TRUE(b.forward(x, Phase::kTrain).value().vec() == x.value().vec());
}

TEST(ResidualUnit, StrideTwoHalvesAndWidens) {
  Initializer init(10);
  ResidualUnit<double> b(config(16, 32, true, 2), init);
  EXPECT_EQ(b.forward(input({1, 16, 32, 32}, 12, false), Phase::kTrain).shape(), (Shape{1, 32, 16, 16}));
}

TEST(ResidualUnit, GradientMatchesFiniteDifferences) {
  for (bool bn : {false, true}) {
    for (int stride : {1, 2}) {
      Initializer init(11);
      ResidualUnit<double> b(config(2, 3, bn, stride), init);
      auto x = input({2, 2, 6, 6}, 13);
      const auto r = check_gradients(with_params(b, {x}),
                                     [&] { return random_projection(b.forward(x, Phase::kTrain), 4); }, 5, 7);
      EXPECT_LT(r.max_rel_error, kTol) << "bn " << bn << " stride " << stride;
    }
  }
}

TEST(ResidualUnit, ChannelMismatch) {
  Initializer init(12);
  ResidualUnit<double> b(config(4, 4), init);
  expect_error(ErrorCode::kChannelMismatch, [&] { b.forward(input({1, 2, 4, 4}, 1, false), Phase::kEval); });
}

// --- SqueezeExcitation -----------------------------------------------------

TEST(SqueezeExcitation, SaturatedExcitationIsIdentity) {
  Initializer init(13);
  SqueezeExcitation<double> se(8, 4, init);
  zero(se.squeeze);
  zero(se.expand);
  se.expand.bias.mutable_value().vec().setConstant(800.0);
  const auto x = input({2, 8, 5, 5}, 14, false);
  EXPECT_TRUE(se.forward(x, Phase::kEval).value().vec() == x.value().vec());
}

TEST(SqueezeExcitation, BottleneckWidthAndShape) {
  Initializer init(14);
  SqueezeExcitation<double> se(16, 4, init);
  EXPECT_EQ(se.bottleneck(), 4);
  EXPECT_EQ(se.forward(input({1, 16, 8, 8}, 15, false), Phase::kEval).shape(), (Shape{1, 16, 8, 8}));
}

TEST(SqueezeExcitation, PooledPathMatchesHandComputedMeans) {
  Initializer init(15);
  SqueezeExcitation<double> se(4, 2, init);
  const auto x = input({1, 4, 2, 2}, 16, false);
  const auto s = se.excitation(x).value();
  const auto& w1 = se.squeeze.weight.value();
  const auto& b1 = se.squeeze.bias.value();
  const auto& w2 = se.expand.weight.value();
  const auto& b2 = se.expand.bias.value();
  double mean[4];
  for (Index c = 0; c < 4; ++c) {
    mean[c] = (x.value()(0, c, 0, 0) + x.value()(0, c, 0, 1) + x.value()(0, c, 1, 0) + x.value()(0, c, 1, 1)) / 4.0;
  }
  for (Index o = 0; o < 4; ++o) {
    double z = b2(0, o, 0, 0);
    for (Index k = 0; k < 2; ++k) {
      double h = b1(0, k, 0, 0);
      for (Index c = 0; c < 4; ++c) h += w1(k, c, 0, 0) * mean[c];
      z += w2(o, k, 0, 0) * std::max(h, 0.0);
    }
    EXPECT_NEAR(s(0, o, 0, 0), 1.0 / (1.0 + std::exp(-z)), 1e-14);
  }
}

TEST(SqueezeExcitation, GradientMatchesFiniteDifferences) {
  Initializer init(16);
  SqueezeExcitation<double> se(4, 2, init);
  randomize_parameters(se, 17, 0.8);
  auto x = input({2, 4, 3, 3}, 18);
  const auto r = check_gradients(with_params(se, {x}),
                                 [&] { return random_projection(se.forward(x, Phase::kTrain), 4); }, 5, 8);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(SqueezeExcitation, RatioMustDivideChannels) {
  Initializer init(17);
  expect_error(ErrorCode::kRatioError, [&] { SqueezeExcitation<double>(6, 4, init); });
}

// --- Aspp ------------------------------------------------------------------

TEST(Aspp, ShapeContract) {
  Initializer init(18);
  Aspp<double> a(32, 24, {1, 2, 4}, true, init);
  EXPECT_EQ(a.forward(input({1, 32, 16, 16}, 19, false), Phase::kTrain).shape(), (Shape{1, 24, 16, 16}));
}

TEST(Aspp, SingleRateEqualsConvThenFuse) {
  Initializer init(19);
  Aspp<double> a(3, 5, {1}, false, init);
  const auto x = input({2, 3, 6, 6}, 20, false);
  const auto direct = conv2d(conv2d(x, a.branches[0].conv.weight, a.branches[0].conv.bias, {1, 1, 1}),
                             a.fuse.weight, a.fuse.bias, {1, 0, 1});
  EXPECT_TRUE(a.forward(x, Phase::kEval).value().vec().isApprox(direct.value().vec(), 1e-14));
}

TEST(Aspp, RateFourBranchSpansNinePixels) {
  Initializer init(20);
  Aspp<double> a(1, 1, {4}, false, init);
  a.branches[0].conv.weight.mutable_value().vec().setOnes();
  a.branches[0].conv.bias.mutable_value().set_zero();
  a.fuse.weight.mutable_value().vec().setOnes();
  a.fuse.bias.mutable_value().set_zero();
  TensorD impulse(Shape{1, 1, 21, 21});
  impulse(0, 0, 10, 10) = 1.0;
  const TensorD y = a.forward(Var<double>(impulse), Phase::kEval).value();
  Index min_x = 21, max_x = -1, min_y = 21, max_y = -1, nonzero = 0;
  for (Index r = 0; r < 21; ++r) {
    for (Index c = 0; c < 21; ++c) {
      if (y(0, 0, r, c) == 0.0) continue;
      ++nonzero;
      min_x = std::min(min_x, c);
      max_x = std::max(max_x, c);
      min_y = std::min(min_y, r);
      max_y = std::max(max_y, r);
    }
  }
  EXPECT_EQ(nonzero, 9);
  EXPECT_EQ(max_x - min_x + 1, 9);
  EXPECT_EQ(max_y - min_y + 1, 9);
}

TEST(Aspp, GradientMatchesFiniteDifferences) {
  Initializer init(21);
  Aspp<double> a(2, 3, {1, 2}, true, init);
  auto x = input({2, 2, 6, 6}, 22);
  const auto r = check_gradients(with_params(a, {x}), [&] { return random_projection(a.forward(x, Phase::kTrain), 4); },
                                 5, 9);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Aspp, RateValidation) {
  Initializer init(22);
  expect_error(ErrorCode::kEmptyRates, [&] { Aspp<double>(2, 2, {}, true, init); });
  expect_error(ErrorCode::kInvalidConfig, [&] { Aspp<double>(2, 2, {2, 2}, true, init); });
  expect_error(ErrorCode::kInvalidConfig, [&] { Aspp<double>(2, 2, {0, 1}, true, init); });
}

// --- Rrcu ------------------------------------------------------------------

TEST(Rrcu, ZeroRecurrentWeightsMakeOutputInvariantInSteps) {
  const auto x = input({2, 3, 8, 8}, 23, false);
  std::vector<TensorD> outputs;
  for (int t : {1, 2, 3}) {
    Initializer init(24);
    BlockConfig cfg = config(3, 5);
    cfg.recurrence_steps = t;
    Rrcu<double> b(cfg, init);
    zero(b.rcl1.recur);
    zero(b.rcl2.recur);
    outputs.push_back(b.forward(x, Phase::kTrain).value());
  }
  EXPECT_TRUE(outputs[0].vec() == outputs[1].vec());
  EXPECT_TRUE(outputs[0].vec() == outputs[2].vec());
}

TEST(Rrcu, ProjectionShortcutShape) {
  Initializer init(25);
  Rrcu<double> b(config(8, 16), init);
  EXPECT_EQ(b.forward(input({1, 8, 16, 16}, 26, false), Phase::kTrain).shape(), (Shape{1, 16, 16, 16}));
}

TEST(Rrcu, GradientThroughTwoUnrolledSteps) {
  for (bool bn : {false, true}) {
    Initializer init(26);
    BlockConfig cfg = config(2, 3, bn);
    cfg.recurrence_steps = 2;
    Rrcu<double> b(cfg, init);
    auto x = input({2, 2, 5, 5}, 27);
    const auto r = check_gradients(with_params(b, {x}),
                                   [&] { return random_projection(b.forward(x, Phase::kTrain), 4); }, 5, 10);
    EXPECT_LT(r.max_rel_error, kTol) << "bn " << bn;
  }
}

TEST(Rrcu, EachStepOwnsItsBatchNorm) {
  Initializer init(27);
  BlockConfig cfg = config(2, 2);
  cfg.recurrence_steps = 3;
  Rrcu<double> b(cfg, init);
  EXPECT_EQ(b.rcl1.bn.size(), 3u);
  EXPECT_NE(b.rcl1.bn[0].gamma.node(), b.rcl1.bn[1].gamma.node());
}

TEST(Rrcu, StepsMustBePositive) {
  Initializer init(28);
  BlockConfig cfg = config(2, 2);
  cfg.recurrence_steps = 0;
  expect_error(ErrorCode::kInvalidConfig, [&] { Rrcu<double>(cfg, init); });
}

// --- Stem ------------------------------------------------------------------

TEST(Stem, StrideContract) {
  Initializer init(29);
  Stem<double> s2(config(1, 16, true, 2), init);
  Stem<double> s1(config(1, 16, true, 1), init);
  const auto x = input({1, 1, 64, 64}, 28, false);
  EXPECT_EQ(s2.forward(x, Phase::kTrain).shape(), (Shape{1, 16, 32, 32}));
  EXPECT_EQ(s1.forward(x, Phase::kTrain).shape(), (Shape{1, 16, 64, 64}));
}

TEST(Stem, ZeroConvPathLeavesShortcut) {
  Initializer init(30);
  Stem<double> s(config(4, 4, true, 1), init);
  zero(s.conv1.conv);
  zero(s.conv2);
  const auto x = input({2, 4, 6, 6}, 29, false);
  EXPECT_TRUE(s.forward(x, Phase::kTrain).value().vec() == x.value().vec());
}

TEST(Stem, GradientMatchesFiniteDifferences) {
  Initializer init(31);
  Stem<double> s(config(1, 3, true, 2), init);
  auto x = input({2, 1, 6, 6}, 30);
  const auto r = check_gradients(with_params(s, {x}), [&] { return random_projection(s.forward(x, Phase::kTrain), 4); },
                                 5, 11);
  EXPECT_LT(r.max_rel_error, kTol);
}

// --- Properties ------------------------------------------------------------

TEST(BlockProperties, RandomShapesKeepContracts) {
  std::mt19937_64 rng(32);
  std::uniform_int_distribution<Index> ch(1, 6), side(1, 5), batch(1, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const Index in = ch(rng), out = ch(rng), n = batch(rng), h = 2 * side(rng), w = 2 * side(rng);
    const auto x = input({n, in, h, w}, rng(), false);
    for (auto kind : {BlockKind::kDoubleConv, BlockKind::kResidual, BlockKind::kRecurrentResidual}) {
      Initializer init(rng());
      auto b = make_block<double>(kind, config(in, out), init);
      const auto y = b->forward(x, Phase::kTrain);
      ASSERT_EQ(y.shape(), (Shape{n, out, h, w}));
      ASSERT_TRUE(y.value().all_finite());
    }
    Initializer init(rng());
    ResidualUnit<double> down(config(in, out, true, 2), init);
    ASSERT_EQ(down.forward(x, Phase::kTrain).shape(), (Shape{n, out, h / 2, w / 2}));
    Stem<double> stem(config(in, out, true, 2), init);
    ASSERT_EQ(stem.forward(x, Phase::kTrain).shape(), (Shape{n, out, h / 2, w / 2}));
    Aspp<double> aspp(in, out, {1, 2}, true, init);
    ASSERT_EQ(aspp.forward(x, Phase::kTrain).shape(), (Shape{n, out, h, w}));
    AttentionGate<double> gate(out, in, 0, init);
    ASSERT_EQ(gate.forward(input({n, out, h / 2, w / 2}, rng(), false), x, Phase::kTrain).shape(), x.shape());
  }
}

TEST(BlockProperties, FiniteForBoundedWeights) {
  std::mt19937_64 rng(33);
  const auto x = input({2, 4, 8, 8}, 34, false);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  auto fill = [&](auto& module) {
    struct Fill : ParameterVisitor<double> {
      std::function<double()> draw;
      void parameter(const std::string&, Var<double>& p) override {
        for (Index i = 0; i < p.value().size(); ++i) p.mutable_value().data()[i] = draw();
      }
      void buffer(const std::string&, TensorD&) override {}
    } f;
    f.draw = [&] { return u(rng); };
    module.visit(f, "");
  };
  Initializer init(35);
  DoubleConv<double> dc(config(4, 4), init);
  ResidualUnit<double> ru(config(4, 4), init);
  Rrcu<double> rr(config(4, 4), init);
  SqueezeExcitation<double> se(4, 2, init);
  Aspp<double> as(4, 4, {1, 2, 4}, true, init);
  Stem<double> st(config(4, 4, true, 2), init);
  AttentionGate<double> ag(4, 4, 0, init);
  fill(dc);
  fill(ru);
  fill(rr);
  fill(se);
  fill(as);
  fill(st);
  fill(ag);
  for (Phase phase : {Phase::kTrain, Phase::kEval}) {
    EXPECT_TRUE(dc.forward(x, phase).value().all_finite());
    EXPECT_TRUE(ru.forward(x, phase).value().all_finite());
    EXPECT_TRUE(rr.forward(x, phase).value().all_finite());
    EXPECT_TRUE(se.forward(x, phase).value().all_finite());
    EXPECT_TRUE(as.forward(x, phase).value().all_finite());
    EXPECT_TRUE(st.forward(x, phase).value().all_finite());
    EXPECT_TRUE(ag.forward(input({2, 4, 4, 4}, 36, false), x, phase).value().all_finite());
  }
}
