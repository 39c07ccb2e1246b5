#include "support/fixtures.hpp"
#include "tumorseg/training.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <limits>
#include <set>

using namespace tumorseg;
using namespace tumorseg::testing;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kInvalidConfig;
}

/// Scalar Adam written out step by step.
struct HandAdam {
  double m = 0, v = 0, theta = 0;
  int t = 0;
  double step(double g, double lr = 1e-3, double b1 = 0.9, double b2 = 0.999, double eps = 1e-7) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    theta -= lr * mhat / (std::sqrt(vhat) + eps);
    return theta;
  }
};

ArchConfig tiny_unet(Index size = 16) {
  ArchConfig c;
  c.family = Family::kUNet;
  c.depth = 2;
  c.base_width = 4;
  c.input_h = c.input_w = size;
  c.seed = 1;
  return c;
}

TrainConfig quick(int epochs, Index batch = 4) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch;
  t.learning_rate = 1e-2;
  t.seed = 3;
  return t;
}

}  // namespace

TEST(TrainConfig, DefaultsMatchReferenceHyperparameters) {
  const TrainConfig c;
  EXPECT_EQ(c.learning_rate, 0.001);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.batch_size, 32);
  EXPECT_EQ(c.epochs, 100);
  EXPECT_EQ(c.epsilon, 1e-7);
  EXPECT_EQ(c.threshold, 0.5);
  EXPECT_EQ(c.checkpoint_metric, "val_miou");
  const nlohmann::json j = c;
  EXPECT_EQ(j.at("optimizer"), "adam");
  EXPECT_EQ(j.at("loss"), "binary_cross_entropy");
  EXPECT_EQ(j.get<TrainConfig>(), c);
}

TEST(TrainConfig, ValidationRejectsBadValues) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return code_of([&] { c.validate(); });
  };
  EXPECT_EQ(bad([](TrainConfig& c) { c.learning_rate = 0; }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(bad([](TrainConfig& c) { c.beta1 = 1.0; }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(bad([](TrainConfig& c) { c.batch_size = 0; }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(bad([](TrainConfig& c) { c.epochs = 0; }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(bad([](TrainConfig& c) { c.checkpoint_metric = "f1"; }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(bad([](TrainConfig& c) { c.threshold = 1.0; }), ErrorCode::kBadThreshold);
}

TEST(AdamUpdate, FirstStepFromUnitGradient) {
  const AdamHyper hp;
  TensorD theta(Shape{1, 1, 1, 1}), m(theta.shape()), v(theta.shape());
  const TensorD g(theta.shape(), 1.0);
  adam_update(theta, g, m, v, 1, hp);
  HandAdam hand;
  EXPECT_DOUBLE_EQ(theta.data()[0], hand.step(1.0));
  EXPECT_NEAR(theta.data()[0], -1e-3 / (1 + 1e-7), 1e-15);
  EXPECT_NEAR(std::abs(theta.data()[0]), 1e-3, 1e-3 * 1e-6);
}

TEST(AdamUpdate, MatchesHandRecurrenceOverSeveralSteps) {
  const AdamHyper hp;
  TensorD theta(Shape{1, 1, 1, 1}), m(theta.shape()), v(theta.shape());
  HandAdam hand;
  const double grads[] = {1.0, -0.5, 2.0, 0.0, 3e-4, -7.0};
  for (int t = 1; t <= 6; ++t) {
    adam_update(theta, TensorD(theta.shape(), grads[t - 1]), m, v, t, hp);
    EXPECT_NEAR(theta.data()[0], hand.step(grads[t - 1]), 1e-15) << "step " << t;
  }
}

TEST(AdamUpdate, ZeroGradientIsFixedPoint) {
  std::mt19937_64 rng(5);
  TensorD theta = random_uniform<double>(Shape{2, 3, 4, 5}, rng, -2.0, 2.0);
  const TensorD before = theta;
  TensorD m(theta.shape()), v(theta.shape());
  for (int t = 1; t <= 5; ++t) adam_update(theta, TensorD(theta.shape()), m, v, t, AdamHyper{});
  EXPECT_TRUE(theta.vec() == before.vec());
}

TEST(AdamUpdate, SignSymmetry) {
  std::mt19937_64 rng(6);
  const TensorF g = random_uniform<float>(Shape{1, 2, 3, 3}, rng, -1.0f, 1.0f);
  TensorF neg = g;
  neg.vec() = -g.vec();
  TensorF a(g.shape()), ma(g.shape()), va(g.shape());
  TensorF b(g.shape()), mb(g.shape()), vb(g.shape());
  for (int t = 1; t <= 3; ++t) {
    adam_update(a, g, ma, va, t, AdamHyper{});
    adam_update(b, neg, mb, vb, t, AdamHyper{});
  }
  EXPECT_TRUE(a.vec() == (-b.vec()).eval());
}

TEST(AdamOptimizer, NonFiniteGradientLeavesStateUntouched) {
  Var<float> p(TensorF(Shape{1, 1, 2, 2}, 0.5f), true);
  Var<float> q(TensorF(Shape{1, 1, 1, 3}, -0.5f), true);
  Adam<float> opt({p, q}, AdamHyper{});
  p.node()->grad_buffer().vec().setConstant(1.0f);
  q.node()->grad_buffer().vec().setConstant(1.0f);
  q.node()->grad_buffer().data()[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(code_of([&] { opt.step(); }), ErrorCode::kNonFiniteGradient);
  EXPECT_EQ(opt.steps(), 0);
  EXPECT_TRUE((p.value().vec().array() == 0.5f).all());
  EXPECT_TRUE((q.value().vec().array() == -0.5f).all());

  q.node()->grad_buffer().data()[1] = std::numeric_limits<float>::infinity();
  EXPECT_EQ(code_of([&] { opt.step(); }), ErrorCode::kNonFiniteGradient);

  q.node()->grad_buffer().data()[1] = 1.0f;
  opt.step();
  EXPECT_EQ(opt.steps(), 1);
  HandAdam hand;
  hand.theta = 0.5;
  EXPECT_NEAR(p.value().data()[0], hand.step(1.0), 1e-7);
}

TEST(SelectCheckpoint, ArgmaxEarliestOnTies) {
  EXPECT_EQ(select_checkpoint(std::vector<double>{0.5, 0.7, 0.65}), 2);
  EXPECT_EQ(select_checkpoint(std::vector<double>{0.6, 0.6}), 1);
  EXPECT_EQ(select_checkpoint(std::vector<double>{0.3}), 1);
  EXPECT_EQ(code_of([] { select_checkpoint(std::vector<double>{}); }), ErrorCode::kEmptyHistory);
  EXPECT_EQ(code_of([] { select_checkpoint(RunHistory{}); }), ErrorCode::kEmptyHistory);
}

TEST(SelectCheckpoint, TrackerAgreesWithArgmax) {
  BestCheckpointTracker t;
  EXPECT_TRUE(t.update(1, 0.5));
  EXPECT_TRUE(t.update(2, 0.7));
  EXPECT_FALSE(t.update(3, 0.65));
  EXPECT_EQ(t.best_epoch(), 2);

  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> q(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> scores(static_cast<std::size_t>(1 + trial % 9));
    for (auto& s : scores) s = q(rng) / 5.0;
    BestCheckpointTracker tr;
    for (std::size_t e = 0; e < scores.size(); ++e) tr.update(static_cast<int>(e) + 1, scores[e]);
    EXPECT_EQ(tr.best_epoch(), select_checkpoint(scores));
  }
}

TEST(EpochBatches, EverySampleOnceAndRemainderKept) {
  std::mt19937_64 rng(8);
  for (Index n : {1, 7, 8, 9, 33}) {
    for (Index b : {1, 3, 4, 32}) {
      const auto batches = epoch_batches(n, b, rng);
      EXPECT_EQ(static_cast<Index>(batches.size()), (n + b - 1) / b);
      std::multiset<Index> seen;
      for (std::size_t k = 0; k < batches.size(); ++k) {
        const Index want = k + 1 < batches.size() ? b : n - b * static_cast<Index>(batches.size() - 1);
        EXPECT_EQ(static_cast<Index>(batches[k].size()), want);
        seen.insert(batches[k].begin(), batches[k].end());
      }
      EXPECT_EQ(static_cast<Index>(seen.size()), n);
      EXPECT_EQ(static_cast<Index>(std::set<Index>(seen.begin(), seen.end()).size()), n);
    }
  }
  std::mt19937_64 a(9), b(9);
  EXPECT_EQ(epoch_batches(20, 6, a), epoch_batches(20, 6, b));
}

TEST(MeanBce, MatchesFormula) {
  TensorF p(Shape{1, 1, 1, 4});
  TensorF y(p.shape());
  p.vec() << 0.9f, 0.2f, 0.0f, 1.0f;
  y.vec() << 1.0f, 0.0f, 0.0f, 1.0f;
  const double want = -(std::log(static_cast<double>(0.9f)) + std::log(1.0 - static_cast<double>(0.2f)) +
                        2 * std::log(1.0 - 1e-7)) / 4.0;
  EXPECT_NEAR(mean_bce(p, y), want, 1e-12);
}

TEST(TrainRun, LossDecreasesWhenOverfittingOneSample) {
  const SampleSet one = make_ellipse_samples(1, 16, 16, 4);
  auto model = build_model<float>(tiny_unet());
  const RunHistory h = train_run(model, one, one, quick(30, 1));
  ASSERT_EQ(h.epochs.size(), 30u);
  EXPECT_LT(h.epochs.back().train_loss, 0.5 * h.epochs.front().train_loss);
}

TEST(TrainRun, DeterministicForSameSeed) {
  const SampleSet train = make_ellipse_samples(6, 16, 16, 1), val = make_ellipse_samples(2, 16, 16, 2);
  auto a = build_model<float>(tiny_unet());
  auto b = build_model<float>(tiny_unet());
  const RunHistory ha = train_run(a, train, val, quick(3, 4));
  const RunHistory hb = train_run(b, train, val, quick(3, 4));
  ASSERT_EQ(ha.epochs.size(), hb.epochs.size());
  for (std::size_t i = 0; i < ha.epochs.size(); ++i) {
    EXPECT_EQ(ha.epochs[i].train_loss, hb.epochs[i].train_loss);
    EXPECT_EQ(ha.epochs[i].val_loss, hb.epochs[i].val_loss);
    EXPECT_EQ(ha.epochs[i].val_miou, hb.epochs[i].val_miou);
  }
  EXPECT_TRUE(a.predict(val.images).vec() == b.predict(val.images).vec());
}

TEST(TrainRun, WritesHistoryAndReloadableBestCheckpoint) {
  TempDir dir;
  const SampleSet train = make_ellipse_samples(7, 16, 16, 1), val = make_ellipse_samples(3, 16, 16, 2);
  auto model = build_model<float>(tiny_unet());
  const RunHistory h = train_run(model, train, val, quick(4, 3), {.run_dir = dir.path()});
  EXPECT_EQ(h.best_epoch, select_checkpoint(h));

  std::ifstream is(dir / "history.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "epoch,train_loss,val_loss,val_miou,seconds");
  int rows = 0;
  while (std::getline(is, line)) rows += line.empty() ? 0 : 1;
  EXPECT_EQ(rows, 4);

  const CheckpointMeta meta = read_checkpoint_meta(dir / "best.ckpt");
  EXPECT_EQ(meta.epoch, h.best_epoch);
  auto best = load_model<float>(dir / "best.ckpt");
  const MetricReport r = evaluate_split(best, val, 0.5);
  EXPECT_NEAR(r.values.mean_iou, meta.val_miou, 1e-6);
  EXPECT_NEAR(r.values.mean_iou, h.epochs[static_cast<std::size_t>(h.best_epoch - 1)].val_miou, 1e-6);
}

TEST(TrainRun, EarlyStopHook) {
  const SampleSet s = make_ellipse_samples(2, 16, 16, 1);
  auto model = build_model<float>(tiny_unet());
  int calls = 0;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& e, ModelHandle<float>&) {
    ++calls;
    return e.epoch < 2;
  };
  EXPECT_EQ(train_run(model, s, s, quick(10, 2), hooks).epochs.size(), 2u);
  EXPECT_EQ(calls, 2);
}

TEST(TrainRun, NonFiniteInputDiverges) {
  SampleSet train = make_ellipse_samples(4, 16, 16, 1);
  train.images.data()[5] = std::numeric_limits<float>::quiet_NaN();
  const SampleSet val = make_ellipse_samples(2, 16, 16, 2);
  auto model = build_model<float>(tiny_unet());
  try {
    train_run(model, train, val, quick(2, 4));
    FAIL() << "expected divergence";
  } catch (const DivergedLoss& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDivergedLoss);
    EXPECT_TRUE(e.history().epochs.empty());
  }
}

TEST(TrainRun, EmptySplitsRejected) {
  const SampleSet s = make_ellipse_samples(2, 16, 16, 1);
  SampleSet empty;
  empty.images = TensorF(Shape{0, 1, 16, 16});
  empty.masks = TensorF(Shape{0, 1, 16, 16});
  auto model = build_model<float>(tiny_unet());
  EXPECT_EQ(code_of([&] { train_run(model, empty, s, quick(1)); }), ErrorCode::kEmptySplit);
  EXPECT_EQ(code_of([&] { train_run(model, s, empty, quick(1)); }), ErrorCode::kEmptySplit);
  EXPECT_EQ(code_of([&] { evaluate_split(model, empty); }), ErrorCode::kEmptySplit);
}

TEST(Evaluate, LowerThresholdNeverLowersRecall) {
  const SampleSet s = make_ellipse_samples(4, 16, 16, 9);
  auto model = build_model<float>(tiny_unet());
  train_run(model, s, s, quick(5, 2));
  double prev = 2.0;
  for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const double r = evaluate_split(model, s, t).values.recall;
    EXPECT_LE(r, prev);
    prev = r;
  }
}
