#pragma once

#include "tumorseg/checkpoint.hpp"
#include "tumorseg/metrics.hpp"
#include "tumorseg/model_zoo.hpp"
#include "tumorseg/samples.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

namespace tumorseg {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  Index batch_size = 32;
  int epochs = 100;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  /// "val_miou" (default) or "val_loss".
  std::string checkpoint_metric = "val_miou";

  /// Throws InvalidConfig.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

// --- Adam ------------------------------------------------------------------

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

/// One bias-corrected Adam update of theta in place; t is the 1-based step.
/// Throws NonFiniteGradient before touching any state.
template <typename Scalar>
void adam_update(Tensor<Scalar>& theta, const Tensor<Scalar>& grad, Tensor<Scalar>& m, Tensor<Scalar>& v,
                 std::int64_t t, const AdamHyper& hp);

template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Var<Scalar>> params, const AdamHyper& hp);

  /// Applies the accumulated gradients of every parameter. Throws
  /// NonFiniteGradient, leaving parameters and moments untouched.
  void step();
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Var<Scalar>> params_;
  std::vector<Tensor<Scalar>> m_, v_;
  AdamHyper hp_;
  std::int64_t t_ = 0;
};

// --- History ---------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_miou = 0;
  double seconds = 0;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
};

/// 1-based argmax, earliest on ties. Throws EmptyHistory.
int select_checkpoint(const std::vector<double>& scores);
int select_checkpoint(const RunHistory& history);

/// Remembers the best score seen; update() is true only on strict improvement.
class BestCheckpointTracker {
 public:
  bool update(int epoch, double score);
  int best_epoch() const { return best_epoch_; }
  double best_score() const { return best_score_; }

 private:
  int best_epoch_ = 0;
  double best_score_ = 0;
};

void write_history_csv(const std::filesystem::path& path, const RunHistory& history);

/// Raised when a batch loss is not finite; carries the epochs completed.
class DivergedLoss : public Error {
 public:
  DivergedLoss(const std::string& message, RunHistory history)
      : Error(ErrorCode::kDivergedLoss, message), history_(std::move(history)) {}
  const RunHistory& history() const { return history_; }

 private:
  RunHistory history_;
};

// --- Evaluation ------------------------------------------------------------

/// Mean pixel BCE of probabilities against masks, clamped like the loss.
double mean_bce(const TensorF& probs, const TensorF& masks, double eps = 1e-7);

/// Thresholded evaluation of a model on a sample set. Throws EmptySplit.
MetricReport evaluate_split(ModelHandle<float>& model, const SampleSet& samples, double threshold = 0.5,
                            Aggregation aggregation = Aggregation::kMicro, Index batch_size = 8);

// --- Training --------------------------------------------------------------

/// Seeded shuffle of 0..n-1 cut into consecutive batches; the last batch
/// keeps the remainder.
std::vector<std::vector<Index>> epoch_batches(Index n, Index batch_size, std::mt19937_64& rng);

struct TrainHooks {
  /// Output directory for history.csv and best.ckpt; nothing is written
  /// when empty.
  std::filesystem::path run_dir;
  /// Called after each epoch; returning false ends the run early.
  std::function<bool(const EpochRecord&, ModelHandle<float>&)> on_epoch;
};

/// Mini-batch Adam on BCE with per-epoch validation and best-checkpointing.
/// Throws EmptySplit or DivergedLoss.
RunHistory train_run(ModelHandle<float>& model, const SampleSet& train, const SampleSet& val, const TrainConfig& cfg,
                     const TrainHooks& hooks = {});

}  // namespace tumorseg
