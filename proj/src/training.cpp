#include "tumorseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace tumorseg {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw Error(ErrorCode::kInvalidConfig, "learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw Error(ErrorCode::kInvalidConfig, "beta1 and beta2 must lie in [0, 1)");
  }
  if (!(epsilon > 0)) throw Error(ErrorCode::kInvalidConfig, "epsilon must be positive");
  if (batch_size < 1) throw Error(ErrorCode::kInvalidConfig, "batch_size must be >= 1");
  if (epochs < 1) throw Error(ErrorCode::kInvalidConfig, "epochs must be >= 1");
  check_threshold(threshold);
  if (checkpoint_metric != "val_miou" && checkpoint_metric != "val_loss") {
    throw Error(ErrorCode::kInvalidConfig, "checkpoint_metric must be val_miou or val_loss");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = nlohmann::json{{"learning_rate", cfg.learning_rate}, {"beta1", cfg.beta1},
                     {"beta2", cfg.beta2},                 {"epsilon", cfg.epsilon},
                     {"optimizer", "adam"},                {"loss", "binary_cross_entropy"},
                     {"batch_size", cfg.batch_size},       {"epochs", cfg.epochs},
                     {"seed", cfg.seed},                   {"threshold", cfg.threshold},
                     {"checkpoint_metric", cfg.checkpoint_metric}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  const TrainConfig d;
  try {
    cfg.learning_rate = j.value("learning_rate", d.learning_rate);
    cfg.beta1 = j.value("beta1", d.beta1);
    cfg.beta2 = j.value("beta2", d.beta2);
    cfg.epsilon = j.value("epsilon", d.epsilon);
    cfg.batch_size = j.value("batch_size", d.batch_size);
    cfg.epochs = j.value("epochs", d.epochs);
    cfg.seed = j.value("seed", d.seed);
    cfg.threshold = j.value("threshold", d.threshold);
    cfg.checkpoint_metric = j.value("checkpoint_metric", d.checkpoint_metric);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("malformed train config: ") + e.what());
  }
}

template <typename Scalar>
void adam_update(Tensor<Scalar>& theta, const Tensor<Scalar>& grad, Tensor<Scalar>& m, Tensor<Scalar>& v,
                 std::int64_t t, const AdamHyper& hp) {
  if (!grad.all_finite()) throw Error(ErrorCode::kNonFiniteGradient, "gradient contains NaN or Inf");
  const auto b1 = static_cast<Scalar>(hp.beta1);
  const auto b2 = static_cast<Scalar>(hp.beta2);
  m.vec() = b1 * m.vec() + (Scalar(1) - b1) * grad.vec();
  v.vec() = b2 * v.vec() + (Scalar(1) - b2) * grad.vec().cwiseAbs2();
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(hp.beta1, static_cast<double>(t)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(hp.beta2, static_cast<double>(t)));
  const auto lr = static_cast<Scalar>(hp.learning_rate);
  const auto eps = static_cast<Scalar>(hp.epsilon);
  theta.vec().array() -= lr * (m.vec().array() / c1) / ((v.vec().array() / c2).sqrt() + eps);
}

template <typename Scalar>
Adam<Scalar>::Adam(std::vector<Var<Scalar>> params, const AdamHyper& hp) : params_(std::move(params)), hp_(hp) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

template <typename Scalar>
void Adam<Scalar>::step() {
  for (const auto& p : params_) {
    if (!p.grad().all_finite()) throw Error(ErrorCode::kNonFiniteGradient, "gradient contains NaN or Inf");
  }
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    adam_update(params_[i].mutable_value(), params_[i].grad(), m_[i], v_[i], t_, hp_);
  }
}

int select_checkpoint(const std::vector<double>& scores) {
  if (scores.empty()) throw Error(ErrorCode::kEmptyHistory, "no epochs recorded");
  return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin()) + 1;
}

int select_checkpoint(const RunHistory& history) {
  std::vector<double> scores;
  for (const auto& e : history.epochs) scores.push_back(e.val_miou);
  return select_checkpoint(scores);
}

bool BestCheckpointTracker::update(int epoch, double score) {
  if (best_epoch_ != 0 && !(score > best_score_)) return false;
  best_epoch_ = epoch;
  best_score_ = score;
  return true;
}

void write_history_csv(const fs::path& path, const RunHistory& history) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  os << "epoch,train_loss,val_loss,val_miou,seconds\n" << std::setprecision(10);
  for (const auto& e : history.epochs) {
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_miou << ',' << e.seconds << '\n';
  }
  if (!os.flush()) throw Error(ErrorCode::kIoFailure, "failed writing " + path.string());
}

double mean_bce(const TensorF& probs, const TensorF& masks, double eps) {
  if (!(probs.shape() == masks.shape())) throw Error(ErrorCode::kShapeMismatch, "predictions and masks differ");
  double sum = 0;
  for (Index i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probs.data()[i]), eps, 1.0 - eps);
    const double y = masks.data()[i];
    sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return probs.size() ? sum / static_cast<double>(probs.size()) : 0.0;
}

MetricReport evaluate_split(ModelHandle<float>& model, const SampleSet& samples, double threshold,
                            Aggregation aggregation, Index batch_size) {
  if (samples.size() == 0) throw Error(ErrorCode::kEmptySplit, "split '" + samples.split + "' is empty");
  const TensorF probs = model.predict(samples.images, batch_size);
  MetricReport r = aggregate(per_image_counts(probs, samples.masks, threshold), aggregation);
  r.model = display_name(model.config());
  r.split = samples.split;
  r.threshold = threshold;
  return r;
}

std::vector<std::vector<Index>> epoch_batches(Index n, Index batch_size, std::mt19937_64& rng) {
  if (batch_size < 1) throw Error(ErrorCode::kInvalidConfig, "batch_size must be >= 1");
  std::vector<Index> order(static_cast<std::size_t>(std::max<Index>(n, 0)));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Index>> batches;
  for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(first),
                         order.begin() + static_cast<std::ptrdiff_t>(last));
  }
  return batches;
}

RunHistory train_run(ModelHandle<float>& model, const SampleSet& train, const SampleSet& val, const TrainConfig& cfg,
                     const TrainHooks& hooks) {
  cfg.validate();
  if (train.size() == 0) throw Error(ErrorCode::kEmptySplit, "training split is empty");
  if (val.size() == 0) throw Error(ErrorCode::kEmptySplit, "validation split is empty");
  if (!hooks.run_dir.empty()) fs::create_directories(hooks.run_dir);

  Adam<float> opt(model.parameters(), AdamHyper{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon});
  std::mt19937_64 rng(cfg.seed);

  RunHistory history;
  BestCheckpointTracker best;
  const bool by_loss = cfg.checkpoint_metric == "val_loss";
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0;
    for (const auto& idx : epoch_batches(train.size(), cfg.batch_size, rng)) {
      zero_grad(model.network());
      Var<float> pred = model.forward(Var<float>(gather_batch(train.images, idx)), Phase::kTrain);
      Var<float> loss = bce_loss(pred, gather_batch(train.masks, idx));
      const double value = loss.value().data()[0];
      if (!std::isfinite(value)) {
        throw DivergedLoss("non-finite training loss in epoch " + std::to_string(epoch), history);
      }
      backward(loss);
      opt.step();
      loss_sum += value * static_cast<double>(idx.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    const TensorF probs = model.predict(val.images);
    rec.val_loss = mean_bce(probs, val.masks);
    rec.val_miou = aggregate(per_image_counts(probs, val.masks, cfg.threshold), Aggregation::kMicro).values.mean_iou;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.epochs.push_back(rec);

    if (best.update(epoch, by_loss ? -rec.val_loss : rec.val_miou)) {
      history.best_epoch = epoch;
      if (!hooks.run_dir.empty()) {
        CheckpointMeta meta;
        meta.arch = model.config();
        meta.epoch = epoch;
        meta.val_miou = rec.val_miou;
        meta.provenance = {{"train_config", cfg}, {"train_samples", train.size()}, {"val_samples", val.size()}};
        save_model(model, hooks.run_dir / "best.ckpt", meta);
      }
    }
    if (!hooks.run_dir.empty()) write_history_csv(hooks.run_dir / "history.csv", history);
    if (hooks.on_epoch && !hooks.on_epoch(rec, model)) break;
  }
  return history;
}

template void adam_update(Tensor<float>&, const Tensor<float>&, Tensor<float>&, Tensor<float>&, std::int64_t,
                          const AdamHyper&);
template void adam_update(Tensor<double>&, const Tensor<double>&, Tensor<double>&, Tensor<double>&, std::int64_t,
                          const AdamHyper&);
template class Adam<float>;
template class Adam<double>;

}  // namespace tumorseg
