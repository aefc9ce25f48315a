#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tdn/archdsl.hpp"
#include "tdn/data.hpp"
#include "tdn/params.hpp"
#include "tdn/tensor.hpp"

namespace tdn {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 30;
  int batch_size = 32;
  std::uint64_t seed = 1;
  bool augment = true;  // random horizontal / vertical flips
  /// Multiply the rate by 0.1 at 50% and again at 75% of the epochs.
  bool step_decay = true;
  /// Stop as soon as test accuracy reaches this value (percent).
  std::optional<double> target_accuracy;
};

template <typename Scalar>
struct LossAndGrads {
  Scalar loss = 0;
  bool finite = true;
  ModelParams<Scalar> grads;
  /// Softmax output, batch x classes.
  RowMatrix<Scalar> probabilities;
};

/// Mean softmax cross-entropy and its gradient for every learnable tensor.
/// Batch norm normalizes with batch statistics; when update_running_stats is
/// set the running mean / variance move with momentum 0.9.
template <typename Scalar>
LossAndGrads<Scalar> loss_and_grads(const ArchGraph& graph, ModelParams<Scalar>& params,
                                    const Tensor<Scalar>& images, std::span<const int> labels,
                                    bool update_running_stats = true);

/// Training-mode forward pass; returns the final node's output (batch x channels).
template <typename Scalar>
RowMatrix<Scalar> forward_train(const ArchGraph& graph, const ModelParams<Scalar>& params,
                                const Tensor<Scalar>& images);

/// v <- momentum*v + g + weight_decay*w ; w <- w - lr*v. Running stats untouched.
template <typename Scalar>
void sgd_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, ModelParams<Scalar>& velocity,
              const TrainConfig& cfg, double learning_rate);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double test_accuracy = 0;
  double learning_rate = 0;
};

struct FitResult {
  ModelParams<float> params;  // best test-accuracy checkpoint
  std::vector<EpochStats> history;
  double best_accuracy = 0;
  int best_epoch = -1;  // -1: initial parameters
  bool diverged = false;
};

FitResult fit(const ArchGraph& graph, const DatasetSplit& data, const TrainConfig& cfg);

struct EvalResult {
  double accuracy_pct = 0;
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> confusion;  // rows: truth, cols: predicted
};

/// Accuracy through the inference runtime (batch norm in inference mode).
EvalResult evaluate(const ArchGraph& graph, const ModelParams<float>& params,
                    const std::vector<LabeledImage>& test);
/// Accuracy and confusion from predictions.
EvalResult score_predictions(std::span<const int> truth, std::span<const int> predicted, int classes);

/// Learning rate for a given epoch under cfg's schedule.
double scheduled_rate(const TrainConfig& cfg, int epoch);

void write_curves_csv(const std::string& path, const std::vector<EpochStats>& history);

}  // namespace tdn
