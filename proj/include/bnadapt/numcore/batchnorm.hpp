#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "bnadapt/numcore/tensor.hpp"

namespace bnadapt {

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Per-feature statistics used to normalize one BN layer. Variance is the
// population (divide by N) variance.
struct BatchStats {
  Tensor mean;  // 1 x D
  Tensor var;   // 1 x D
};

inline BatchStats batch_statistics(const Tensor& x) {
  Tensor mean = column_mean(x);
  Tensor var = column_variance(x, mean);
  return {std::move(mean), std::move(var)};
}

// State of one BatchNorm layer. gamma/beta are trainable; the running
// statistics are not.
struct BNLayerState {
  Tensor running_mean;
  Tensor running_var;
  Tensor gamma;
  Tensor beta;
  double momentum = kBatchNormMomentum;
  double epsilon = kBatchNormEpsilon;

  static BNLayerState fresh(std::size_t width) {
    return BNLayerState{Tensor::zeros(1, width), Tensor::filled(1, width, 1.0), Tensor::filled(1, width, 1.0),
                        Tensor::zeros(1, width)};
  }

  std::size_t width() const { return gamma.cols(); }

  // new = (1 - m) old + m batch
  void update_running(const BatchStats& batch) {
    for (std::size_t j = 0; j < width(); ++j) {
      running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * batch.mean[j];
      running_var[j] = (1.0 - momentum) * running_var[j] + momentum * batch.var[j];
    }
  }

  void validate() const {
    const std::size_t d = width();
    for (const Tensor* t : {&running_mean, &running_var, &gamma, &beta})
      if (t->rows() != 1 || t->cols() != d) throw ShapeError("BNLayerState: inconsistent widths");
    for (double v : running_var.values())
      if (v < 0.0) throw NumericError("BNLayerState: negative running variance");
  }
};

enum class BatchNormMode { train_batch_stats, eval_running_stats, eval_context_stats };

// gamma * (x - mu) / sqrt(var + eps) + beta per feature. Train mode
// normalizes with the batch statistics and folds them into the running
// statistics; eval-context mode needs `context` statistics.
inline Tensor batchnorm_forward(const Tensor& x, BNLayerState& state, BatchNormMode mode,
                                const BatchStats* context = nullptr) {
  if (x.cols() != state.width()) {
    throw ShapeError("batchnorm_forward: input width " + std::to_string(x.cols()) + " vs layer width " +
                     std::to_string(state.width()));
  }
  if (x.rows() == 0) throw ShapeError("batchnorm_forward: empty batch");
  BatchStats stats;
  switch (mode) {
    case BatchNormMode::train_batch_stats:
      stats = batch_statistics(x);
      state.update_running(stats);
      break;
    case BatchNormMode::eval_running_stats:
      stats = {state.running_mean, state.running_var};
      break;
    case BatchNormMode::eval_context_stats:
      if (!context) throw Error("batchnorm_forward: context statistics required");
      stats = *context;
      break;
  }
  Tensor out = x;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    const double inv = 1.0 / std::sqrt(stats.var[j] + state.epsilon);
    for (std::size_t i = 0; i < x.rows(); ++i)
      out(i, j) = state.gamma[j] * (x(i, j) - stats.mean[j]) * inv + state.beta[j];
  }
  return out;
}

}  // namespace bnadapt
