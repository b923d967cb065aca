#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "nmcmc/nn/autodiff.hpp"
#include "nmcmc/nn/tensor.hpp"

namespace nmcmc::nn {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 250;
  double initial_lr = 1e-3;
  /// Fraction of the total step budget over which the rate is cosine-decayed.
  double decay_fraction = 0.8;
  /// Decoupled weight decay applied by the optimizer.
  double weight_decay = 0.05;
  /// L2 penalty rate on dense weights, added to the loss.
  double l2_rate = 1e-3;
  std::size_t patience = 20;
  double split_fraction = 0.8;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  /// Throws ContractError for out-of-range fields.
  void validate() const;
};

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Zero moments shaped like `params`.
  static AdamState for_parameters(std::span<Tensor* const> params);
};

/// One Adam update with decoupled weight decay:
///   p <- p - lr * weight_decay * p, then p <- p - lr * m_hat / (sqrt(v_hat) + eps).
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               double lr, double weight_decay);

/// Learning rate after `step` of `total_steps`: flat at initial_lr, then a
/// half-cosine to zero across the last decay_fraction of the budget.
double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  /// 1-based epoch whose parameters were restored; 0 when no epoch ran.
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
};

/// Trainable tensors plus the subset receiving the L2 penalty.
struct TrainableSet {
  std::vector<Tensor*> params;
  std::vector<Tensor*> regularized;
};

/// Builds the data loss for the samples in `batch`. `training` is false for
/// validation passes (dropout off).
using BatchLoss =
    std::function<Var(Graph& g, std::span<const std::size_t> batch, Rng& rng, bool training)>;

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Shuffled train/validation split of [0, sample_count). The validation part
/// falls back to the training part when it would be empty. The one-argument
/// form draws from Rng(cfg.seed) and reproduces the split train_loop uses.
DataSplit split_dataset(std::size_t sample_count, const TrainConfig& cfg, Rng& rng);
DataSplit split_dataset(std::size_t sample_count, const TrainConfig& cfg);

/// Mini-batch Adam over a shuffled train split with early stopping on the
/// validation split. Restores the parameters of the best validation epoch.
/// Throws ContractError for an empty dataset.
TrainHistory train_loop(const TrainableSet& trainable, std::size_t sample_count,
                        const BatchLoss& loss, const TrainConfig& cfg);

/// Mean loss over `indices` evaluated batch by batch, no gradients.
double evaluate_loss(const BatchLoss& loss, std::span<const std::size_t> indices,
                     std::size_t batch_size, Rng& rng);

}  // namespace nmcmc::nn
