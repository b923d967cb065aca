#include "nmcmc/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "nmcmc/errors.hpp"

namespace nmcmc::nn {

void TrainConfig::validate() const {
  require(batch_size >= 1, "batch_size must be >= 1");
  require(patience >= 1, "patience must be >= 1");
  require(initial_lr > 0.0, "initial_lr must be positive");
  require(decay_fraction > 0.0 && decay_fraction <= 1.0, "decay_fraction must lie in (0,1]");
  require(weight_decay >= 0.0, "weight_decay must be nonnegative");
  require(l2_rate >= 0.0, "l2_rate must be nonnegative");
  require(split_fraction > 0.0 && split_fraction < 1.0, "split_fraction must lie in (0,1)");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0,1)");
}

AdamState AdamState::for_parameters(std::span<Tensor* const> params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.first_moment.emplace_back(p->rows(), p->cols());
    s.second_moment.emplace_back(p->rows(), p->cols());
  }
  return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               double lr, double weight_decay) {
  require_dims(params.size() == grads.size() && params.size() == state.first_moment.size() &&
                   params.size() == state.second_moment.size(),
               "adam_step: parameter, gradient and moment counts differ");
  require(lr >= 0.0, "adam_step: negative learning rate");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    require_dims(p.same_shape(g) && p.same_shape(m) && p.same_shape(v),
                 "adam_step: shape mismatch for parameter " + std::to_string(k));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      p[i] -= lr * weight_decay * p[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
    }
  }
}

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  require(total_steps > 0, "lr_schedule: total_steps must be positive");
  require(step <= total_steps, "lr_schedule: step beyond total_steps");
  const double total = static_cast<double>(total_steps);
  const double decay_start = (1.0 - cfg.decay_fraction) * total;
  const double s = static_cast<double>(step);
  if (s < decay_start) return cfg.initial_lr;
  const double u = (s - decay_start) / (total - decay_start);
  return cfg.initial_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

double evaluate_loss(const BatchLoss& loss, std::span<const std::size_t> indices,
                     std::size_t batch_size, Rng& rng) {
  require(!indices.empty(), "evaluate_loss: no samples");
  double total = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, indices.size() - start);
    Graph g;
    const Var l = loss(g, indices.subspan(start, n), rng, false);
    total += g.scalar(l) * static_cast<double>(n);
  }
  return total / static_cast<double>(indices.size());
}

namespace {

Var l2_penalty(Graph& g, std::span<Tensor* const> weights, double rate) {
  Var acc = g.constant(Tensor(1, 1));
  for (const Tensor* w : weights) acc = add(acc, sum(square(g.parameter(w))));
  return scale(acc, rate);
}

std::vector<Tensor> snapshot(std::span<Tensor* const> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor* p : params) out.push_back(*p);
  return out;
}

}  // namespace

DataSplit split_dataset(std::size_t sample_count, const TrainConfig& cfg, Rng& rng) {
  std::vector<std::size_t> order(sample_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_train = static_cast<std::size_t>(
      std::llround(cfg.split_fraction * static_cast<double>(sample_count)));
  n_train = std::clamp<std::size_t>(n_train, 1, sample_count);
  if (n_train == sample_count && sample_count > 1) --n_train;
  DataSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  if (split.val.empty()) split.val = split.train;
  return split;
}

DataSplit split_dataset(std::size_t sample_count, const TrainConfig& cfg) {
  Rng rng(cfg.seed);
  return split_dataset(sample_count, cfg, rng);
}

TrainHistory train_loop(const TrainableSet& trainable, std::size_t sample_count,
                        const BatchLoss& loss, const TrainConfig& cfg) {
  cfg.validate();
  require(sample_count > 0, "train_loop: empty dataset");

  TrainHistory history;
  Rng rng(cfg.seed);
  DataSplit split = split_dataset(sample_count, cfg, rng);
  const std::size_t n_train = split.train.size();
  history.train_indices = std::move(split.train);
  history.val_indices = std::move(split.val);

  if (cfg.max_epochs == 0) return history;

  const auto& params = trainable.params;
  AdamState adam = AdamState::for_parameters(params);
  const std::size_t batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.max_epochs * batches_per_epoch;

  std::vector<Tensor> best = snapshot(params);
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::size_t step = 0;
  std::vector<std::size_t> train = history.train_indices;
  std::vector<Tensor> grads(params.size());

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, n_train - start);
      Graph g;
      const Var data = loss(g, std::span(train).subspan(start, n), rng, true);
      epoch_loss += g.scalar(data) * static_cast<double>(n);
      Var objective = data;
      if (cfg.l2_rate > 0.0 && !trainable.regularized.empty())
        objective = add(objective, l2_penalty(g, trainable.regularized, cfg.l2_rate));
      g.backward(objective);
      for (std::size_t k = 0; k < params.size(); ++k) grads[k] = g.gradient_of(params[k]);
      adam_step(params, grads, adam, lr_schedule(step, total_steps, cfg), cfg.weight_decay);
      ++step;
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(n_train));

    Rng val_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const double val = evaluate_loss(loss, history.val_indices, cfg.batch_size, val_rng);
    history.val_loss.push_back(val);
    history.epochs_run = epoch;

    if (val < best_val) {
      best_val = val;
      history.best_epoch = epoch;
      best = snapshot(params);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      history.early_stopped = true;
      break;
    }
  }

  for (std::size_t k = 0; k < params.size(); ++k) *params[k] = best[k];
  return history;
}

}  // namespace nmcmc::nn
