#pragma once

// Informed variational autoencoder: a Gaussian encoder q(h|x), a decoder
// h -> x and a predictor h -> lambda trained jointly on
//
//   L = L_MSE + beta_KL * L_KL + beta_pred * L_pred.

#include <filesystem>
#include <span>
#include <vector>

#include "nmcmc/nn/checkpoint.hpp"
#include "nmcmc/nn/layers.hpp"
#include "nmcmc/nn/optim.hpp"

namespace nmcmc::vae {

using nn::Activation;
using nn::DenseLayer;
using nn::Graph;
using nn::Mlp;
using nn::Tensor;
using nn::Var;

struct LatentGaussian {
  std::vector<double> mean;
  std::vector<double> log_variance;

  std::size_t size() const noexcept { return mean.size(); }
};

/// Row-wise latent Gaussians for a batch.
struct LatentBatch {
  Tensor mean;
  Tensor log_variance;
};

struct IVaeArchitecture {
  std::size_t x_dim = 81;
  std::size_t latent_dim = 8;
  std::size_t par_dim = 8;
  std::vector<std::size_t> encoder_hidden{64, 32};
  std::vector<std::size_t> decoder_hidden{32, 64};
  std::vector<std::size_t> predictor_hidden{64, 32};
  Activation hidden = Activation::tanh;
  double beta_kl = 2.5e-4;
  double beta_pred = 1e-4;
  double sigma_x = 1.0;

  void validate() const;
};

struct IVaeModel {
  /// x_dim -> encoder_hidden; every layer uses the hidden activation.
  Mlp trunk;
  DenseLayer mean_head;
  DenseLayer log_variance_head;
  Mlp decoder;
  Mlp predictor;
  double beta_kl = 2.5e-4;
  double beta_pred = 1e-4;
  double sigma_x = 1.0;
  /// Per-feature standardization applied to x before the trunk and undone
  /// after the decoder.
  std::vector<double> x_mean;
  std::vector<double> x_scale;

  static IVaeModel xavier(const IVaeArchitecture& arch, Rng& rng);

  std::size_t x_dim() const { return trunk.in(); }
  std::size_t latent_dim() const noexcept { return mean_head.out(); }
  std::size_t par_dim() const { return predictor.out(); }

  std::vector<Tensor*> parameters();
  /// Dense weight matrices (the L2-penalized subset).
  std::vector<Tensor*> weights();
  /// Throws DimensionError when the parts do not fit together.
  void check_consistency() const;
};

/// Sets x_mean / x_scale from the rows of `x`. Features with zero spread keep
/// scale 1.
void fit_standardization(IVaeModel& model, const Tensor& x);
Tensor standardize(const IVaeModel& model, const Tensor& x);

LatentGaussian encode(const IVaeModel& model, std::span<const double> x);
LatentBatch encode_batch(const IVaeModel& model, const Tensor& x);

/// h = mean + exp(log_variance / 2) * eps.
std::vector<double> reparameterize(const LatentGaussian& latent, std::span<const double> eps);

/// Reconstruction in the original units of x.
std::vector<double> decode(const IVaeModel& model, std::span<const double> h);
std::vector<double> predict(const IVaeModel& model, std::span<const double> h);

/// 1/2 sum_j (mu_j^2 + sigma_j^2 - 1 - log sigma_j^2).
double kl_term(const LatentGaussian& latent);

struct LossParts {
  double total = 0.0;
  double mse = 0.0;
  double kl = 0.0;
  double pred = 0.0;
};

struct LossVars {
  Var total;
  Var mse;
  Var kl;
  Var pred;
};

/// Batch objective on a graph. `x_std` holds standardized observations,
/// `eps` one standard-normal draw per sample and latent coordinate.
LossVars ivae_loss_graph(Graph& g, const IVaeModel& model, const Tensor& x_std,
                         const Tensor& lambda, const Tensor& eps,
                         const nn::DropoutContext* dropout = nullptr);

/// Batch objective with explicit noise; `x` in original units.
LossParts ivae_loss(const IVaeModel& model, const Tensor& x, const Tensor& lambda,
                    const Tensor& eps);
/// Same, drawing eps from `rng`. ContractError on an empty batch.
LossParts ivae_loss(const IVaeModel& model, const Tensor& x, const Tensor& lambda, Rng& rng);

struct IVaeTraining {
  IVaeModel model;
  nn::TrainHistory history;
};

/// Standardizes with training-split statistics, then minimizes the
/// objective with train_loop. Rows of `x` and `lambda` are paired samples.
IVaeTraining train_ivae(const Tensor& x, const Tensor& lambda, const IVaeArchitecture& arch,
                        const nn::TrainConfig& cfg);

void save_ivae(const std::filesystem::path& path, const IVaeModel& model,
               const nlohmann::json& hyperparameters = nlohmann::json::object(),
               std::uint64_t seed = 0);
IVaeModel load_ivae(const std::filesystem::path& path);

}  // namespace nmcmc::vae
