#pragma once

// Conditional RealNVP: a stack of affine coupling layers mapping a latent
// code h to z ~ N(0, I), each layer conditioned on the parameters lambda.
//
// Layer k keeps the frozen coordinates h_B and updates the active ones:
//   h_A <- h_A * exp(s_k(h_B, lambda)) + t_k(h_B, lambda),
// contributing sum(s_k) to log|det J|.

#include <filesystem>
#include <span>
#include <vector>

#include "nmcmc/nn/checkpoint.hpp"
#include "nmcmc/nn/layers.hpp"
#include "nmcmc/nn/optim.hpp"

namespace nmcmc::cnf {

using nn::Activation;
using nn::DenseLayer;
using nn::Graph;
using nn::Mlp;
using nn::Tensor;
using nn::Var;

struct FlowArchitecture {
  std::size_t latent_dim = 8;
  std::size_t par_dim = 8;
  std::size_t layer_count = 12;
  /// Conditioner widths after the lambda input; the last is the width fed
  /// to the branches.
  std::vector<std::size_t> conditioner_widths{32, 32};
  /// Width of the frozen-subset and conditioner embeddings in each branch.
  std::size_t embed_width = 32;
  /// Width of the layer after the concatenation.
  std::size_t hidden_width = 32;
  Activation hidden = Activation::elu;

  void validate() const;
};

/// One of the two per-layer networks (scale or translate):
///   out = head([act(W_f h_B + b_f), act(W_c c + b_c)]).
struct CouplingBranch {
  DenseLayer frozen_embed;
  DenseLayer cond_embed;
  /// 2*embed -> hidden -> N_d; final activation tanh (scale) or linear
  /// (translate).
  Mlp head;
};

struct CouplingLayer {
  std::vector<std::size_t> frozen;
  std::vector<std::size_t> active;
  Mlp conditioner;
  CouplingBranch scale;
  CouplingBranch translate;
};

/// Frozen indices of 0-based layer k: even coordinates for even k, odd
/// coordinates for odd k.
std::vector<std::size_t> frozen_indices(std::size_t latent_dim, std::size_t layer);

struct FlowStack {
  std::vector<CouplingLayer> layers;
  std::size_t latent_dim = 0;
  std::size_t par_dim = 0;

  static FlowStack xavier(const FlowArchitecture& arch, Rng& rng);
  /// Stack whose every network outputs zero (the identity map).
  static FlowStack identity(const FlowArchitecture& arch);

  std::vector<Tensor*> parameters();
  std::vector<Tensor*> weights();
  /// Throws DimensionError when layers and dimensions disagree.
  void check_consistency() const;
};

/// Lambda-dependent part of one layer: the conditioner output passed
/// through each branch's conditioner embedding. One row per sample.
struct LayerConditioning {
  Tensor scale;
  Tensor translate;
};

/// Per-layer conditioning for a fixed lambda (or batch of lambdas). The
/// sampler computes this once for the current state and reuses it.
struct FlowConditioning {
  std::vector<LayerConditioning> layers;
};

FlowConditioning condition(const FlowStack& stack, std::span<const double> lambda);
FlowConditioning condition_batch(const FlowStack& stack, const Tensor& lambda);

struct CouplingResult {
  std::vector<double> h;
  double log_det = 0.0;
};

CouplingResult coupling_forward(const CouplingLayer& layer, std::span<const double> h,
                                std::span<const double> lambda);
std::vector<double> coupling_inverse(const CouplingLayer& layer, std::span<const double> h_next,
                                     std::span<const double> lambda);

struct FlowResult {
  std::vector<double> z;
  double log_det = 0.0;
};

FlowResult flow_forward(const FlowStack& stack, std::span<const double> h,
                        std::span<const double> lambda);
std::vector<double> flow_inverse(const FlowStack& stack, std::span<const double> z,
                                 std::span<const double> lambda);

/// Batch forward pass: z (B x N_h) and per-row log-determinants.
struct FlowBatchResult {
  Tensor z;
  std::vector<double> log_det;
};
FlowBatchResult flow_forward_batch(const FlowStack& stack, const Tensor& h,
                                   const FlowConditioning& cond);

/// log N(f(h); 0, I) + log|det Df(h)|. EvaluationError on a non-finite
/// result.
double log_prob(const FlowStack& stack, std::span<const double> h, std::span<const double> lambda);
double log_prob(const FlowStack& stack, std::span<const double> h, const FlowConditioning& cond);
std::vector<double> log_prob_batch(const FlowStack& stack, const Tensor& h, const Tensor& lambda);

/// Per-row log-density on a graph (B x 1).
Var log_prob_graph(Graph& g, const FlowStack& stack, Var h, Var lambda,
                   const nn::DropoutContext* dropout = nullptr);

/// -mean log_prob. ContractError on an empty batch.
double nll_loss(const FlowStack& stack, const Tensor& h, const Tensor& lambda);
Var nll_loss_graph(Graph& g, const FlowStack& stack, const Tensor& h, const Tensor& lambda,
                   const nn::DropoutContext* dropout = nullptr);

/// Training pairs. With a nonempty `h_log_variance`, every epoch draws
/// h = h_mean + exp(log_var / 2) * eps afresh; otherwise h_mean is used as is.
struct FlowTrainingData {
  Tensor h_mean;
  Tensor h_log_variance;
  Tensor lambda;
};

struct FlowTraining {
  FlowStack stack;
  nn::TrainHistory history;
};

FlowTraining train_cnf(const FlowTrainingData& data, const FlowArchitecture& arch,
                       const nn::TrainConfig& cfg);

/// h = flow_inverse(z, lambda) with z ~ N(0, I).
std::vector<double> flow_sample(const FlowStack& stack, std::span<const double> lambda, Rng& rng);

void save_flow(const std::filesystem::path& path, const FlowStack& stack,
               const nlohmann::json& hyperparameters = nlohmann::json::object(),
               std::uint64_t seed = 0);
FlowStack load_flow(const std::filesystem::path& path);

}  // namespace nmcmc::cnf
