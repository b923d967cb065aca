#pragma once

// Simulated (observation, parameter) datasets and the Darcy forward model
// that produces them.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>

#include <nlohmann/json.hpp>

#include "nmcmc/darcy/darcy.hpp"
#include "nmcmc/field/random_field.hpp"
#include "nmcmc/nn/tensor.hpp"

namespace nmcmc::pipeline {

using nn::Tensor;

struct Dataset {
  /// N x N_x inputs.
  Tensor x;
  /// N x N_par labels.
  Tensor lambda;
  /// {forward_model, seed, noise}.
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const noexcept { return x.rows(); }
  /// DimensionError when row counts differ, EvaluationError on non-finite
  /// entries.
  void validate() const;
};

/// Framed file: JSON header {kind, format_version, rows, x_dim, par_dim,
/// metadata}, then per record the x row followed by the lambda row.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

/// Worker count: NEURAL_MCMC_THREADS when set to a positive integer,
/// otherwise the hardware concurrency.
std::size_t worker_threads();

/// Runs body(i) for i in [0, count) on up to `threads` workers. When bodies
/// throw, the exception of the lowest failing index is rethrown.
void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& body);

struct ForwardModel {
  field::BasisSpec spec;
  darcy::StructuredMesh mesh;
  field::KLBasis basis;

  nlohmann::json to_json() const;
};

/// Builds mesh and basis for `spec`, reusing the basis cached at `cache`
/// when its header matches and writing it there otherwise. ConfigError when
/// the sensor grid is not nodal on the mesh.
ForwardModel build_forward_model(const field::BasisSpec& spec,
                                 const std::optional<std::filesystem::path>& cache = std::nullopt);

/// Sensor heads for each row of `lambda`. Solver failures are rethrown with
/// the sample index in the message.
Dataset simulate(const ForwardModel& model, const Tensor& lambda, std::size_t threads = 1);

/// Draws count x N_M standard-normal coefficients from `rng` (row by row,
/// on the calling thread) and simulates them.
Dataset generate_dataset(const ForwardModel& model, std::size_t count, Rng& rng,
                         std::size_t threads = 1);

/// Adds N(0, (rms_j / snr)^2) to every entry of feature column j, where
/// rms_j is the column's root mean square. ContractError unless snr > 0.
Dataset add_noise(const Dataset& data, double snr, Rng& rng);

}  // namespace nmcmc::pipeline
