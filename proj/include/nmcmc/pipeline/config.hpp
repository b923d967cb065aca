#pragma once

// Run configuration. On disk it is flat UTF-8 text, one `key = value` per
// line, `#` starting a comment. Keys are namespaced field., mesh., vae.,
// cnf., sampler. and io.; the two top-level keys are `seed` and `preset`.
// List values are comma separated.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "nmcmc/cnf/flow.hpp"
#include "nmcmc/field/random_field.hpp"
#include "nmcmc/nn/optim.hpp"
#include "nmcmc/sampler/demcmc.hpp"
#include "nmcmc/vae/ivae.hpp"

namespace nmcmc::pipeline {

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;

  /// mesh.n and field.* (field.modes is N_par).
  field::BasisSpec problem{21, 0.25, 8, 1.0, 1.0};

  std::size_t train_samples = 4000;
  std::size_t test_samples = 1000;
  /// 0 leaves the simulated data noise-free.
  double snr = 0.0;
  std::filesystem::path out_dir = "run";
  bool write_chains = true;

  /// x_dim and par_dim follow the problem.
  vae::IVaeArchitecture vae_arch;
  nn::TrainConfig vae_train;

  /// latent_dim and par_dim follow the VAE and the problem.
  cnf::FlowArchitecture cnf_arch;
  nn::TrainConfig cnf_train;
  /// Train the flow on fresh draws from q(h | x) rather than on its means.
  bool cnf_latent_draws = true;

  sampler::SamplerConfig sampler;
  std::size_t chains = 2;
  /// Leading test rows that are inverted.
  std::size_t observations = 20;

  /// 21 x 21 mesh, N_M = 8, 4000 / 1000 samples, N_h = 8, 12 coupling layers,
  /// beta_KL = 0.1, beta_pred = 1.
  static RunConfig desk();
  /// 11 x 11 mesh, N_M = 4, 500 samples, tiny networks, short chains.
  static RunConfig smoke();
  /// 61 x 61 mesh, N_M = 14, 32000 samples, N_h = 20, 30 coupling layers.
  static RunConfig full();
  /// ConfigError for unknown names.
  static RunConfig from_preset(std::string_view name);

  /// Applies one key. ConfigError for unknown keys and malformed values.
  /// `preset` resets every field except seed and out_dir.
  void set(std::string_view key, std::string_view value);

  /// Derives the dependent dimensions and checks cross-field consistency.
  /// ConfigError on failure.
  void validate();

  /// Every setting except out_dir, as canonical JSON.
  nlohmann::json to_json() const;
};

/// Parses config text on top of `base`. A `preset` line, wherever it
/// appears, is applied before the other keys. ConfigError names the line.
RunConfig parse_config(std::string_view text, RunConfig base = RunConfig::desk());
RunConfig load_config(const std::filesystem::path& path, RunConfig base = RunConfig::desk());

}  // namespace nmcmc::pipeline
