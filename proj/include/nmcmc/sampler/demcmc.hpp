#pragma once

// Differential-evolution Metropolis sampling of p(lambda | x) with a learned
// surrogate likelihood p(h | lambda) evaluated at latent draws h' ~ q(h | x).

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmcmc/cnf/flow.hpp"
#include "nmcmc/nn/tensor.hpp"
#include "nmcmc/vae/ivae.hpp"

namespace nmcmc::sampler {

enum class ProposalKind { differential_evolution, gaussian_baseline };

std::string_view to_string(ProposalKind k);
/// ContractError for unknown names.
ProposalKind parse_proposal_kind(std::string_view name);

struct SamplerConfig {
  std::size_t chain_length = 10000;
  /// nullopt selects default_gamma(N_par).
  std::optional<double> gamma;
  double epsilon_std = 1e-3;
  std::size_t archive_period = 10;
  std::size_t archive_init_size = 2;
  /// nullopt selects chain_length / 4.
  std::optional<std::size_t> burn_in;
  std::size_t thin = 5;
  std::uint64_t seed = 0;
  ProposalKind proposal = ProposalKind::differential_evolution;
  /// Step size of the Gaussian baseline proposal.
  double baseline_std = 0.1;
  /// First chain state; empty draws it from the prior.
  std::vector<double> initial_state;

  std::size_t effective_burn_in() const { return burn_in.value_or(chain_length / 4); }
  /// ContractError for out-of-range fields.
  void validate() const;
};

struct PriorSpec {
  enum class Kind { standard_normal, uniform_box };
  Kind kind = Kind::standard_normal;
  std::size_t dim = 0;
  std::vector<double> lower;
  std::vector<double> upper;

  static PriorSpec standard_normal(std::size_t dim);
  /// ContractError unless every bound is finite with lower < upper.
  static PriorSpec uniform_box(std::vector<double> lower, std::vector<double> upper);

  /// Unnormalized log density; -infinity outside a uniform box.
  double log_density(std::span<const double> lambda) const;
  std::vector<double> sample(Rng& rng) const;
};

class Archive {
 public:
  void push(std::span<const double> state) { states_.emplace_back(state.begin(), state.end()); }
  std::size_t size() const noexcept { return states_.size(); }
  const std::vector<double>& operator[](std::size_t i) const { return states_[i]; }

 private:
  std::vector<std::vector<double>> states_;
};

struct Chain {
  /// One row per iteration.
  std::vector<std::vector<double>> states;
  std::vector<double> log_posteriors;
  std::vector<bool> accepted;
  double acceptance_rate = 0.0;
  std::size_t archive_size = 0;
};

/// 2.38 / sqrt(2 N_par). ContractError for N_par = 0.
double default_gamma(std::size_t par_dim);

/// current + gamma (A[r1] - A[r2]) + eps with r1 != r2 uniform and
/// eps ~ N(0, epsilon_std^2 I). ContractError when the archive holds fewer
/// than two states.
std::vector<double> propose(std::span<const double> current, const Archive& archive, double gamma,
                            double epsilon_std, Rng& rng);

/// min(1, exp(proposed - current)). ContractError when both are -infinity.
double acceptance_prob(double log_post_proposed, double log_post_current);

/// log p(h | lambda) for one fixed lambda.
class ConditionedLikelihood {
 public:
  virtual ~ConditionedLikelihood() = default;
  virtual double log_density(std::span<const double> h) const = 0;
};

/// Surrogate likelihood family; at(lambda) may precompute lambda-dependent
/// work that is then reused for every latent draw.
class SurrogateLikelihood {
 public:
  virtual ~SurrogateLikelihood() = default;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t par_dim() const = 0;
  virtual std::unique_ptr<ConditionedLikelihood> at(std::span<const double> lambda) const = 0;
};

/// The trained flow as a surrogate likelihood, with the conditioner outputs
/// cached per lambda.
class FlowLikelihood final : public SurrogateLikelihood {
 public:
  explicit FlowLikelihood(const cnf::FlowStack& flow) : flow_(&flow) {}
  std::size_t latent_dim() const override { return flow_->latent_dim; }
  std::size_t par_dim() const override { return flow_->par_dim; }
  std::unique_ptr<ConditionedLikelihood> at(std::span<const double> lambda) const override;

 private:
  const cnf::FlowStack* flow_;
};

/// Algorithm core. `posterior_latent` is q(h | x) for the observation being
/// inverted; one h' is drawn from it per iteration and shared by the
/// numerator and the denominator of the acceptance ratio. The chain's RNG is
/// derived from (cfg.seed, chain_id).
Chain run_chain(const vae::LatentGaussian& posterior_latent, const SurrogateLikelihood& likelihood,
                const PriorSpec& prior, const SamplerConfig& cfg, std::uint64_t chain_id = 0);

/// Encodes x once and samples with the flow as surrogate likelihood.
Chain run_chain(const vae::IVaeModel& encoder, const cnf::FlowStack& flow, const PriorSpec& prior,
                std::span<const double> x, const SamplerConfig& cfg, std::uint64_t chain_id = 0);

/// Retained states after burn-in and thinning.
struct Samples {
  std::vector<std::vector<double>> states;
  std::vector<double> log_posteriors;
};

/// Keeps indices burn_in, burn_in + thin, ... ContractError when
/// burn_in >= length or thin == 0.
Samples burn_and_thin(const Chain& chain, std::size_t burn_in, std::size_t thin);

/// Potential scale reduction for coordinate `dim` across >= 2 equally long
/// sample sets (>= 10 each). ContractError on degenerate chains.
double gelman_rubin(std::span<const Samples> chains, std::size_t dim);

struct PosteriorSummary {
  std::vector<double> mean;
  /// Population standard deviation.
  std::vector<double> std;
  /// Retained sample with the highest recorded log-posterior.
  std::vector<double> map;
};

/// ContractError on an empty sample set.
PosteriorSummary summarize(const Samples& samples);

/// Pools several sample sets.
Samples pool(std::span<const Samples> chains);

/// CSV with header iter,accepted,log_post,lambda_0,...
void write_chain_csv(const std::filesystem::path& path, const Chain& chain);

/// {acceptance_rate, acceptance_rates, r_hat, n_kept}.
nlohmann::json diagnostics_json(std::span<const Chain> chains, std::span<const Samples> kept);

}  // namespace nmcmc::sampler
