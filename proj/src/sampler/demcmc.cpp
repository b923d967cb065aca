#include "nmcmc/sampler/demcmc.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "nmcmc/errors.hpp"
#include "nmcmc/io.hpp"

namespace nmcmc::sampler {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kInitAttempts = 100;

class FlowConditioned final : public ConditionedLikelihood {
 public:
  FlowConditioned(const cnf::FlowStack& flow, std::span<const double> lambda)
      : flow_(&flow), cond_(cnf::condition(flow, lambda)) {}
  double log_density(std::span<const double> h) const override {
    return cnf::log_prob(*flow_, h, cond_);
  }

 private:
  const cnf::FlowStack* flow_;
  cnf::FlowConditioning cond_;
};

double safe_log_density(const ConditionedLikelihood& l, std::span<const double> h) {
  try {
    const double v = l.log_density(h);
    return std::isfinite(v) ? v : kNegInf;
  } catch (const EvaluationError&) {
    return kNegInf;
  }
}

std::vector<double> gaussian_step(std::span<const double> current, double sd, Rng& rng) {
  std::normal_distribution<double> n01;
  std::vector<double> out(current.begin(), current.end());
  for (double& v : out) v += sd * n01(rng);
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string_view to_string(ProposalKind k) {
  return k == ProposalKind::differential_evolution ? "differential_evolution"
                                                   : "gaussian_baseline";
}

ProposalKind parse_proposal_kind(std::string_view name) {
  if (name == "differential_evolution") return ProposalKind::differential_evolution;
  if (name == "gaussian_baseline") return ProposalKind::gaussian_baseline;
  throw ContractError("unknown proposal kind '" + std::string(name) + "'");
}

void SamplerConfig::validate() const {
  require(chain_length >= 1, "chain_length must be positive");
  require(!gamma || *gamma >= 0.0, "gamma must be nonnegative");
  require(epsilon_std >= 0.0, "epsilon_std must be nonnegative");
  require(archive_period >= 1, "archive_period must be at least 1");
  require(archive_init_size >= 2, "archive_init_size must be at least 2");
  require(effective_burn_in() < chain_length, "burn_in must be shorter than the chain");
  require(thin >= 1, "thin must be at least 1");
  require(baseline_std > 0.0, "baseline_std must be positive");
}

PriorSpec PriorSpec::standard_normal(std::size_t dim) {
  require(dim >= 1, "prior dimension must be positive");
  PriorSpec p;
  p.dim = dim;
  return p;
}

PriorSpec PriorSpec::uniform_box(std::vector<double> lower, std::vector<double> upper) {
  require(!lower.empty() && lower.size() == upper.size(), "uniform prior bounds must match");
  for (std::size_t i = 0; i < lower.size(); ++i)
    require(std::isfinite(lower[i]) && std::isfinite(upper[i]) && lower[i] < upper[i],
            "uniform prior needs finite bounds with lower < upper");
  PriorSpec p;
  p.kind = Kind::uniform_box;
  p.dim = lower.size();
  p.lower = std::move(lower);
  p.upper = std::move(upper);
  return p;
}

double PriorSpec::log_density(std::span<const double> lambda) const {
  require_dims(lambda.size() == dim, "prior dimension mismatch");
  if (kind == Kind::standard_normal) {
    double sq = 0.0;
    for (double v : lambda) sq += v * v;
    return -0.5 * sq;
  }
  for (std::size_t i = 0; i < dim; ++i)
    if (!(lambda[i] >= lower[i] && lambda[i] <= upper[i])) return kNegInf;
  return 0.0;
}

std::vector<double> PriorSpec::sample(Rng& rng) const {
  std::vector<double> out(dim);
  if (kind == Kind::standard_normal) {
    std::normal_distribution<double> n01;
    for (double& v : out) v = n01(rng);
  } else {
    for (std::size_t i = 0; i < dim; ++i)
      out[i] = std::uniform_real_distribution<double>(lower[i], upper[i])(rng);
  }
  return out;
}

double default_gamma(std::size_t par_dim) {
  require(par_dim >= 1, "default_gamma needs at least one parameter");
  return 2.38 / std::sqrt(2.0 * static_cast<double>(par_dim));
}

std::vector<double> propose(std::span<const double> current, const Archive& archive, double gamma,
                            double epsilon_std, Rng& rng) {
  require(archive.size() >= 2, "DE proposal needs at least two archived states");
  std::uniform_int_distribution<std::size_t> pick(0, archive.size() - 1);
  const std::size_t r1 = pick(rng);
  std::size_t r2 = pick(rng);
  while (r2 == r1) r2 = pick(rng);
  const auto& a = archive[r1];
  const auto& b = archive[r2];
  require_dims(a.size() == current.size(), "archive states do not match the chain dimension");
  std::normal_distribution<double> n01;
  std::vector<double> out(current.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = current[i] + gamma * (a[i] - b[i]);
    if (epsilon_std > 0.0) out[i] += epsilon_std * n01(rng);
  }
  return out;
}

double acceptance_prob(double log_post_proposed, double log_post_current) {
  require(!(log_post_proposed == kNegInf && log_post_current == kNegInf),
          "acceptance_prob: both log posteriors are -infinity");
  require(!std::isnan(log_post_proposed) && !std::isnan(log_post_current),
          "acceptance_prob: NaN log posterior");
  const double delta = log_post_proposed - log_post_current;
  return delta >= 0.0 ? 1.0 : std::exp(delta);
}

std::unique_ptr<ConditionedLikelihood> FlowLikelihood::at(std::span<const double> lambda) const {
  return std::make_unique<FlowConditioned>(*flow_, lambda);
}

Chain run_chain(const vae::LatentGaussian& posterior_latent, const SurrogateLikelihood& likelihood,
                const PriorSpec& prior, const SamplerConfig& cfg, std::uint64_t chain_id) {
  cfg.validate();
  const std::size_t np = likelihood.par_dim();
  require_dims(prior.dim == np, "prior and likelihood disagree on the parameter count");
  require_dims(posterior_latent.size() == likelihood.latent_dim() &&
                   posterior_latent.log_variance.size() == likelihood.latent_dim(),
               "latent posterior and likelihood disagree on the latent size");

  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(chain_id), static_cast<std::uint32_t>(chain_id >> 32)};
  Rng rng(seq);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double gamma = cfg.gamma.value_or(default_gamma(np));
  std::vector<double> eps(likelihood.latent_dim());
  auto draw_latent = [&] {
    for (double& e : eps) e = n01(rng);
    return vae::reparameterize(posterior_latent, eps);
  };

  // Initial state.
  std::vector<double> current;
  std::unique_ptr<ConditionedLikelihood> current_like;
  double current_lp = kNegInf;
  if (!cfg.initial_state.empty()) {
    require_dims(cfg.initial_state.size() == np, "initial_state has the wrong dimension");
    current = cfg.initial_state;
    current_like = likelihood.at(current);
    current_lp = prior.log_density(current) + safe_log_density(*current_like, draw_latent());
    if (!std::isfinite(current_lp))
      throw EvaluationError("sampler initialization: log-posterior not finite at initial_state");
  }
  for (int attempt = 0; attempt < kInitAttempts && !std::isfinite(current_lp); ++attempt) {
    current = prior.sample(rng);
    current_like = likelihood.at(current);
    current_lp = prior.log_density(current) + safe_log_density(*current_like, draw_latent());
  }
  if (!std::isfinite(current_lp))
    throw EvaluationError("sampler initialization: surrogate log-density not finite after " +
                          std::to_string(kInitAttempts) + " prior draws");

  Archive archive;
  const std::size_t init = std::max(2 * np + 2, cfg.archive_init_size);
  for (std::size_t i = 0; i < init; ++i) archive.push(prior.sample(rng));
  archive.push(current);

  Chain chain;
  chain.states.reserve(cfg.chain_length);
  chain.log_posteriors.reserve(cfg.chain_length);
  chain.accepted.reserve(cfg.chain_length);
  chain.states.push_back(current);
  chain.log_posteriors.push_back(current_lp);
  chain.accepted.push_back(true);
  std::size_t n_accepted = 1;

  for (std::size_t n = 2; n <= cfg.chain_length; ++n) {
    std::vector<double> proposal =
        cfg.proposal == ProposalKind::differential_evolution
            ? propose(current, archive, gamma, cfg.epsilon_std, rng)
            : gaussian_step(current, cfg.baseline_std, rng);
    const std::vector<double> h = draw_latent();

    const double prior_proposed = prior.log_density(proposal);
    std::unique_ptr<ConditionedLikelihood> proposed_like;
    double lp_proposed = kNegInf;
    if (std::isfinite(prior_proposed)) {
      proposed_like = likelihood.at(proposal);
      lp_proposed = prior_proposed + safe_log_density(*proposed_like, h);
    }
    const double lp_current = prior.log_density(current) + safe_log_density(*current_like, h);

    bool accept = false;
    if (lp_proposed != kNegInf) {
      accept = lp_current == kNegInf || unif(rng) < acceptance_prob(lp_proposed, lp_current);
    }
    if (accept) {
      current = std::move(proposal);
      current_like = std::move(proposed_like);
      current_lp = lp_proposed;
      ++n_accepted;
    } else {
      current_lp = lp_current;
    }
    chain.states.push_back(current);
    chain.log_posteriors.push_back(current_lp);
    chain.accepted.push_back(accept);
    if (n % cfg.archive_period == 0) archive.push(current);
  }
  chain.acceptance_rate = static_cast<double>(n_accepted) / static_cast<double>(cfg.chain_length);
  chain.archive_size = archive.size();
  return chain;
}

Chain run_chain(const vae::IVaeModel& encoder, const cnf::FlowStack& flow, const PriorSpec& prior,
                std::span<const double> x, const SamplerConfig& cfg, std::uint64_t chain_id) {
  require_dims(encoder.latent_dim() == flow.latent_dim, "encoder and flow latent sizes differ");
  const FlowLikelihood likelihood(flow);
  return run_chain(vae::encode(encoder, x), likelihood, prior, cfg, chain_id);
}

Samples burn_and_thin(const Chain& chain, std::size_t burn_in, std::size_t thin) {
  require(burn_in < chain.states.size(), "burn_in must be shorter than the chain");
  require(thin >= 1, "thin must be at least 1");
  Samples s;
  for (std::size_t i = burn_in; i < chain.states.size(); i += thin) {
    s.states.push_back(chain.states[i]);
    s.log_posteriors.push_back(chain.log_posteriors[i]);
  }
  return s;
}

double gelman_rubin(std::span<const Samples> chains, std::size_t dim) {
  require(chains.size() >= 2, "gelman_rubin needs at least two chains");
  const std::size_t len = chains[0].states.size();
  require(len >= 10, "gelman_rubin needs at least 10 samples per chain");
  const double l = static_cast<double>(len);
  const double m = static_cast<double>(chains.size());
  std::vector<double> means;
  double w = 0.0;
  for (const Samples& c : chains) {
    require(c.states.size() == len, "gelman_rubin needs chains of equal length");
    double mean = 0.0;
    for (const auto& s : c.states) {
      require_dims(dim < s.size(), "gelman_rubin: coordinate out of range");
      mean += s[dim];
    }
    mean /= l;
    double var = 0.0;
    for (const auto& s : c.states) var += (s[dim] - mean) * (s[dim] - mean);
    w += var / (l - 1.0);
    means.push_back(mean);
  }
  w /= m;
  require(w > 0.0, "gelman_rubin: zero within-chain variance");
  double grand = 0.0;
  for (double v : means) grand += v;
  grand /= m;
  double b = 0.0;
  for (double v : means) b += (v - grand) * (v - grand);
  b *= l / (m - 1.0);
  return std::sqrt(((l - 1.0) / l * w + b / l) / w);
}

PosteriorSummary summarize(const Samples& samples) {
  require(!samples.states.empty(), "summarize: no samples");
  const std::size_t d = samples.states[0].size();
  const double n = static_cast<double>(samples.states.size());
  PosteriorSummary out;
  out.mean.assign(d, 0.0);
  out.std.assign(d, 0.0);
  for (const auto& s : samples.states)
    for (std::size_t i = 0; i < d; ++i) out.mean[i] += s[i];
  for (double& v : out.mean) v /= n;
  for (const auto& s : samples.states)
    for (std::size_t i = 0; i < d; ++i) out.std[i] += (s[i] - out.mean[i]) * (s[i] - out.mean[i]);
  for (double& v : out.std) v = std::sqrt(v / n);
  std::size_t best = 0;
  for (std::size_t i = 1; i < samples.log_posteriors.size(); ++i)
    if (samples.log_posteriors[i] > samples.log_posteriors[best]) best = i;
  out.map = samples.states[best];
  return out;
}

Samples pool(std::span<const Samples> chains) {
  Samples out;
  for (const Samples& c : chains) {
    out.states.insert(out.states.end(), c.states.begin(), c.states.end());
    out.log_posteriors.insert(out.log_posteriors.end(), c.log_posteriors.begin(),
                              c.log_posteriors.end());
  }
  return out;
}

void write_chain_csv(const std::filesystem::path& path, const Chain& chain) {
  std::ostringstream os;
  os << "iter,accepted,log_post";
  const std::size_t d = chain.states.empty() ? 0 : chain.states[0].size();
  for (std::size_t i = 0; i < d; ++i) os << ",lambda_" << i;
  os << '\n';
  for (std::size_t n = 0; n < chain.states.size(); ++n) {
    os << n << ',' << (chain.accepted[n] ? 1 : 0) << ',' << fmt(chain.log_posteriors[n]);
    for (double v : chain.states[n]) os << ',' << fmt(v);
    os << '\n';
  }
  io::write_text(path, os.str());
}

nlohmann::json diagnostics_json(std::span<const Chain> chains, std::span<const Samples> kept) {
  nlohmann::json j;
  double mean_rate = 0.0;
  nlohmann::json rates = nlohmann::json::array();
  for (const Chain& c : chains) {
    mean_rate += c.acceptance_rate;
    rates.push_back(c.acceptance_rate);
  }
  j["acceptance_rate"] = chains.empty() ? 0.0 : mean_rate / static_cast<double>(chains.size());
  j["acceptance_rates"] = rates;
  nlohmann::json r_hat = nlohmann::json::array();
  if (kept.size() >= 2 && !kept[0].states.empty()) {
    for (std::size_t d = 0; d < kept[0].states[0].size(); ++d) {
      try {
        r_hat.push_back(gelman_rubin(kept, d));
      } catch (const ContractError&) {
        r_hat.push_back(nullptr);
      }
    }
  }
  j["r_hat"] = r_hat;
  std::size_t n_kept = 0;
  for (const Samples& s : kept) n_kept += s.states.size();
  j["n_kept"] = n_kept;
  return j;
}

}  // namespace nmcmc::sampler
