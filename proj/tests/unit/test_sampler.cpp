#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "nmcmc/errors.hpp"
#include "nmcmc/sampler/demcmc.hpp"
#include "sampler_stubs.hpp"

using namespace nmcmc;
using namespace nmcmc::sampler;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Samples make_samples(std::vector<std::vector<double>> states, std::vector<double> lp = {}) {
  if (lp.empty()) lp.assign(states.size(), 0.0);
  return {std::move(states), std::move(lp)};
}

Samples normal_samples(double mean, std::size_t n, Rng& rng) {
  std::normal_distribution<double> d(mean, 1.0);
  Samples s;
  for (std::size_t i = 0; i < n; ++i) {
    s.states.push_back({d(rng)});
    s.log_posteriors.push_back(0.0);
  }
  return s;
}

}  // namespace

TEST_CASE("default_gamma") {
  // Reference values from 2.38 / sqrt(2 N_par) evaluated independently.
  CHECK(default_gamma(14) == doctest::Approx(0.449778).epsilon(1e-6));
  CHECK(default_gamma(6) == doctest::Approx(0.687047).epsilon(1e-6));
  CHECK(default_gamma(3) == doctest::Approx(0.971631).epsilon(1e-6));
  for (std::size_t n = 1; n < 40; ++n)
    CHECK(default_gamma(n) * default_gamma(n) * 2.0 * n == doctest::Approx(2.38 * 2.38).epsilon(1e-14));
  CHECK_THROWS_AS(default_gamma(0), ContractError);
}

TEST_CASE("propose") {
  Rng rng(1);
  Archive a;
  a.push(std::vector<double>{1.0, 0.0});
  a.push(std::vector<double>{0.0, 1.0});
  const std::vector<double> cur{0.0, 0.0};
  CHECK(propose(cur, a, 0.0, 0.0, rng) == cur);

  bool seen_plus = false, seen_minus = false;
  for (int i = 0; i < 50; ++i) {
    const auto p = propose(cur, a, 0.5, 0.0, rng);
    if (p == std::vector<double>{0.5, -0.5}) seen_plus = true;
    else if (p == std::vector<double>{-0.5, 0.5}) seen_minus = true;
    else FAIL("unexpected proposal");
  }
  CHECK(seen_plus);
  CHECK(seen_minus);

  Archive same;
  same.push(std::vector<double>{3.0, 3.0});
  same.push(std::vector<double>{3.0, 3.0});
  CHECK(propose(cur, same, 0.9, 0.0, rng) == cur);

  Archive small;
  small.push(std::vector<double>{1.0, 1.0});
  CHECK_THROWS_AS(propose(cur, small, 0.5, 0.0, rng), ContractError);

  // Jitter has the configured spread.
  double sq = 0.0;
  for (int i = 0; i < 20000; ++i) sq += std::pow(propose(cur, same, 0.5, 0.01, rng)[0], 2);
  CHECK(std::sqrt(sq / 20000) == doctest::Approx(0.01).epsilon(0.03));
}

TEST_CASE("acceptance_prob") {
  CHECK(acceptance_prob(-3.0, -3.0) == 1.0);
  CHECK(acceptance_prob(-1.0, -3.0) == 1.0);
  CHECK(acceptance_prob(-std::numbers::ln2, 0.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(acceptance_prob(-kInf, 0.0) == 0.0);
  CHECK(acceptance_prob(0.0, -kInf) == 1.0);
  CHECK_THROWS_AS(acceptance_prob(-kInf, -kInf), ContractError);

  Rng rng(2);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng);
    CHECK(acceptance_prob(a, b) * std::exp(b) ==
          doctest::Approx(acceptance_prob(b, a) * std::exp(a)).epsilon(1e-12));
  }
}

TEST_CASE("priors") {
  const PriorSpec n = PriorSpec::standard_normal(2);
  CHECK(n.log_density(std::vector<double>{1.0, 1.0}) == -1.0);
  const PriorSpec u = PriorSpec::uniform_box({0.0, -1.0}, {1.0, 1.0});
  CHECK(u.log_density(std::vector<double>{0.5, 0.0}) == 0.0);
  CHECK(u.log_density(std::vector<double>{1.5, 0.0}) == -kInf);
  CHECK_THROWS_AS(PriorSpec::uniform_box({0.0}, {0.0}), ContractError);
  CHECK_THROWS_AS(PriorSpec::uniform_box({0.0}, {kInf}), ContractError);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) CHECK(u.log_density(u.sample(rng)) == 0.0);
}

TEST_CASE("constant likelihood recovers the prior") {
  const testing::ConstantLikelihood like(2, 2);
  const vae::LatentGaussian q{{0.0, 0.0}, {0.0, 0.0}};
  SamplerConfig cfg;
  cfg.chain_length = 50000;
  cfg.seed = 4;
  for (ProposalKind kind : {ProposalKind::differential_evolution, ProposalKind::gaussian_baseline}) {
    cfg.proposal = kind;
    cfg.baseline_std = 1.5;
    const Chain c = run_chain(q, like, PriorSpec::standard_normal(2), cfg);
    const PosteriorSummary s = summarize(burn_and_thin(c, cfg.effective_burn_in(), 1));
    CAPTURE(to_string(kind));
    for (std::size_t d = 0; d < 2; ++d) {
      CHECK(std::abs(s.mean[d]) < 0.05);
      CHECK(std::abs(s.std[d] * s.std[d] - 1.0) < 0.05);
    }
  }
}

TEST_CASE("conjugate Gaussian posterior") {
  // p(h | lambda) = N(h; lambda, I), h' fixed at mu, prior N(0, I):
  // posterior N(mu / 2, I / 2).
  const testing::GaussianLikelihood like(2);
  const std::vector<double> mu{2.0, -1.5};
  const vae::LatentGaussian q{mu, {-50.0, -50.0}};
  SamplerConfig cfg;
  cfg.chain_length = 50000;
  cfg.seed = 5;
  const Chain c = run_chain(q, like, PriorSpec::standard_normal(2), cfg);
  const PosteriorSummary s = summarize(burn_and_thin(c, cfg.effective_burn_in(), 1));
  MESSAGE("posterior mean " << s.mean[0] << ", " << s.mean[1] << "; acceptance " << c.acceptance_rate);
  for (std::size_t d = 0; d < 2; ++d) {
    CHECK(s.mean[d] == doctest::Approx(mu[d] / 2.0).epsilon(0.05));
    CHECK(s.std[d] * s.std[d] == doctest::Approx(0.5).epsilon(0.05));
  }
}

TEST_CASE("degenerate dynamics keep the chain fixed") {
  const testing::GaussianLikelihood like(2);
  const vae::LatentGaussian q{{0.3, 0.1}, {0.0, 0.0}};
  SamplerConfig cfg;
  cfg.chain_length = 500;
  cfg.gamma = 0.0;
  cfg.epsilon_std = 0.0;
  const Chain c = run_chain(q, like, PriorSpec::standard_normal(2), cfg);
  CHECK(c.acceptance_rate == 1.0);
  for (const auto& s : c.states) CHECK(s == c.states[0]);
}

TEST_CASE("chain bookkeeping") {
  const testing::GaussianLikelihood like(3);
  const vae::LatentGaussian q{{0.3, 0.1, -0.2}, {-1.0, -1.0, -1.0}};
  SamplerConfig cfg;
  cfg.chain_length = 1000;
  cfg.seed = 6;
  const Chain a = run_chain(q, like, PriorSpec::standard_normal(3), cfg, 0);
  const Chain b = run_chain(q, like, PriorSpec::standard_normal(3), cfg, 0);
  const Chain other = run_chain(q, like, PriorSpec::standard_normal(3), cfg, 1);
  CHECK(a.states == b.states);
  CHECK(a.log_posteriors == b.log_posteriors);
  CHECK(a.states != other.states);

  CHECK(a.states.size() == 1000);
  CHECK(a.accepted[0]);
  std::size_t acc = 0;
  for (bool f : a.accepted) acc += f ? 1 : 0;
  CHECK(a.acceptance_rate == doctest::Approx(static_cast<double>(acc) / 1000.0));
  // max(2 * 3 + 2, 2) initial draws, lambda(1), then one state every 10 iterations.
  CHECK(a.archive_size == 8 + 1 + 100);
  for (double lp : a.log_posteriors) CHECK(std::isfinite(lp));
  for (std::size_t n = 1; n < a.states.size(); ++n)
    if (!a.accepted[n]) CHECK(a.states[n] == a.states[n - 1]);
}

TEST_CASE("uniform prior support is respected") {
  const testing::GaussianLikelihood like(2);
  const vae::LatentGaussian q{{3.0, 3.0}, {-2.0, -2.0}};
  SamplerConfig cfg;
  cfg.chain_length = 5000;
  cfg.seed = 7;
  const PriorSpec box = PriorSpec::uniform_box({-1.0, -1.0}, {1.0, 1.0});
  const Chain c = run_chain(q, like, box, cfg);
  for (const auto& s : c.states) CHECK(box.log_density(s) == 0.0);
}

TEST_CASE("initialization failure") {
  const testing::BrokenLikelihood like(2, 2);
  const vae::LatentGaussian q{{0.0, 0.0}, {0.0, 0.0}};
  SamplerConfig cfg;
  cfg.chain_length = 10;
  CHECK_THROWS_AS(run_chain(q, like, PriorSpec::standard_normal(2), cfg), EvaluationError);
}

TEST_CASE("config validation") {
  SamplerConfig cfg;
  cfg.chain_length = 10;
  cfg.burn_in = 10;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg.burn_in = 2;
  cfg.thin = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg.thin = 1;
  cfg.archive_period = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg.archive_period = 1;
  cfg.archive_init_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  CHECK(parse_proposal_kind("gaussian_baseline") == ProposalKind::gaussian_baseline);
  CHECK_THROWS_AS(parse_proposal_kind("nuts"), ContractError);
}

TEST_CASE("gelman_rubin") {
  Rng rng(8);
  const Samples iid[] = {normal_samples(0.0, 10000, rng), normal_samples(0.0, 10000, rng)};
  CHECK(gelman_rubin(iid, 0) < 1.01);
  const Samples apart[] = {normal_samples(0.0, 10000, rng), normal_samples(10.0, 10000, rng)};
  CHECK(gelman_rubin(apart, 0) > 3.0);
  const Samples one = normal_samples(0.0, 100, rng);
  const Samples twice[] = {one, one};
  CHECK(gelman_rubin(twice, 0) == doctest::Approx(std::sqrt(99.0 / 100.0)).epsilon(1e-12));
  const Samples flat = make_samples(std::vector<std::vector<double>>(20, {1.0}));
  const Samples flats[] = {flat, flat};
  CHECK_THROWS_AS(gelman_rubin(flats, 0), ContractError);
  const Samples single[] = {one};
  CHECK_THROWS_AS(gelman_rubin(single, 0), ContractError);
}

TEST_CASE("burn_and_thin") {
  Chain c;
  for (int i = 0; i < 10; ++i) {
    c.states.push_back({static_cast<double>(i)});
    c.log_posteriors.push_back(-i);
    c.accepted.push_back(true);
  }
  CHECK(burn_and_thin(c, 0, 1).states == c.states);
  const Samples s = burn_and_thin(c, 4, 2);
  CHECK(s.states == std::vector<std::vector<double>>{{4.0}, {6.0}, {8.0}});
  CHECK(s.log_posteriors == std::vector<double>{-4.0, -6.0, -8.0});
  CHECK(burn_and_thin(c, 0, 10).states.size() == 1);
  CHECK_THROWS_AS(burn_and_thin(c, 10, 1), ContractError);
}

TEST_CASE("summarize") {
  const PosteriorSummary one = summarize(make_samples({{1.0, 2.0}}));
  CHECK(one.mean == std::vector<double>{1.0, 2.0});
  CHECK(one.std == std::vector<double>{0.0, 0.0});
  CHECK(one.map == std::vector<double>{1.0, 2.0});
  const PosteriorSummary sym = summarize(make_samples({{-1.0, -1.0}, {1.0, 1.0}}));
  CHECK(sym.mean == std::vector<double>{0.0, 0.0});
  CHECK(sym.std == std::vector<double>{1.0, 1.0});
  const PosteriorSummary map = summarize(make_samples({{1.0}, {2.0}, {3.0}}, {-1.0, -5.0, -0.5}));
  CHECK(map.map == std::vector<double>{3.0});
  CHECK_THROWS_AS(summarize(Samples{}), ContractError);
}

TEST_CASE("flow likelihood adapter") {
  cnf::FlowArchitecture a;
  a.latent_dim = 4;
  a.par_dim = 2;
  a.layer_count = 2;
  a.conditioner_widths = {4};
  a.embed_width = 3;
  a.hidden_width = 3;
  Rng rng(9);
  const cnf::FlowStack flow = cnf::FlowStack::xavier(a, rng);
  const FlowLikelihood like(flow);
  const std::vector<double> lam{0.2, -0.4}, h{0.1, 0.2, 0.3, 0.4};
  CHECK(like.at(lam)->log_density(h) == cnf::log_prob(flow, h, lam));
}

TEST_CASE("exports") {
  const testing::GaussianLikelihood like(2);
  const vae::LatentGaussian q{{0.3, 0.1}, {-1.0, -1.0}};
  SamplerConfig cfg;
  cfg.chain_length = 200;
  const Chain c0 = run_chain(q, like, PriorSpec::standard_normal(2), cfg, 0);
  const Chain c1 = run_chain(q, like, PriorSpec::standard_normal(2), cfg, 1);
  const auto dir = std::filesystem::temp_directory_path() / "nmcmc_test_sampler";
  std::filesystem::create_directories(dir);
  write_chain_csv(dir / "chain.csv", c0);
  std::ifstream in(dir / "chain.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "iter,accepted,log_post,lambda_0,lambda_1");
  CHECK(first.rfind("0,1,", 0) == 0);
  std::filesystem::remove_all(dir);

  const Chain chains[] = {c0, c1};
  const Samples kept[] = {burn_and_thin(c0, 50, 5), burn_and_thin(c1, 50, 5)};
  const auto j = diagnostics_json(chains, kept);
  CHECK(j.at("r_hat").size() == 2);
  CHECK(j.at("n_kept").get<std::size_t>() == 60);
  CHECK(j.at("acceptance_rate").get<double>() ==
        doctest::Approx(0.5 * (c0.acceptance_rate + c1.acceptance_rate)));
}
