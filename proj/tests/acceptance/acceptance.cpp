// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [criterion ...]
//
// Criteria 7 and 8 share one desk-scale pipeline run under DIR/desk; its
// stages are cached, so a second invocation only re-reads the summary.
// Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "jacobian.hpp"
#include "nmcmc/cnf/flow.hpp"
#include "nmcmc/darcy/darcy.hpp"
#include "nmcmc/field/random_field.hpp"
#include "nmcmc/pipeline/dataset.hpp"
#include "nmcmc/pipeline/pipeline.hpp"
#include "nmcmc/sampler/demcmc.hpp"
#include "nmcmc/vae/ivae.hpp"
#include "sampler_stubs.hpp"

namespace fs = std::filesystem;
using namespace nmcmc;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<double> normal_vector(std::size_t n, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

nn::Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng) {
  std::normal_distribution<double> n01;
  nn::Tensor t(r, c);
  for (double& v : t.data()) v = n01(rng);
  return t;
}

cnf::FlowArchitecture small_flow(std::size_t latent, std::size_t par, std::size_t layers) {
  cnf::FlowArchitecture a;
  a.latent_dim = latent;
  a.par_dim = par;
  a.layer_count = layers;
  a.conditioner_widths = {6, 5};
  a.embed_width = 5;
  a.hidden_width = 4;
  return a;
}

// Perturbed Xavier weights so the stack is far from the identity map.
cnf::FlowStack random_stack(const cnf::FlowArchitecture& a, std::uint64_t seed) {
  Rng rng(seed);
  cnf::FlowStack s = cnf::FlowStack::xavier(a, rng);
  std::normal_distribution<double> n01;
  for (nn::Tensor* p : s.parameters())
    for (double& v : p->data()) v += 0.1 * n01(rng);
  return s;
}

Outcome flow_correctness(const fs::path&) {
  double round_trip = 0.0;
  {
    const cnf::FlowStack s = random_stack(small_flow(4, 3, 8), 101);
    Rng rng(102);
    for (int trial = 0; trial < 1000; ++trial) {
      const auto h = normal_vector(4, rng, 2.0), l = normal_vector(3, rng);
      const auto back = cnf::flow_inverse(s, cnf::flow_forward(s, h, l).z, l);
      for (std::size_t i = 0; i < h.size(); ++i) round_trip = std::max(round_trip, std::abs(back[i] - h[i]));
    }
  }
  double log_det = 0.0;
  for (std::size_t dim : {2u, 4u, 6u}) {
    const cnf::FlowStack s = random_stack(small_flow(dim, 3, 6), 110 + dim);
    Rng rng(120 + dim);
    for (int trial = 0; trial < 10; ++trial) {
      const auto h = normal_vector(dim, rng), l = normal_vector(3, rng);
      const double analytic = cnf::flow_forward(s, h, l).log_det;
      const double numeric = testing::numerical_log_abs_det(
          [&](std::span<const double> v) { return cnf::flow_forward(s, v, l).z; }, h);
      log_det = std::max(log_det, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return {round_trip < 1e-8 && log_det < 1e-5,
          fmt("round trip %.2e, log-det rel %.2e", round_trip, log_det)};
}

Outcome gradient_suite(const fs::path&) {
  double nll = 0.0;
  {
    cnf::FlowStack s = random_stack(small_flow(4, 3, 3), 201);
    Rng rng(202);
    const nn::Tensor h = random_tensor(5, 4, rng), l = random_tensor(5, 3, rng);
    nn::Graph g;
    g.backward(cnf::nll_loss_graph(g, s, h, l));
    for (nn::Tensor* p : s.parameters()) {
      const nn::Tensor numeric =
          testing::central_difference(*p, [&] { return cnf::nll_loss(s, h, l); });
      nll = std::max(nll, testing::relative_error(g.gradient_of(p), numeric));
    }
  }
  double ivae = 0.0;
  {
    vae::IVaeArchitecture a;
    a.x_dim = 5;
    a.latent_dim = 2;
    a.par_dim = 3;
    a.encoder_hidden = {4};
    a.decoder_hidden = {4};
    a.predictor_hidden = {4};
    a.beta_kl = 0.3;
    a.beta_pred = 0.7;
    a.sigma_x = 0.8;
    Rng rng(211);
    vae::IVaeModel m = vae::IVaeModel::xavier(a, rng);
    const nn::Tensor x = random_tensor(4, 5, rng), lam = random_tensor(4, 3, rng),
                     eps = random_tensor(4, 2, rng);
    nn::Graph g;
    g.backward(vae::ivae_loss_graph(g, m, vae::standardize(m, x), lam, eps).total);
    for (nn::Tensor* p : m.parameters()) {
      const nn::Tensor numeric =
          testing::central_difference(*p, [&] { return vae::ivae_loss(m, x, lam, eps).total; });
      ivae = std::max(ivae, testing::relative_error(g.gradient_of(p), numeric));
    }
  }
  return {nll < 1e-4 && ivae < 1e-4, fmt("nll_loss %.2e, ivae_loss %.2e", nll, ivae)};
}

Outcome kl_closed_form(const fs::path&) {
  Rng rng(301);
  std::uniform_real_distribution<double> um(-1.5, 1.5), uv(-1.0, 1.0);
  std::normal_distribution<double> n01;
  constexpr std::size_t kDim = 4;
  constexpr int kDraws = 100000;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    vae::LatentGaussian lat;
    for (std::size_t j = 0; j < kDim; ++j) {
      lat.mean.push_back(um(rng));
      lat.log_variance.push_back(uv(rng));
    }
    // E_q[log q(h) - log p(h)] with h = mu + sigma * eps.
    double acc = 0.0;
    std::vector<double> eps(kDim);
    for (int d = 0; d < kDraws; ++d) {
      for (double& e : eps) e = n01(rng);
      const auto h = vae::reparameterize(lat, eps);
      for (std::size_t j = 0; j < kDim; ++j)
        acc += -0.5 * lat.log_variance[j] - 0.5 * eps[j] * eps[j] + 0.5 * h[j] * h[j];
    }
    const double closed = vae::kl_term(lat);
    worst = std::max(worst, std::abs(acc / kDraws - closed) / closed);
  }
  return {worst < 0.01, fmt("worst relative gap over 20 cases %.4f", worst)};
}

Outcome darcy_solver(const fs::path&) {
  using namespace darcy;
  double linear = 0.0;
  for (std::size_t n : {11u, 21u, 41u, 61u}) {
    const auto m = StructuredMesh::unit_square(n);
    const auto sol = solve_heads(m, std::vector<double>(m.node_count(), 0.7));
    for (std::size_t v = 0; v < m.node_count(); ++v)
      linear = std::max(linear, std::abs(sol.h[v] - (1.0 - m.coordinates[v][0])));
  }

  // Series resistances: the interface head is a / (a + b).
  bool band_ok = true;
  double band = 0.0;
  const double a = 1.0, b = 4.0;
  for (std::size_t n : {21u, 41u}) {
    const auto m = StructuredMesh::unit_square(n);
    std::vector<double> t(m.node_count());
    for (std::size_t v = 0; v < t.size(); ++v) {
      const double x1 = m.coordinates[v][0];
      t[v] = std::abs(x1 - 0.5) < 1e-12 ? 0.5 * (a + b) : (x1 < 0.5 ? a : b);
    }
    const auto sol = solve_heads(m, t);
    const double gap = std::abs(sol.h[m.node((n - 1) / 2, (n - 1) / 2)] - a / (a + b));
    band_ok = band_ok && gap <= 2.0 * m.element_size();
    band = std::max(band, gap / m.element_size());
  }

  const auto m = StructuredMesh::unit_square(21);
  const auto basis = field::truncate_basis(
      field::eigendecompose_descending(field::build_covariance(m.coordinates, 0.25)), 8, 1.0, 1.0);
  Rng rng(401);
  double flux = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto t = field::sample_log_field(basis, normal_vector(8, rng)).t;
    const auto f = boundary_fluxes(m, t, solve_heads(m, t).h);
    flux = std::max(flux, std::abs(f.inflow - f.outflow) / f.inflow);
  }
  return {linear <= 1e-9 && band_ok && flux <= 1e-6,
          fmt("1-x1 %.2e, interface %.2f h, flux balance %.2e", linear, band, flux)};
}

Outcome kl_truncation(const fs::path& work) {
  const field::BasisSpec spec{61, 0.25, 14, 1.0, 1.0};
  const auto model = pipeline::build_forward_model(spec, work / "basis_61.bin");
  const double f = model.basis.captured_fraction;
  return {std::abs(f - 0.97) <= 0.02, fmt("61x61, l = 0.25, 14 modes capture %.4f", f)};
}

Outcome sampler_oracles(const fs::path&) {
  using namespace sampler;
  sampler::SamplerConfig cfg;
  cfg.chain_length = 50000;

  cfg.seed = 501;
  const testing::ConstantLikelihood flat(2, 2);
  const Chain pc = run_chain(vae::LatentGaussian{{0.0, 0.0}, {0.0, 0.0}}, flat,
                             PriorSpec::standard_normal(2), cfg);
  const PosteriorSummary ps = summarize(burn_and_thin(pc, cfg.effective_burn_in(), 1));
  double prior_mean = 0.0, prior_var = 0.0;
  for (std::size_t d = 0; d < 2; ++d) {
    prior_mean = std::max(prior_mean, std::abs(ps.mean[d]));
    prior_var = std::max(prior_var, std::abs(ps.std[d] * ps.std[d] - 1.0));
  }

  // N(h; lambda, I) with h' pinned at mu and a N(0, I) prior: mean mu / 2.
  cfg.seed = 502;
  const testing::GaussianLikelihood gauss(2);
  const std::vector<double> mu{2.0, -1.5};
  const Chain cc = run_chain(vae::LatentGaussian{mu, {-50.0, -50.0}}, gauss,
                             PriorSpec::standard_normal(2), cfg);
  const PosteriorSummary cs = summarize(burn_and_thin(cc, cfg.effective_burn_in(), 1));
  double conj = 0.0;
  for (std::size_t d = 0; d < 2; ++d)
    conj = std::max(conj, std::abs(cs.mean[d] - mu[d] / 2.0) / std::abs(mu[d] / 2.0));

  Rng rng(503);
  std::normal_distribution<double> n01;
  Samples iid[2];
  for (Samples& s : iid)
    for (int i = 0; i < 10000; ++i) {
      s.states.push_back({n01(rng)});
      s.log_posteriors.push_back(0.0);
    }
  const double r_hat = gelman_rubin(iid, 0);

  return {prior_mean < 0.05 && prior_var < 0.05 && conj < 0.05 && r_hat < 1.01,
          fmt("prior |mean| %.3f |var-1| %.3f, conjugate mean rel %.3f, iid R-hat %.4f", prior_mean,
              prior_var, conj, r_hat)};
}

// The desk run backing criteria 7 and 8.
const nlohmann::json& desk_summary(const fs::path& work) {
  static std::optional<nlohmann::json> summary;
  if (!summary) {
    pipeline::RunConfig cfg = pipeline::RunConfig::desk();
    cfg.out_dir = work / "desk";
    std::ostringstream log;
    summary = pipeline::run_pipeline(cfg, pipeline::Stage::diagnose, &log).summary;
  }
  return *summary;
}

Outcome cnf_separation(const fs::path& work) {
  const auto& sep = desk_summary(work).at("separation");
  const double gap = sep.at("gap").get<double>();
  return {gap > 0.0, fmt("held-out mean log-likelihood %.3f correct vs %.3f permuted, gap %.3f",
                         sep.at("mean_ll_correct").get<double>(),
                         sep.at("mean_ll_permuted").get<double>(), gap)};
}

Outcome desk_inversion(const fs::path& work) {
  const auto& s = desk_summary(work);
  const double mean = s.at("relative_error").at("mean").at("median").get<double>();
  const double map = s.at("relative_error").at("map").at("median").get<double>();
  const auto& rho = s.at("spearman_mode_std");
  const bool mean_ok = mean <= 0.35, map_ok = std::abs(map - mean) <= 0.05;
  const bool rho_ok = rho.is_number() && rho.get<double>() > 0.0;
  const auto mark = [](bool ok) { return ok ? "ok" : "MISS"; };
  return {mean_ok && map_ok && rho_ok,
          fmt("median rel error mean %.3f <= 0.35 %s, |map - mean| %.3f <= 0.05 %s, "
              "spearman(mode, std) %.3f > 0 %s",
              mean, mark(mean_ok), std::abs(map - mean), mark(map_ok),
              rho.is_number() ? rho.get<double>() : std::nan(""), mark(rho_ok))};
}

Outcome reproducibility(const fs::path& work) {
  std::string dumps[2];
  for (int run = 0; run < 2; ++run) {
    pipeline::RunConfig cfg = pipeline::RunConfig::smoke();
    cfg.out_dir = work / (run == 0 ? "smoke_a" : "smoke_b");
    fs::remove_all(cfg.out_dir);
    dumps[run] = pipeline::run_pipeline(cfg).summary.dump();
  }
  return {dumps[0] == dumps[1], fmt("summary JSON %zu bytes, %s", dumps[0].size(),
                                    dumps[0] == dumps[1] ? "identical" : "differs")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(const fs::path&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_work";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work" && i + 1 < argc) work = argv[++i];
    else only.insert(std::stoi(arg));
  }
  fs::create_directories(work);

  const Criterion criteria[] = {
      {1, "flow correctness", flow_correctness},
      {2, "gradient suite", gradient_suite},
      {3, "KL closed form vs Monte Carlo", kl_closed_form},
      {4, "Darcy solver", darcy_solver},
      {5, "KL truncation on 61x61", kl_truncation},
      {6, "sampler oracles", sampler_oracles},
      {7, "CNF label separation (desk)", cnf_separation},
      {8, "desk end-to-end inversion", desk_inversion},
      {9, "smoke reproducibility", reproducibility},
  };

  int failed = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && !only.contains(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(work);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] %d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed;
}
