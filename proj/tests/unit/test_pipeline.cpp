#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nmcmc/errors.hpp"
#include "nmcmc/io.hpp"
#include "nmcmc/pipeline/analysis.hpp"
#include "nmcmc/pipeline/config.hpp"
#include "nmcmc/pipeline/dataset.hpp"
#include "nmcmc/pipeline/pipeline.hpp"

using namespace nmcmc;
using namespace nmcmc::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("nmcmc_test_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const ForwardModel& small_model() {
  static const ForwardModel m = build_forward_model({11, 0.25, 4, 1.0, 1.0});
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny_run(const fs::path& out) {
  RunConfig c = RunConfig::smoke();
  c.problem.mode_count = 3;
  c.train_samples = 120;
  c.test_samples = 20;
  c.observations = 2;
  c.vae_train.max_epochs = 4;
  c.cnf_train.max_epochs = 4;
  c.sampler.chain_length = 400;
  c.seed = 17;
  c.out_dir = out;
  return c;
}

}  // namespace

TEST_CASE("generate_dataset") {
  const ForwardModel& m = small_model();
  Rng rng(1);
  CHECK(generate_dataset(m, 0, rng).size() == 0);

  // lambda = 0 gives the constant field, whose heads are 1 - x1 at the sensors.
  const Dataset z = simulate(m, Tensor(1, 4, 0.0));
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 9; ++c) CHECK(z.x(0, r * 9 + c) == doctest::Approx(1.0 - 0.1 * (c + 1)).epsilon(1e-9));

  Rng a(5), b(5);
  const Dataset d1 = generate_dataset(m, 12, a, 1);
  const Dataset d2 = generate_dataset(m, 12, b, 4);
  CHECK(d1.x == d2.x);
  CHECK(d1.lambda == d2.lambda);
  CHECK(d1.x.cols() == 81);
  CHECK(d1.lambda.cols() == 4);
  CHECK(d1.metadata.at("forward_model").at("mesh_n") == 11);

  CHECK_THROWS_AS(simulate(m, Tensor(2, 3, 0.0)), DimensionError);
  CHECK_THROWS_AS(build_forward_model({20, 0.25, 4, 1.0, 1.0}), ConfigError);
}

TEST_CASE("dataset files") {
  const fs::path dir = scratch("dataset");
  Rng rng(2);
  Dataset d = generate_dataset(small_model(), 7, rng);
  d.metadata["seed"] = 2;
  save_dataset(dir / "d.ds", d);
  const Dataset back = load_dataset(dir / "d.ds");
  CHECK(back.x == d.x);
  CHECK(back.lambda == d.lambda);
  CHECK(back.metadata == d.metadata);

  // Truncated payload.
  const auto full = fs::file_size(dir / "d.ds");
  fs::copy_file(dir / "d.ds", dir / "short.ds");
  fs::resize_file(dir / "short.ds", full - 8);
  CHECK_THROWS_AS(load_dataset(dir / "short.ds"), FormatError);

  // Version bump.
  const io::FramedFile f = io::read_framed(dir / "d.ds");
  nlohmann::json h = f.header;
  h["format_version"] = 2;
  io::write_framed(dir / "v2.ds", h, f.payload);
  CHECK_THROWS_WITH_AS(load_dataset(dir / "v2.ds"), doctest::Contains("version"), FormatError);

  CHECK_THROWS_AS(load_dataset(dir / "absent.ds"), FormatError);
  Dataset bad = d;
  bad.lambda = Tensor(3, 4);
  CHECK_THROWS_AS(save_dataset(dir / "bad.ds", bad), DimensionError);
  fs::remove_all(dir);
}

TEST_CASE("add_noise") {
  Rng rng(3);
  Dataset d;
  d.x = Tensor(10000, 3);
  d.lambda = Tensor(10000, 1);
  std::normal_distribution<double> n01;
  for (std::size_t i = 0; i < d.size(); ++i) {
    d.x(i, 0) = 2.0 + n01(rng);
    d.x(i, 1) = 0.0;
    d.x(i, 2) = -5.0;
  }
  auto rms = [&](std::size_t j) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) s += d.x(i, j) * d.x(i, j);
    return std::sqrt(s / static_cast<double>(d.size()));
  };

  const Dataset quiet = add_noise(d, 1e12, rng);
  for (std::size_t j : {0, 2})
    for (std::size_t i = 0; i < d.size(); ++i)
      CHECK(std::abs(quiet.x(i, j) - d.x(i, j)) < 1e-9 * rms(j));

  const Dataset loud = add_noise(d, 1.0, rng);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(loud.x(i, 1) == 0.0);
  for (std::size_t j : {0, 2}) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double e = loud.x(i, j) - d.x(i, j);
      s += e;
      s2 += e * e;
    }
    const double n = static_cast<double>(d.size());
    const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
    CHECK(sd == doctest::Approx(rms(j)).epsilon(0.05));
  }
  CHECK(loud.lambda == d.lambda);
  CHECK(loud.metadata.at("noise").at("snr") == 1.0);
  CHECK_THROWS_AS(add_noise(d, 0.0, rng), ContractError);
}

TEST_CASE("relative_error") {
  const std::vector<double> t{1.0, -2.0, 3.0}, zero(3, 0.0), twice{2.0, -4.0, 6.0};
  CHECK(relative_error(t, t) == 0.0);
  CHECK(relative_error(t, zero) == doctest::Approx(1.0));
  CHECK(relative_error(t, twice) == doctest::Approx(1.0));
  CHECK(relative_error(std::vector<double>{3.0, 4.0}, std::vector<double>{0.0, 4.0}) == doctest::Approx(0.6));
  CHECK_THROWS_AS(relative_error(zero, t), ContractError);
  CHECK_THROWS_AS(relative_error(t, std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("pca_project") {
  Rng rng(4);
  std::normal_distribution<double> n01;
  // Points on the line p0 + s * u.
  Tensor line(50, 3);
  for (std::size_t i = 0; i < 50; ++i) {
    const double s = n01(rng);
    line(i, 0) = 1.0 + s * 2.0;
    line(i, 1) = -1.0 + s * 1.0;
    line(i, 2) = 0.5 - s * 2.0;
  }
  const PcaProjection p = pca_project(line, 2);
  CHECK(p.explained_ratio[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(p.explained_ratio[1]) < 1e-12);
  CHECK(std::abs(p.axes(0, 0)) == doctest::Approx(2.0 / 3.0));
  CHECK(p.axes(0, 0) > 0.0);

  Tensor cloud(40, 4);
  for (double& v : cloud.data()) v = n01(rng);
  const PcaProjection full = pca_project(cloud, 4);
  for (std::size_t k = 0; k < 4; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 40; ++i) mean += full.coords(i, k);
    CHECK(std::abs(mean / 40.0) < 1e-12);
  }
  for (std::size_t k = 1; k < 4; ++k) CHECK(full.explained_variance[k] <= full.explained_variance[k - 1]);
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t j = i + 1; j < 40; ++j) {
      double d0 = 0.0, d1 = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        d0 += std::pow(cloud(i, c) - cloud(j, c), 2);
        d1 += std::pow(full.coords(i, c) - full.coords(j, c), 2);
      }
      CHECK(std::abs(std::sqrt(d0) - std::sqrt(d1)) < 1e-8);
    }
  CHECK_THROWS_AS(pca_project(cloud, 5), ContractError);
  CHECK_THROWS_AS(pca_project(Tensor(1, 3), 1), ContractError);
}

TEST_CASE("spearman_correlation and median") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  CHECK(spearman_correlation(a, std::vector<double>{2, 4, 8, 16, 32}) == doctest::Approx(1.0));
  CHECK(spearman_correlation(a, std::vector<double>{9, 7, 5, 3, 1}) == doctest::Approx(-1.0));
  // scipy.stats.spearmanr([1,2,3,4,5], [5,6,7,8,7]) = 0.8207826816681233
  CHECK(spearman_correlation(a, std::vector<double>{5, 6, 7, 8, 7}) == doctest::Approx(0.8207826816681233));
  CHECK_THROWS_AS(spearman_correlation(a, std::vector<double>(5, 1.0)), ContractError);

  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK_THROWS_AS(median({}), ContractError);
}

TEST_CASE("config parsing") {
  const RunConfig c = parse_config(R"(# comment line
mesh.n = 31
field.modes = 6   # trailing comment
vae.encoder_hidden = 48, 24
sampler.gamma = 0.3
sampler.burn_in = auto
preset = smoke
seed = 9
)");
  CHECK(c.preset == "smoke");
  CHECK(c.problem.mesh_n == 31);
  CHECK(c.problem.mode_count == 6);
  CHECK(c.vae_arch.encoder_hidden == std::vector<std::size_t>{48, 24});
  CHECK(c.sampler.gamma == 0.3);
  CHECK_FALSE(c.sampler.burn_in.has_value());
  CHECK(c.seed == 9);
  CHECK(c.train_samples == RunConfig::smoke().train_samples);

  CHECK_THROWS_WITH_AS(parse_config("mesh.n = 21\nbogus.key = 1\n"), doctest::Contains("line 2"), ConfigError);
  CHECK_THROWS_AS(parse_config("mesh.n = twenty"), ConfigError);
  CHECK_THROWS_AS(parse_config("mesh.n"), ConfigError);
  CHECK_THROWS_AS(parse_config("sampler.proposal = nuts"), ConfigError);
  CHECK_THROWS_AS(parse_config("vae.activation = swish"), ConfigError);
  CHECK_THROWS_AS(parse_config("preset = huge"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("config validation") {
  RunConfig c = RunConfig::desk();
  c.validate();
  CHECK(c.vae_arch.par_dim == 8);
  CHECK(c.cnf_arch.latent_dim == c.vae_arch.latent_dim);
  CHECK(c.cnf_arch.par_dim == 8);

  auto invalid = [](auto mutate) {
    RunConfig r = RunConfig::desk();
    mutate(r);
    CHECK_THROWS_AS(r.validate(), ConfigError);
  };
  invalid([](RunConfig& r) { r.problem.mesh_n = 20; });
  invalid([](RunConfig& r) { r.problem.mode_count = 0; });
  invalid([](RunConfig& r) { r.test_samples = 5; });
  invalid([](RunConfig& r) { r.chains = 1; });
  invalid([](RunConfig& r) { r.sampler.burn_in = r.sampler.chain_length; });
  invalid([](RunConfig& r) { r.vae_arch.encoder_hidden = {}; });
  invalid([](RunConfig& r) { r.cnf_train.batch_size = 0; });
  invalid([](RunConfig& r) { r.snr = -1.0; });

  RunConfig a = RunConfig::desk(), b = RunConfig::desk();
  b.out_dir = "elsewhere";
  CHECK(a.to_json() == b.to_json());
  b.seed = 1;
  CHECK(a.to_json() != b.to_json());
}

TEST_CASE("pipeline stages, caching and artifacts") {
  const fs::path dir = scratch("run");
  std::ostringstream log1;
  const PipelineResult r1 = run_pipeline(tiny_run(dir), Stage::diagnose, &log1);
  REQUIRE(r1.stages.size() == 6);
  for (const auto& s : r1.stages) CHECK_FALSE(s.cached);

  const nlohmann::json& s = r1.summary;
  CHECK(s.at("r_hat").size() == 3);
  CHECK(s.at("acceptance_rates").size() == 4);
  CHECK(s.at("observations").size() == 2);
  CHECK(s.at("train_test_overlap") == 0);
  CHECK(s.contains("separation"));
  CHECK(s.at("status").get<std::string>() == (s.at("converged").get<bool>() ? "converged" : "not converged"));

  const Dataset train = load_dataset(dir / "train.ds");
  const Dataset latent = load_dataset(dir / "latent.ds");
  CHECK(latent.size() == train.size());
  CHECK(latent.x.all_finite());
  CHECK(fs::exists(dir / "chains" / "obs001_chain1.csv"));
  CHECK(slurp(dir / "separation.csv").rfind("index,ll_correct,ll_permuted\n", 0) == 0);

  // Rerun: everything cached, summary unchanged.
  std::ostringstream log2;
  const PipelineResult r2 = run_pipeline(tiny_run(dir), Stage::diagnose, &log2);
  for (const auto& st : r2.stages) CHECK(st.cached);
  CHECK(log2.str().find("train-cnf cached") != std::string::npos);
  CHECK(r2.summary == r1.summary);
  CHECK(slurp(dir / "stages.log").find("generate cached") != std::string::npos);

  // A sampler change reruns only sample and diagnose.
  RunConfig changed = tiny_run(dir);
  changed.sampler.thin = 2;
  const PipelineResult r3 = run_pipeline(changed, Stage::diagnose);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r3.stages[i].cached);
  CHECK_FALSE(r3.stages[4].cached);
  CHECK_FALSE(r3.stages[5].cached);

  // Stopping early.
  const PipelineResult r4 = run_pipeline(changed, Stage::train_vae);
  CHECK(r4.stages.size() == 2);
  CHECK(r4.summary.is_null());

  // A corrupt upstream artifact fails the stage that reads it, named in the error.
  io::write_text(dir / "ivae.ckpt", "{\"format_version\": 1}\n");
  fs::remove(dir / "stamps" / "encode-dataset.json");
  CHECK_THROWS_WITH_AS(run_pipeline(changed, Stage::diagnose), doctest::Contains("stage encode-dataset"),
                       FormatError);
  fs::remove_all(dir);
}

TEST_CASE("pipeline determinism") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  const nlohmann::json sa = run_pipeline(tiny_run(a)).summary;
  const nlohmann::json sb = run_pipeline(tiny_run(b)).summary;
  CHECK(sa == sb);
  CHECK(slurp(a / "summary.json") == slurp(b / "summary.json"));
  RunConfig other = tiny_run(b);
  other.seed = 18;
  CHECK(run_pipeline(other).summary != sa);
  fs::remove_all(a);
  fs::remove_all(b);
}
