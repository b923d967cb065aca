// Command-line front end for the inversion pipeline.
//
// Exit codes: 0 success, 2 configuration error, 3 convergence or evaluation
// error, 1 anything else.

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nmcmc/errors.hpp"
#include "nmcmc/pipeline/pipeline.hpp"

namespace {

using nmcmc::pipeline::RunConfig;
using nmcmc::pipeline::Stage;

constexpr int kExitConfig = 2;
constexpr int kExitNumerics = 3;

struct Options {
  std::string preset = "desk";
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> overrides;
};

RunConfig resolve(const Options& o) {
  RunConfig cfg = RunConfig::from_preset(o.preset);
  if (!o.config_path.empty()) cfg = nmcmc::pipeline::load_config(o.config_path, cfg);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw nmcmc::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  return cfg;
}

void print_summary(const nlohmann::json& s) {
  if (s.is_null()) return;
  const auto& err = s.at("relative_error");
  std::printf("status: %s\n", s.at("status").get<std::string>().c_str());
  std::printf("median relative error: mean %.4f, map %.4f, predictor %.4f\n",
              err.at("mean").at("median").get<double>(), err.at("map").at("median").get<double>(),
              err.at("predictor").at("median").get<double>());
  std::printf("acceptance rate: %.3f\n", s.at("acceptance_rate").get<double>());
  std::printf("log-likelihood gap (correct - permuted): %.4f\n",
              s.at("separation").at("gap").get<double>());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Likelihood-free groundwater inversion: data generation, VAE and flow training, "
               "DE-MCMC sampling and diagnostics."};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_option("--preset", opt.preset, "Base configuration: desk, smoke or full")
      ->check(CLI::IsMember({"desk", "smoke", "full"}));
  app.add_option("--config", opt.config_path, "key = value config file applied over the preset");
  app.add_option("--seed", opt.seed, "Master seed");
  app.add_option("--out", opt.out_dir, "Output directory");
  app.add_option("--set", opt.overrides, "Extra key=value setting (repeatable)");

  const std::map<std::string, std::pair<Stage, std::string>> commands{
      {"generate-data", {Stage::generate, "Simulate the training and test datasets"}},
      {"train-vae", {Stage::train_vae, "Train the informed VAE"}},
      {"train-cnf", {Stage::train_cnf, "Encode the training set and train the conditional flow"}},
      {"sample", {Stage::sample, "Run DE-MCMC chains for the test observations"}},
      {"diagnose", {Stage::diagnose, "Write the summary and diagnostic tables"}},
      {"pipeline", {Stage::diagnose, "Run every stage"}}};
  std::map<CLI::App*, Stage> stage_of;
  for (const auto& [name, spec] : commands) stage_of[app.add_subcommand(name, spec.second)] = spec.first;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    const RunConfig cfg = resolve(opt);
    const Stage until = stage_of.at(app.get_subcommands().front());
    const auto result = nmcmc::pipeline::run_pipeline(cfg, until, &std::cout);
    print_summary(result.summary);
    return 0;
  } catch (const nmcmc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nmcmc::ConvergenceError& e) {
    std::cerr << "convergence error: " << e.what() << '\n';
    return kExitNumerics;
  } catch (const nmcmc::EvaluationError& e) {
    std::cerr << "evaluation error: " << e.what() << '\n';
    return kExitNumerics;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
