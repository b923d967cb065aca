#include "nmcmc/pipeline/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "nmcmc/darcy/darcy.hpp"
#include "nmcmc/errors.hpp"

namespace nmcmc::pipeline {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string quoted(std::string_view s) { return "'" + std::string(s) + "'"; }

std::size_t parse_count(std::string_view v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("expected a nonnegative integer, got " + quoted(v));
  return out;
}

std::uint64_t parse_u64(std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("expected an unsigned integer, got " + quoted(v));
  return out;
}

double parse_real(std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError("expected a finite real number, got " + quoted(v));
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got " + quoted(v));
}

std::vector<std::size_t> parse_widths(std::string_view v) {
  std::vector<std::size_t> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_count(trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ConfigError("expected a comma-separated list of widths");
  return out;
}

nn::Activation parse_act(std::string_view v) {
  try {
    return nn::parse_activation(v);
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

using Setter = std::function<void(RunConfig&, std::string_view)>;

void add_train_keys(std::map<std::string, Setter, std::less<>>& t, const std::string& ns,
                    nn::TrainConfig RunConfig::*member) {
  t[ns + "batch_size"] = [member](RunConfig& c, std::string_view v) { (c.*member).batch_size = parse_count(v); };
  t[ns + "max_epochs"] = [member](RunConfig& c, std::string_view v) { (c.*member).max_epochs = parse_count(v); };
  t[ns + "lr"] = [member](RunConfig& c, std::string_view v) { (c.*member).initial_lr = parse_real(v); };
  t[ns + "decay_fraction"] = [member](RunConfig& c, std::string_view v) { (c.*member).decay_fraction = parse_real(v); };
  t[ns + "weight_decay"] = [member](RunConfig& c, std::string_view v) { (c.*member).weight_decay = parse_real(v); };
  t[ns + "l2_rate"] = [member](RunConfig& c, std::string_view v) { (c.*member).l2_rate = parse_real(v); };
  t[ns + "patience"] = [member](RunConfig& c, std::string_view v) { (c.*member).patience = parse_count(v); };
  t[ns + "split_fraction"] = [member](RunConfig& c, std::string_view v) { (c.*member).split_fraction = parse_real(v); };
  t[ns + "dropout"] = [member](RunConfig& c, std::string_view v) { (c.*member).dropout = parse_real(v); };
}

const std::map<std::string, Setter, std::less<>>& setters() {
  static const auto table = [] {
    std::map<std::string, Setter, std::less<>> t;
    t["seed"] = [](RunConfig& c, std::string_view v) { c.seed = parse_u64(v); };

    t["mesh.n"] = [](RunConfig& c, std::string_view v) { c.problem.mesh_n = parse_count(v); };
    t["field.lengthscale"] = [](RunConfig& c, std::string_view v) { c.problem.lengthscale = parse_real(v); };
    t["field.modes"] = [](RunConfig& c, std::string_view v) { c.problem.mode_count = parse_count(v); };
    t["field.mean"] = [](RunConfig& c, std::string_view v) { c.problem.mean_value = parse_real(v); };
    t["field.std"] = [](RunConfig& c, std::string_view v) { c.problem.marginal_std = parse_real(v); };

    t["io.out_dir"] = [](RunConfig& c, std::string_view v) { c.out_dir = std::string(v); };
    t["io.train_samples"] = [](RunConfig& c, std::string_view v) { c.train_samples = parse_count(v); };
    t["io.test_samples"] = [](RunConfig& c, std::string_view v) { c.test_samples = parse_count(v); };
    t["io.snr"] = [](RunConfig& c, std::string_view v) { c.snr = parse_real(v); };
    t["io.write_chains"] = [](RunConfig& c, std::string_view v) { c.write_chains = parse_bool(v); };

    t["vae.latent_dim"] = [](RunConfig& c, std::string_view v) { c.vae_arch.latent_dim = parse_count(v); };
    t["vae.encoder_hidden"] = [](RunConfig& c, std::string_view v) { c.vae_arch.encoder_hidden = parse_widths(v); };
    t["vae.decoder_hidden"] = [](RunConfig& c, std::string_view v) { c.vae_arch.decoder_hidden = parse_widths(v); };
    t["vae.predictor_hidden"] = [](RunConfig& c, std::string_view v) { c.vae_arch.predictor_hidden = parse_widths(v); };
    t["vae.activation"] = [](RunConfig& c, std::string_view v) { c.vae_arch.hidden = parse_act(v); };
    t["vae.beta_kl"] = [](RunConfig& c, std::string_view v) { c.vae_arch.beta_kl = parse_real(v); };
    t["vae.beta_pred"] = [](RunConfig& c, std::string_view v) { c.vae_arch.beta_pred = parse_real(v); };
    t["vae.sigma_x"] = [](RunConfig& c, std::string_view v) { c.vae_arch.sigma_x = parse_real(v); };
    add_train_keys(t, "vae.", &RunConfig::vae_train);

    t["cnf.layers"] = [](RunConfig& c, std::string_view v) { c.cnf_arch.layer_count = parse_count(v); };
    t["cnf.conditioner_widths"] = [](RunConfig& c, std::string_view v) { c.cnf_arch.conditioner_widths = parse_widths(v); };
    t["cnf.embed_width"] = [](RunConfig& c, std::string_view v) { c.cnf_arch.embed_width = parse_count(v); };
    t["cnf.hidden_width"] = [](RunConfig& c, std::string_view v) { c.cnf_arch.hidden_width = parse_count(v); };
    t["cnf.activation"] = [](RunConfig& c, std::string_view v) { c.cnf_arch.hidden = parse_act(v); };
    t["cnf.latent_draws"] = [](RunConfig& c, std::string_view v) { c.cnf_latent_draws = parse_bool(v); };
    add_train_keys(t, "cnf.", &RunConfig::cnf_train);

    t["sampler.chain_length"] = [](RunConfig& c, std::string_view v) { c.sampler.chain_length = parse_count(v); };
    t["sampler.gamma"] = [](RunConfig& c, std::string_view v) {
      c.sampler.gamma = v == "auto" ? std::nullopt : std::optional(parse_real(v));
    };
    t["sampler.epsilon_std"] = [](RunConfig& c, std::string_view v) { c.sampler.epsilon_std = parse_real(v); };
    t["sampler.archive_period"] = [](RunConfig& c, std::string_view v) { c.sampler.archive_period = parse_count(v); };
    t["sampler.archive_init_size"] = [](RunConfig& c, std::string_view v) { c.sampler.archive_init_size = parse_count(v); };
    t["sampler.burn_in"] = [](RunConfig& c, std::string_view v) {
      c.sampler.burn_in = v == "auto" ? std::nullopt : std::optional(parse_count(v));
    };
    t["sampler.thin"] = [](RunConfig& c, std::string_view v) { c.sampler.thin = parse_count(v); };
    t["sampler.proposal"] = [](RunConfig& c, std::string_view v) {
      try {
        c.sampler.proposal = sampler::parse_proposal_kind(v);
      } catch (const ContractError& e) {
        throw ConfigError(e.what());
      }
    };
    t["sampler.baseline_std"] = [](RunConfig& c, std::string_view v) { c.sampler.baseline_std = parse_real(v); };
    t["sampler.chains"] = [](RunConfig& c, std::string_view v) { c.chains = parse_count(v); };
    t["sampler.observations"] = [](RunConfig& c, std::string_view v) { c.observations = parse_count(v); };
    return t;
  }();
  return table;
}

nlohmann::json train_json(const nn::TrainConfig& t) {
  return {{"batch_size", t.batch_size},         {"max_epochs", t.max_epochs},
          {"lr", t.initial_lr},                 {"decay_fraction", t.decay_fraction},
          {"weight_decay", t.weight_decay},     {"l2_rate", t.l2_rate},
          {"patience", t.patience},             {"split_fraction", t.split_fraction},
          {"dropout", t.dropout}};
}

template <class F>
void as_config_error(const std::string& what, F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

// With the default beta_KL the latent posterior collapses to a near point
// mass and the flow trained on it has sharp spurious maxima outside the
// training range of lambda; these weights keep q(h | x) broad enough for the
// chains to mix at 4000 samples.
RunConfig RunConfig::desk() {
  RunConfig c;
  c.vae_arch.beta_kl = 0.1;
  c.vae_arch.beta_pred = 1.0;
  c.cnf_train.l2_rate = 0.01;
  return c;
}

RunConfig RunConfig::smoke() {
  RunConfig c;
  c.preset = "smoke";
  c.problem = {11, 0.25, 4, 1.0, 1.0};
  c.train_samples = 500;
  c.test_samples = 100;
  c.vae_arch.latent_dim = 4;
  c.vae_arch.encoder_hidden = {16, 16};
  c.vae_arch.decoder_hidden = {16, 16};
  c.vae_arch.predictor_hidden = {16};
  c.vae_train.max_epochs = 30;
  c.vae_train.patience = 10;
  c.cnf_arch.layer_count = 4;
  c.cnf_arch.conditioner_widths = {8};
  c.cnf_arch.embed_width = 8;
  c.cnf_arch.hidden_width = 8;
  c.cnf_train.max_epochs = 30;
  c.cnf_train.patience = 10;
  c.sampler.chain_length = 2000;
  c.observations = 3;
  return c;
}

RunConfig RunConfig::full() {
  RunConfig c;
  c.preset = "full";
  c.problem = {61, 0.25, 14, 1.0, 1.0};
  c.train_samples = 32000;
  c.test_samples = 1000;
  c.vae_arch.latent_dim = 20;
  c.vae_train.dropout = 0.2;
  c.vae_train.patience = 25;
  c.cnf_arch.layer_count = 30;
  c.cnf_arch.conditioner_widths = {64, 64};
  c.cnf_arch.embed_width = 64;
  c.cnf_arch.hidden_width = 64;
  c.cnf_train.dropout = 0.2;
  c.cnf_train.max_epochs = 200;
  c.cnf_train.patience = 20;
  c.sampler.chain_length = 30000;
  return c;
}

RunConfig RunConfig::from_preset(std::string_view name) {
  if (name == "desk") return desk();
  if (name == "smoke") return smoke();
  if (name == "full") return full();
  throw ConfigError("unknown preset " + quoted(name) + " (expected desk, smoke or full)");
}

void RunConfig::set(std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  if (key == "preset") {
    const std::filesystem::path keep_out = out_dir;
    const std::uint64_t keep_seed = seed;
    *this = from_preset(value);
    out_dir = keep_out;
    seed = keep_seed;
    return;
  }
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key " + quoted(key));
  try {
    it->second(*this, value);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

void RunConfig::validate() {
  if (problem.mesh_n < 11 || (problem.mesh_n - 1) % 10 != 0)
    throw ConfigError("mesh.n must be 10k + 1 (k >= 1) so the sensor grid is nodal, got " +
                      std::to_string(problem.mesh_n));
  if (problem.mode_count < 1 || problem.mode_count > problem.mesh_n * problem.mesh_n)
    throw ConfigError("field.modes must lie in [1, mesh nodes]");
  if (!(problem.lengthscale > 0.0)) throw ConfigError("field.lengthscale must be positive");
  if (!(problem.marginal_std > 0.0)) throw ConfigError("field.std must be positive");
  if (train_samples < 2) throw ConfigError("io.train_samples must be at least 2");
  if (snr < 0.0) throw ConfigError("io.snr must be nonnegative (0 disables noise)");
  if (observations < 1) throw ConfigError("sampler.observations must be at least 1");
  if (test_samples < observations)
    throw ConfigError("io.test_samples (" + std::to_string(test_samples) +
                      ") is smaller than sampler.observations (" + std::to_string(observations) + ")");
  if (chains < 2) throw ConfigError("sampler.chains must be at least 2 for the R-hat diagnostic");

  vae_arch.x_dim = darcy::kSensorCount;
  vae_arch.par_dim = problem.mode_count;
  cnf_arch.latent_dim = vae_arch.latent_dim;
  cnf_arch.par_dim = problem.mode_count;
  as_config_error("vae", [&] { vae_arch.validate(); });
  as_config_error("vae", [&] { vae_train.validate(); });
  as_config_error("cnf", [&] { cnf_arch.validate(); });
  as_config_error("cnf", [&] { cnf_train.validate(); });
  as_config_error("sampler", [&] { sampler.validate(); });
  if (sampler.effective_burn_in() >= sampler.chain_length)
    throw ConfigError("sampler.burn_in must be smaller than sampler.chain_length");
}

nlohmann::json RunConfig::to_json() const {
  auto widths = [](const std::vector<std::size_t>& w) { return nlohmann::json(w); };
  nlohmann::json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["problem"] = problem.to_json();
  j["io"] = {{"train_samples", train_samples},
             {"test_samples", test_samples},
             {"snr", snr},
             {"write_chains", write_chains}};
  j["vae"] = {{"latent_dim", vae_arch.latent_dim},
              {"encoder_hidden", widths(vae_arch.encoder_hidden)},
              {"decoder_hidden", widths(vae_arch.decoder_hidden)},
              {"predictor_hidden", widths(vae_arch.predictor_hidden)},
              {"activation", nn::to_string(vae_arch.hidden)},
              {"beta_kl", vae_arch.beta_kl},
              {"beta_pred", vae_arch.beta_pred},
              {"sigma_x", vae_arch.sigma_x},
              {"train", train_json(vae_train)}};
  j["cnf"] = {{"layers", cnf_arch.layer_count},
              {"conditioner_widths", widths(cnf_arch.conditioner_widths)},
              {"embed_width", cnf_arch.embed_width},
              {"hidden_width", cnf_arch.hidden_width},
              {"activation", nn::to_string(cnf_arch.hidden)},
              {"latent_draws", cnf_latent_draws},
              {"train", train_json(cnf_train)}};
  j["sampler"] = {{"chain_length", sampler.chain_length},
                  {"gamma", sampler.gamma ? nlohmann::json(*sampler.gamma) : nlohmann::json("auto")},
                  {"epsilon_std", sampler.epsilon_std},
                  {"archive_period", sampler.archive_period},
                  {"archive_init_size", sampler.archive_init_size},
                  {"burn_in", sampler.effective_burn_in()},
                  {"thin", sampler.thin},
                  {"proposal", sampler::to_string(sampler.proposal)},
                  {"baseline_std", sampler.baseline_std},
                  {"chains", chains},
                  {"observations", observations}};
  return j;
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  struct Entry {
    std::size_t line;
    std::string key, value;
  };
  std::vector<Entry> entries;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    entries.push_back({line_no, std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1)))});
  }
  auto apply = [&](const Entry& e) {
    try {
      base.set(e.key, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError("line " + std::to_string(e.line) + ": " + err.what());
    }
  };
  for (const auto& e : entries)
    if (e.key == "preset") apply(e);
  for (const auto& e : entries)
    if (e.key != "preset") apply(e);
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace nmcmc::pipeline
