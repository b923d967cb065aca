#include "nmcmc/pipeline/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>

#include "nmcmc/errors.hpp"
#include "nmcmc/io.hpp"

namespace nmcmc::pipeline {

namespace {
constexpr int kDatasetFormatVersion = 1;
}

void Dataset::validate() const {
  require_dims(x.rows() == lambda.rows(), "dataset: input and label row counts differ (" +
                                              x.shape_string() + " vs " + lambda.shape_string() +
                                              ")");
  if (!x.all_finite() || !lambda.all_finite())
    throw EvaluationError("dataset contains non-finite entries");
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  const std::size_t n = data.size(), nx = data.x.cols(), np = data.lambda.cols();
  const nlohmann::json header{{"kind", "dataset"},   {"format_version", kDatasetFormatVersion},
                              {"rows", n},           {"x_dim", nx},
                              {"par_dim", np},       {"metadata", data.metadata}};
  std::vector<double> payload;
  payload.reserve(n * (nx + np));
  for (std::size_t i = 0; i < n; ++i) {
    const auto xr = data.x.row(i);
    const auto lr = data.lambda.row(i);
    payload.insert(payload.end(), xr.begin(), xr.end());
    payload.insert(payload.end(), lr.begin(), lr.end());
  }
  io::write_framed(path, header, payload);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const io::FramedFile f = io::read_framed(path);
  const auto& h = f.header;
  std::size_t n = 0, nx = 0, np = 0;
  Dataset d;
  try {
    if (h.at("kind").get<std::string>() != "dataset")
      throw FormatError(path.string() + ": not a dataset file");
    if (h.at("format_version").get<int>() != kDatasetFormatVersion)
      throw FormatError(path.string() + ": unsupported dataset format version " +
                        h.at("format_version").dump());
    n = h.at("rows").get<std::size_t>();
    nx = h.at("x_dim").get<std::size_t>();
    np = h.at("par_dim").get<std::size_t>();
    d.metadata = h.at("metadata");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad dataset header: " + e.what());
  }
  if (f.payload.size() != n * (nx + np))
    throw FormatError(path.string() + ": payload holds " + std::to_string(f.payload.size()) +
                      " values, header implies " + std::to_string(n * (nx + np)));
  d.x = Tensor(n, nx);
  d.lambda = Tensor(n, np);
  const double* p = f.payload.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(p, nx, d.x.row(i).begin());
    p += nx;
    std::copy_n(p, np, d.lambda.row(i).begin());
    p += np;
  }
  return d;
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("NEURAL_MCMC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1U, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& body) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(count, 1));
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_index = count;
  std::exception_ptr failure;
  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
      }
    }
  };
  if (threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
}

nlohmann::json ForwardModel::to_json() const { return spec.to_json(); }

ForwardModel build_forward_model(const field::BasisSpec& spec,
                                 const std::optional<std::filesystem::path>& cache) {
  if (spec.mesh_n < 11 || (spec.mesh_n - 1) % 10 != 0)
    throw ConfigError("mesh.n = " + std::to_string(spec.mesh_n) +
                      " does not place the 9 x 9 sensor grid on nodes (need n = 10k + 1)");
  ForwardModel m;
  m.spec = spec;
  m.mesh = darcy::StructuredMesh::unit_square(spec.mesh_n);
  if (cache) {
    if (auto b = field::load_basis(*cache, spec)) {
      m.basis = std::move(*b);
      return m;
    }
  }
  const Tensor c = field::build_covariance(m.mesh.coordinates, spec.lengthscale);
  m.basis = field::truncate_basis(field::eigendecompose_descending(c), spec.mode_count,
                                  spec.mean_value, spec.marginal_std);
  if (cache) field::save_basis(*cache, m.basis, spec);
  return m;
}

Dataset simulate(const ForwardModel& model, const Tensor& lambda, std::size_t threads) {
  require_dims(lambda.cols() == model.basis.mode_count() || lambda.rows() == 0,
               "simulate: lambda has " + std::to_string(lambda.cols()) + " columns, basis has " +
                   std::to_string(model.basis.mode_count()) + " modes");
  Dataset d;
  d.x = Tensor(lambda.rows(), darcy::kSensorCount);
  d.lambda = lambda.rows() == 0 ? Tensor(0, model.basis.mode_count()) : lambda;
  d.metadata = {{"forward_model", model.to_json()}};
  parallel_for(lambda.rows(), threads, [&](std::size_t i) {
    try {
      const field::LogField f = field::sample_log_field(model.basis, lambda.row(i));
      const darcy::HeadSolution sol = darcy::solve_heads(model.mesh, f.t);
      const std::vector<double> obs = darcy::observe(sol.h, model.mesh);
      std::copy(obs.begin(), obs.end(), d.x.row(i).begin());
    } catch (const ConvergenceError& e) {
      throw ConvergenceError("forward solve failed for sample " + std::to_string(i) + ": " +
                             e.what());
    } catch (const std::exception& e) {
      throw EvaluationError("forward solve failed for sample " + std::to_string(i) + ": " +
                            e.what());
    }
  });
  return d;
}

Dataset generate_dataset(const ForwardModel& model, std::size_t count, Rng& rng,
                         std::size_t threads) {
  std::normal_distribution<double> n01;
  Tensor lambda(count, model.basis.mode_count());
  for (double& v : lambda.data()) v = n01(rng);
  return simulate(model, lambda, threads);
}

Dataset add_noise(const Dataset& data, double snr, Rng& rng) {
  require(snr > 0.0 && std::isfinite(snr), "add_noise: snr must be positive and finite");
  Dataset out = data;
  const std::size_t n = data.x.rows(), nx = data.x.cols();
  std::vector<double> sigma(nx, 0.0);
  if (n > 0) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < nx; ++j) sigma[j] += data.x(i, j) * data.x(i, j);
    for (double& s : sigma) s = std::sqrt(s / static_cast<double>(n)) / snr;
  }
  std::normal_distribution<double> n01;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < nx; ++j) out.x(i, j) += sigma[j] * n01(rng);
  out.metadata["noise"] = {{"snr", snr}};
  return out;
}

}  // namespace nmcmc::pipeline
