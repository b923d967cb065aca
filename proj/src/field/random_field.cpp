#include "nmcmc/field/random_field.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "nmcmc/errors.hpp"
#include "nmcmc/io.hpp"

namespace nmcmc::field {

namespace {
constexpr int kBasisFormatVersion = 1;
}

double kernel_eval(std::span<const double> x, std::span<const double> y, double lengthscale) {
  require(lengthscale > 0.0, "kernel lengthscale must be positive");
  require_dims(x.size() == y.size(), "kernel points differ in dimension");
  double r2 = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double d = (x[j] - y[j]) / lengthscale;
    r2 += d * d;
  }
  return std::exp(-0.5 * r2);
}

Tensor build_covariance(std::span<const Point> nodes, double lengthscale) {
  require(!nodes.empty(), "build_covariance needs at least one node");
  const std::size_t n = nodes.size();
  Tensor c(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    c(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = kernel_eval(nodes[i], nodes[j], lengthscale);
      c(i, j) = v;
      c(j, i) = v;
    }
  }
  return c;
}

EigenPairs eigendecompose_descending(const Tensor& c) {
  require(c.rows() == c.cols() && c.rows() > 0, "eigendecompose needs a nonempty square matrix");
  const std::size_t n = c.rows();
  double scale = 0.0, asym = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      scale = std::max(scale, std::abs(c(i, j)));
      asym = std::max(asym, std::abs(c(i, j) - c(j, i)));
    }
  require(asym <= 1e-12 * std::max(1.0, scale), "eigendecompose: matrix is not symmetric");

  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      m(c.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) throw ConvergenceError("symmetric eigensolver failed");

  EigenPairs out;
  out.values.resize(n);
  out.vectors = Tensor(n, n);
  const auto& vals = solver.eigenvalues();
  const auto& vecs = solver.eigenvectors();
  for (std::size_t k = 0; k < n; ++k) {
    const auto src = static_cast<Eigen::Index>(n - 1 - k);
    out.values[k] = vals(src);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += vecs(static_cast<Eigen::Index>(i), src);
    const double sign = total < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i)
      out.vectors(i, k) = sign * vecs(static_cast<Eigen::Index>(i), src);
  }
  return out;
}

KLBasis truncate_basis(const EigenPairs& pairs, std::size_t mode_count, double mean_value,
                       double marginal_std) {
  const std::size_t n = pairs.values.size();
  require(mode_count >= 1 && mode_count <= n,
          "truncate_basis: mode count must lie in [1, " + std::to_string(n) + "]");
  require(marginal_std > 0.0, "marginal standard deviation must be positive");
  double total = 0.0;
  for (double v : pairs.values) total += std::max(v, 0.0);
  KLBasis basis;
  basis.modes = Tensor(n, mode_count);
  basis.eigenvalues.resize(mode_count);
  double kept = 0.0;
  for (std::size_t k = 0; k < mode_count; ++k) {
    basis.eigenvalues[k] = std::max(pairs.values[k], 0.0);
    kept += basis.eigenvalues[k];
    for (std::size_t i = 0; i < n; ++i) basis.modes(i, k) = pairs.vectors(i, k);
  }
  basis.mean.assign(n, mean_value);
  basis.marginal_std = marginal_std;
  basis.captured_fraction = total > 0.0 ? kept / total : 1.0;
  return basis;
}

KLBasis truncate_basis_to_energy(const EigenPairs& pairs, double energy_target,
                                 double mean_value, double marginal_std) {
  require(energy_target > 0.0 && energy_target < 1.0, "energy target must lie in (0,1)");
  double total = 0.0;
  for (double v : pairs.values) total += std::max(v, 0.0);
  double kept = 0.0;
  std::size_t count = 0;
  while (count < pairs.values.size()) {
    kept += std::max(pairs.values[count], 0.0);
    ++count;
    if (kept >= energy_target * total) break;
  }
  return truncate_basis(pairs, count, mean_value, marginal_std);
}

LogField sample_log_field(const KLBasis& basis, std::span<const double> lambda) {
  require_dims(lambda.size() == basis.mode_count(),
               "sample_log_field: expected " + std::to_string(basis.mode_count()) +
                   " coefficients, got " + std::to_string(lambda.size()));
  const std::size_t n = basis.node_count();
  std::vector<double> scaled(lambda.size());
  for (std::size_t k = 0; k < lambda.size(); ++k)
    scaled[k] = basis.marginal_std * std::sqrt(basis.eigenvalues[k]) * lambda[k];
  LogField f;
  f.log_t.resize(n);
  f.t.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = basis.mean[i];
    const auto row = basis.modes.row(i);
    for (std::size_t k = 0; k < scaled.size(); ++k) v += row[k] * scaled[k];
    f.log_t[i] = v;
    f.t[i] = std::exp(v);
  }
  return f;
}

nlohmann::json BasisSpec::to_json() const {
  return {{"mesh_n", mesh_n},
          {"lengthscale", lengthscale},
          {"mode_count", mode_count},
          {"mean", mean_value},
          {"marginal_std", marginal_std}};
}

void save_basis(const std::filesystem::path& path, const KLBasis& basis, const BasisSpec& spec) {
  nlohmann::json header;
  header["format_version"] = kBasisFormatVersion;
  header["kind"] = "kl-basis";
  header["spec"] = spec.to_json();
  header["node_count"] = basis.node_count();
  header["captured_fraction"] = basis.captured_fraction;
  std::vector<double> payload = basis.mean;
  payload.insert(payload.end(), basis.eigenvalues.begin(), basis.eigenvalues.end());
  payload.insert(payload.end(), basis.modes.data().begin(), basis.modes.data().end());
  io::write_framed(path, header, payload);
}

std::optional<KLBasis> load_basis(const std::filesystem::path& path, const BasisSpec& spec) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  io::FramedFile f = io::read_framed(path);
  try {
    if (f.header.at("format_version").get<int>() != kBasisFormatVersion) return std::nullopt;
    if (f.header.at("spec") != spec.to_json()) return std::nullopt;
    const auto n = f.header.at("node_count").get<std::size_t>();
    const std::size_t m = spec.mode_count;
    if (f.payload.size() != n + m + n * m)
      throw FormatError(path.string() + ": basis payload size does not match header");
    KLBasis b;
    b.mean.assign(f.payload.begin(), f.payload.begin() + static_cast<std::ptrdiff_t>(n));
    b.eigenvalues.assign(f.payload.begin() + static_cast<std::ptrdiff_t>(n),
                         f.payload.begin() + static_cast<std::ptrdiff_t>(n + m));
    b.modes = Tensor(n, m,
                     std::vector<double>(f.payload.begin() + static_cast<std::ptrdiff_t>(n + m),
                                         f.payload.end()));
    b.marginal_std = spec.marginal_std;
    b.captured_fraction = f.header.at("captured_fraction").get<double>();
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt basis header: " + e.what());
  }
}

}  // namespace nmcmc::field
