#pragma once

// Squared-exponential covariance and truncated Karhunen-Loeve
// parameterization of a log-normal field:
//
//   log t = mu_t + sigma_t * Psi * Pi^{1/2} * lambda,   lambda ~ N(0, I).

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmcmc/nn/tensor.hpp"

namespace nmcmc::field {

using nn::Tensor;
using Point = std::array<double, 2>;

struct KernelConfig {
  double lengthscale = 0.25;
};

/// exp(-1/2 sum_j ((x_j - y_j) / l)^2). ContractError when l <= 0 or the
/// points differ in dimension.
double kernel_eval(std::span<const double> x, std::span<const double> y, double lengthscale);

/// Dense N x N covariance over `nodes`.
Tensor build_covariance(std::span<const Point> nodes, double lengthscale);

struct EigenPairs {
  /// Descending.
  std::vector<double> values;
  /// Column i is the unit eigenvector of values[i].
  Tensor vectors;
};

/// Full symmetric eigendecomposition, eigenvalues sorted descending and each
/// eigenvector's sign fixed so its entry sum is nonnegative. ContractError
/// when C is not symmetric to 1e-12 (relative to its largest entry).
EigenPairs eigendecompose_descending(const Tensor& c);

struct KLBasis {
  /// N_N x N_M retained modes.
  Tensor modes;
  /// N_M retained eigenvalues, descending, clamped at 0.
  std::vector<double> eigenvalues;
  /// Per-node mean of log t.
  std::vector<double> mean;
  double marginal_std = 1.0;
  /// Retained share of total variance.
  double captured_fraction = 0.0;

  std::size_t node_count() const noexcept { return modes.rows(); }
  std::size_t mode_count() const noexcept { return modes.cols(); }
};

/// Keeps the leading `mode_count` pairs. Negative round-off eigenvalues are
/// clamped to zero. ContractError unless 1 <= mode_count <= N_N.
KLBasis truncate_basis(const EigenPairs& pairs, std::size_t mode_count, double mean_value,
                       double marginal_std);

/// Smallest mode count whose captured fraction reaches `energy_target`
/// (in (0,1)).
KLBasis truncate_basis_to_energy(const EigenPairs& pairs, double energy_target,
                                 double mean_value, double marginal_std);

struct LogField {
  std::vector<double> log_t;
  std::vector<double> t;
};

/// DimensionError when lambda.size() != mode_count().
LogField sample_log_field(const KLBasis& basis, std::span<const double> lambda);

/// Description of how a basis was built; stored in the cache header and
/// compared on load.
struct BasisSpec {
  std::size_t mesh_n = 0;
  double lengthscale = 0.25;
  std::size_t mode_count = 0;
  double mean_value = 1.0;
  double marginal_std = 1.0;

  nlohmann::json to_json() const;
  friend bool operator==(const BasisSpec&, const BasisSpec&) = default;
};

void save_basis(const std::filesystem::path& path, const KLBasis& basis, const BasisSpec& spec);

/// Loads the cached basis when its header matches `spec`; nullopt when the
/// file is absent or was built for a different configuration.
std::optional<KLBasis> load_basis(const std::filesystem::path& path, const BasisSpec& spec);

}  // namespace nmcmc::field
