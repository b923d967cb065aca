#pragma once

// Post-processing statistics for inversion results.

#include <cstddef>
#include <span>
#include <vector>

#include "nmcmc/nn/tensor.hpp"

namespace nmcmc::pipeline {

/// ||t_true - t_pred||_2 / ||t_true||_2. ContractError when t_true is all
/// zero, DimensionError on a length mismatch.
double relative_error(std::span<const double> t_true, std::span<const double> t_pred);

struct PcaProjection {
  /// N x k scores.
  nn::Tensor coords;
  /// d x k unit principal axes; each axis has its largest-magnitude entry
  /// positive.
  nn::Tensor axes;
  std::vector<double> mean;
  /// Sample variance (N - 1 denominator) along each retained axis.
  std::vector<double> explained_variance;
  /// explained_variance over the total variance.
  std::vector<double> explained_ratio;
};

/// Centers the rows, eigendecomposes their sample covariance and projects on
/// the leading `components` axes. ContractError unless N >= 2 and
/// 1 <= components <= d.
PcaProjection pca_project(const nn::Tensor& vectors, std::size_t components);

/// Spearman rank correlation with average ranks for ties. ContractError for
/// fewer than two points or a constant input.
double spearman_correlation(std::span<const double> a, std::span<const double> b);

/// ContractError on empty input.
double median(std::vector<double> values);

}  // namespace nmcmc::pipeline
