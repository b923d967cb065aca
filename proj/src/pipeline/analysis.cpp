#include "nmcmc/pipeline/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "nmcmc/errors.hpp"

namespace nmcmc::pipeline {

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double relative_error(std::span<const double> t_true, std::span<const double> t_pred) {
  require_dims(t_true.size() == t_pred.size(), "relative_error: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < t_true.size(); ++i) {
    num += (t_true[i] - t_pred[i]) * (t_true[i] - t_pred[i]);
    den += t_true[i] * t_true[i];
  }
  require(den > 0.0, "relative_error: reference field is zero");
  return std::sqrt(num / den);
}

PcaProjection pca_project(const nn::Tensor& vectors, std::size_t components) {
  const std::size_t n = vectors.rows(), d = vectors.cols();
  require(n >= 2, "pca_project needs at least two rows");
  require(components >= 1 && components <= d, "pca_project: components must lie in [1, d]");

  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = vectors(i, j);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw ConvergenceError("pca_project: eigensolver failed");

  PcaProjection out;
  out.mean.assign(mu.data(), mu.data() + d);
  out.axes = nn::Tensor(d, components);
  const double total = std::max(cov.trace(), 0.0);
  for (std::size_t k = 0; k < components; ++k) {
    const auto col = static_cast<Eigen::Index>(d - 1 - k);
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    for (std::size_t j = 0; j < d; ++j) out.axes(j, k) = v(static_cast<Eigen::Index>(j));
    const double var = std::max(eig.eigenvalues()(col), 0.0);
    out.explained_variance.push_back(var);
    out.explained_ratio.push_back(total > 0.0 ? var / total : 0.0);
  }
  out.coords = nn::Tensor(n, components);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < components; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        s += x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * out.axes(j, k);
      out.coords(i, k) = s;
    }
  return out;
}

double spearman_correlation(std::span<const double> a, std::span<const double> b) {
  require_dims(a.size() == b.size(), "spearman_correlation: length mismatch");
  require(a.size() >= 2, "spearman_correlation needs at least two points");
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  require(saa > 0.0 && sbb > 0.0, "spearman_correlation: constant input");
  return sab / std::sqrt(saa * sbb);
}

double median(std::vector<double> values) {
  require(!values.empty(), "median of an empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double hi = values[mid];
  if (values.size() % 2 == 1) return hi;
  const double lo = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace nmcmc::pipeline
