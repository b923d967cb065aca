#pragma once

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace nmcmc {

/// Random engine used throughout the toolkit.
using Rng = std::mt19937_64;

}  // namespace nmcmc

namespace nmcmc::nn {

/// Dense row-major 2-D array of doubles.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);
  Tensor(std::initializer_list<std::initializer_list<double>> rows);

  /// 1 x n tensor holding a copy of `values`.
  static Tensor row_vector(std::span<const double> values);
  static Tensor identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Tensor transposed() const;
  /// Copy of the rows listed in `indices`, in that order.
  Tensor gather_rows(std::span<const std::size_t> indices) const;

  void fill(double value);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// A * B.
Tensor matmul(const Tensor& a, const Tensor& b);
/// A^T * B.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// A * B^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& a);

}  // namespace nmcmc::nn
