#pragma once

// Dense f64 containers and the handful of kernels the models and SAEs need.

#include <cstddef>
#include <span>
#include <vector>

namespace univlab {

using Vector = std::vector<double>;

// Row-major rows x cols matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  Matrix transposed() const;
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// A token-major sequence of `dim`-wide vectors.
class SequenceTensor {
 public:
  SequenceTensor() = default;
  SequenceTensor(std::size_t length, std::size_t dim, double fill = 0.0);

  std::size_t length() const noexcept { return length_; }
  std::size_t dim() const noexcept { return dim_; }

  std::span<double> at(std::size_t i) { return {data_.data() + i * dim_, dim_}; }
  std::span<const double> at(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const SequenceTensor&, const SequenceTensor&) = default;

 private:
  std::size_t length_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

double sigmoid(double x);
double silu(double x);
double softplus(double x);
double gelu(double x);  // tanh approximation

// Elementwise nonlinearities; reject non-finite input with a value error.
Vector silu(std::span<const double> x);
Vector relu(std::span<const double> x);

// Depthwise causal convolution. kernel is channels x width, where column k
// multiplies the input k positions back (k = 0 is the current token).
// Positions before the start of the sequence read as zero.
SequenceTensor conv1d_causal(const SequenceTensor& seq, const Matrix& kernel,
                             std::span<const double> bias, std::size_t d_conv);

Matrix matmul(const Matrix& a, const Matrix& b);

// y = M x
Vector matvec(const Matrix& m, std::span<const double> x);
void matvec_into(const Matrix& m, std::span<const double> x, std::span<double> y);
// y = M^T x
Vector matvec_transposed(const Matrix& m, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

// Linear interpolation between order statistics; `sorted` ascending, non-empty.
double quantile_sorted(std::span<const double> sorted, double q);

}  // namespace univlab
