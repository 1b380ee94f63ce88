#include "univlab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "univlab/error.hpp"
#include "univlab/simd.hpp"

namespace univlab {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::value: return "value";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::checksum: return "checksum";
    case ErrorKind::architecture: return "architecture";
    case ErrorKind::contract: return "contract";
    case ErrorKind::service: return "service";
    case ErrorKind::usage: return "usage";
  }
  return "unknown";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 1;
    case ErrorKind::service: return 3;
    default: return 2;
  }
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  UNIV_CHECK(data_.size() == rows * cols, shape,
             "matrix data length " + std::to_string(data_.size()) + " != " +
                 std::to_string(rows) + "x" + std::to_string(cols));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool Matrix::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

SequenceTensor::SequenceTensor(std::size_t length, std::size_t dim, double fill)
    : length_(length), dim_(dim), data_(length * dim, fill) {}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

namespace {

void require_finite(std::span<const double> x, const char* what) {
  for (double v : x) UNIV_CHECK(std::isfinite(v), value, std::string(what) + ": non-finite input");
}

}  // namespace

Vector silu(std::span<const double> x) {
  require_finite(x, "silu");
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = silu(x[i]);
  return y;
}

Vector relu(std::span<const double> x) {
  require_finite(x, "relu");
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

SequenceTensor conv1d_causal(const SequenceTensor& seq, const Matrix& kernel,
                             std::span<const double> bias, std::size_t d_conv) {
  UNIV_CHECK(d_conv >= 1, config, "conv1d: d_conv must be >= 1");
  UNIV_CHECK(kernel.cols() <= d_conv, config,
             "conv1d: kernel width " + std::to_string(kernel.cols()) + " exceeds d_conv " +
                 std::to_string(d_conv));
  UNIV_CHECK(kernel.rows() == seq.dim(), shape, "conv1d: kernel channels != sequence dim");
  UNIV_CHECK(bias.empty() || bias.size() == seq.dim(), shape, "conv1d: bias length != channels");

  const std::size_t channels = seq.dim();
  const std::size_t width = kernel.cols();
  SequenceTensor out(seq.length(), channels);
  for (std::size_t i = 0; i < seq.length(); ++i) {
    auto o = out.at(i);
    for (std::size_t ch = 0; ch < channels; ++ch) o[ch] = bias.empty() ? 0.0 : bias[ch];
    for (std::size_t k = 0; k < width && k <= i; ++k) {
      auto x = seq.at(i - k);
      for (std::size_t ch = 0; ch < channels; ++ch) o[ch] += kernel(ch, k) * x[ch];
    }
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  UNIV_CHECK(a.cols() == b.rows(), shape,
             "matmul: inner dims " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  Matrix c(a.rows(), b.cols());
  const auto& k = simd::active();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* crow = c.row(i).data();
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double aip = a(i, p);
      if (aip != 0.0) k.axpy(aip, b.row(p).data(), crow, b.cols());
    }
  }
  return c;
}

void matvec_into(const Matrix& m, std::span<const double> x, std::span<double> y) {
  UNIV_CHECK(m.cols() == x.size(), shape,
             "matvec: matrix cols " + std::to_string(m.cols()) + " != vector length " +
                 std::to_string(x.size()));
  UNIV_CHECK(y.size() == m.rows(), shape, "matvec: output length mismatch");
  const auto& k = simd::active();
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = k.dot(m.row(r).data(), x.data(), x.size());
}

Vector matvec(const Matrix& m, std::span<const double> x) {
  Vector y(m.rows());
  matvec_into(m, x, y);
  return y;
}

Vector matvec_transposed(const Matrix& m, std::span<const double> x) {
  UNIV_CHECK(m.rows() == x.size(), shape, "matvec_transposed: length mismatch");
  Vector y(m.cols(), 0.0);
  const auto& k = simd::active();
  for (std::size_t r = 0; r < m.rows(); ++r)
    if (x[r] != 0.0) k.axpy(x[r], m.row(r).data(), y.data(), y.size());
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  UNIV_CHECK(a.size() == b.size(), shape, "dot: length mismatch");
  return simd::dot(a.data(), b.data(), a.size());
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double quantile_sorted(std::span<const double> sorted, double q) {
  UNIV_CHECK(!sorted.empty(), value, "quantile of an empty sample");
  UNIV_CHECK(q >= 0.0 && q <= 1.0, value, "quantile level outside [0, 1]");
  const double pos = q * double(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - double(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace univlab
