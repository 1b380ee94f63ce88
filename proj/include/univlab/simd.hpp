#pragma once

// Runtime-dispatched f64 vector kernels. Every ISA variant has a scalar
// reference twin in kernels_scalar.cpp; equivalence is checked in
// tests/unit/test_simd.cpp.

#include <cstddef>
#include <string_view>

namespace univlab::simd {

enum class Isa { scalar, avx2, neon };

const char* to_string(Isa isa);

struct KernelTable {
  Isa isa;
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y[i] = a[i] * b[i]
  void (*mul)(const double* a, const double* b, double* y, std::size_t n);
};

bool available(Isa isa);

// Kernel table for a specific ISA. Throws config error when the ISA is not
// compiled in or not supported by the running CPU.
const KernelTable& table(Isa isa);

// Best available table, chosen once per process. Setting UNIVLAB_SIMD to
// "scalar", "avx2" or "neon" pins the choice.
const KernelTable& active();

inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { active().axpy(alpha, x, y, n); }
inline void mul(const double* a, const double* b, double* y, std::size_t n) { active().mul(a, b, y, n); }

namespace detail {
const KernelTable& scalar_table();
const KernelTable* avx2_table();  // nullptr when not compiled in
const KernelTable* neon_table();  // nullptr when not compiled in
}  // namespace detail

}  // namespace univlab::simd
