#include "univlab/error.hpp"
#include "univlab/simd.hpp"

#include <cstdlib>
#include <string>

namespace univlab::simd {

namespace detail {
#ifndef UNIVLAB_HAVE_AVX2
const KernelTable* avx2_table() { return nullptr; }
#endif
#ifndef UNIVLAB_HAVE_NEON
const KernelTable* neon_table() { return nullptr; }
#endif
}  // namespace detail

const char* to_string(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

bool available(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(UNIVLAB_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
      return detail::avx2_table() != nullptr && __builtin_cpu_supports("avx2") &&
             __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
      return detail::neon_table() != nullptr;
  }
  return false;
}

const KernelTable& table(Isa isa) {
  UNIV_CHECK(available(isa), config, std::string("SIMD ISA not available: ") + to_string(isa));
  switch (isa) {
    case Isa::avx2: return *detail::avx2_table();
    case Isa::neon: return *detail::neon_table();
    case Isa::scalar: break;
  }
  return detail::scalar_table();
}

namespace {

const KernelTable& choose() {
  if (const char* env = std::getenv("UNIVLAB_SIMD")) {
    const std::string want(env);
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
      if (want == to_string(isa)) return table(isa);
    }
  }
  if (available(Isa::avx2)) return table(Isa::avx2);
  if (available(Isa::neon)) return table(Isa::neon);
  return detail::scalar_table();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& chosen = choose();
  return chosen;
}

}  // namespace univlab::simd
