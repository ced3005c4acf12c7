#pragma once

#include <cstddef>
#include <string_view>

#include "cachesteer/real.hpp"

// Data-parallel inner loops behind everything in the tensor layer. Each
// primitive has a scalar reference implementation and, for float builds on
// x86, an AVX2+FMA variant. The active backend is chosen once per process:
// CACHESTEER_KERNELS=scalar|avx2 overrides CPU detection (used by the
// equivalence tests).
namespace cachesteer::kernels {

real dot(const real* a, const real* b, size_t n);

// y += alpha * x
void axpy(real alpha, const real* x, real* y, size_t n);

void add(const real* a, const real* b, real* out, size_t n);
void sub(const real* a, const real* b, real* out, size_t n);
void mul(const real* a, const real* b, real* out, size_t n);

// out = alpha * a
void scale(const real* a, real alpha, real* out, size_t n);

// c[m,n] = a[m,k] @ b[k,n]; accumulate adds into c instead of overwriting.
void matmul_nn(const real* a, const real* b, real* c, size_t m, size_t k, size_t n,
               bool accumulate = false);
// c[m,n] = a[m,k] @ b[n,k]^T
void matmul_nt(const real* a, const real* b, real* c, size_t m, size_t k, size_t n,
               bool accumulate = false);
// c[k,n] = a[m,k]^T @ b[m,n]
void matmul_tn(const real* a, const real* b, real* c, size_t m, size_t k, size_t n,
               bool accumulate = false);

// "scalar" or "avx2".
std::string_view active_backend();

// Force a backend by name; throws ConfigError on unknown or unsupported names.
void force_backend(std::string_view name);

bool avx2_available();

}  // namespace cachesteer::kernels
