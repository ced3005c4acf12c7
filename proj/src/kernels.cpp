#include "cachesteer/kernels.hpp"

#include <cstdlib>
#include <string>

#include "cachesteer/errors.hpp"

namespace cachesteer::kernels {

namespace scalar {

real dot(const real* a, const real* b, size_t n) {
  real acc = 0;
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(real alpha, const real* x, real* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void add(const real* a, const real* b, real* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const real* a, const real* b, real* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const real* a, const real* b, real* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale(const real* a, real alpha, real* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = alpha * a[i];
}

}  // namespace scalar

#if defined(__x86_64__) && !defined(CACHESTEER_REAL_DOUBLE)
namespace avx2 {
real dot(const real* a, const real* b, size_t n);
void axpy(real alpha, const real* x, real* y, size_t n);
void add(const real* a, const real* b, real* out, size_t n);
void sub(const real* a, const real* b, real* out, size_t n);
void mul(const real* a, const real* b, real* out, size_t n);
void scale(const real* a, real alpha, real* out, size_t n);
}  // namespace avx2
#endif

namespace {

struct Backend {
  real (*dot)(const real*, const real*, size_t);
  void (*axpy)(real, const real*, real*, size_t);
  void (*add)(const real*, const real*, real*, size_t);
  void (*sub)(const real*, const real*, real*, size_t);
  void (*mul)(const real*, const real*, real*, size_t);
  void (*scale)(const real*, real, real*, size_t);
  const char* name;
};

constexpr Backend kScalar{scalar::dot, scalar::axpy, scalar::add,
                          scalar::sub, scalar::mul,  scalar::scale,
                          "scalar"};

#if defined(__x86_64__) && !defined(CACHESTEER_REAL_DOUBLE)
constexpr Backend kAvx2{avx2::dot, avx2::axpy, avx2::add,
                        avx2::sub, avx2::mul,  avx2::scale,
                        "avx2"};
#endif

bool detect_avx2() {
#if defined(__x86_64__) && !defined(CACHESTEER_REAL_DOUBLE)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Backend* pick_backend() {
  const char* env = std::getenv("CACHESTEER_KERNELS");
  if (env != nullptr) {
    std::string want(env);
    if (want == "scalar") return &kScalar;
#if defined(__x86_64__) && !defined(CACHESTEER_REAL_DOUBLE)
    if (want == "avx2") {
      if (!detect_avx2()) throw ConfigError("CACHESTEER_KERNELS=avx2 but the CPU lacks AVX2/FMA");
      return &kAvx2;
    }
#endif
    throw ConfigError("unknown CACHESTEER_KERNELS backend '" + want + "'");
  }
#if defined(__x86_64__) && !defined(CACHESTEER_REAL_DOUBLE)
  if (detect_avx2()) return &kAvx2;
#endif
  return &kScalar;
}

const Backend*& active_slot() {
  static const Backend* active = pick_backend();
  return active;
}

}  // namespace

real dot(const real* a, const real* b, size_t n) { return active_slot()->dot(a, b, n); }
void axpy(real alpha, const real* x, real* y, size_t n) { active_slot()->axpy(alpha, x, y, n); }
void add(const real* a, const real* b, real* out, size_t n) { active_slot()->add(a, b, out, n); }
void sub(const real* a, const real* b, real* out, size_t n) { active_slot()->sub(a, b, out, n); }
void mul(const real* a, const real* b, real* out, size_t n) { active_slot()->mul(a, b, out, n); }
void scale(const real* a, real alpha, real* out, size_t n) { active_slot()->scale(a, alpha, out, n); }

void matmul_nn(const real* a, const real* b, real* c, size_t m, size_t k, size_t n,
               bool accumulate) {
  if (!accumulate) {
    for (size_t i = 0; i < m * n; ++i) c[i] = 0;
  }
  // Row-major friendly: accumulate scaled rows of b into rows of c.
  for (size_t i = 0; i < m; ++i) {
    for (size_t p = 0; p < k; ++p) {
      axpy(a[i * k + p], b + p * n, c + i * n, n);
    }
  }
}

void matmul_nt(const real* a, const real* b, real* c, size_t m, size_t k, size_t n,
               bool accumulate) {
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      real v = dot(a + i * k, b + j * k, k);
      c[i * n + j] = accumulate ? c[i * n + j] + v : v;
    }
  }
}

void matmul_tn(const real* a, const real* b, real* c, size_t m, size_t k, size_t n,
               bool accumulate) {
  if (!accumulate) {
    for (size_t i = 0; i < k * n; ++i) c[i] = 0;
  }
  for (size_t p = 0; p < m; ++p) {
    for (size_t i = 0; i < k; ++i) {
      axpy(a[p * k + i], b + p * n, c + i * n, n);
    }
  }
}

std::string_view active_backend() { return active_slot()->name; }

void force_backend(std::string_view name) {
  if (name == "scalar") {
    active_slot() = &kScalar;
    return;
  }
#if defined(__x86_64__) && !defined(CACHESTEER_REAL_DOUBLE)
  if (name == "avx2") {
    if (!detect_avx2()) throw ConfigError("AVX2/FMA not available on this CPU");
    active_slot() = &kAvx2;
    return;
  }
#endif
  throw ConfigError("unknown kernel backend '" + std::string(name) + "'");
}

bool avx2_available() { return detect_avx2(); }

}  // namespace cachesteer::kernels
