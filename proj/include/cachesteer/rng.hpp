#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace cachesteer {

inline uint64_t fnv1a64(const void* bytes, size_t n,
                        uint64_t basis = 1469598103934665603ull) {
  const auto* p = static_cast<const uint8_t*>(bytes);
  uint64_t h = basis;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

// One seed drives every randomized stage. Sub-seeds are derived by hashing the
// base seed with a purpose label so stages stay decoupled: reordering calls or
// adding a new stage never shifts another stage's stream.
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
  uint8_t buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<uint8_t>(base >> (8 * i));
  uint64_t h = fnv1a64(buf, 8);
  return fnv1a64(label.data(), label.size(), h);
}

// splitmix64 with hand-rolled uniform/normal draws. std::*_distribution is not
// pinned by the standard; this generator produces the same stream everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  int range(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  // Box-Muller; one draw per call, the paired value is discarded for a
  // stateless stream.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace cachesteer
