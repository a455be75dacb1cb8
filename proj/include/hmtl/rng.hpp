#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace hmtl {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent seed for a named sub-stream (per parameter block,
// per dataset, per epoch, ...) from one master seed.
inline uint64_t seed_stream(uint64_t master, uint64_t stream_id) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream_id + 1));
}

// Deterministic RNG. The engine (std::mt19937_64) has a standard-specified
// sequence; the distributions are implemented here because the <random>
// distribution objects are implementation-defined and would break
// reproducibility across standard libraries.
class Rng {
public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1) with 53 random bits
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased-enough integer in [0, n) via 128-bit widening multiply
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Box-Muller; pairs are generated together so the call sequence is fixed
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // Fisher-Yates, descending index
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace hmtl
