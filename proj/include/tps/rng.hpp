#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "tps/common.hpp"

namespace tps {

// Seeded generator with explicitly coded distributions so every draw is
// pinned by this code, not by the standard library's implementation-defined
// distribution algorithms. One instance per purpose (init, shuffle, jitter).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; two uniform draws per sample, no cached spare.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "Rng::below: empty range");
    return gen_() % n;
  }

  // Knuth's multiplication method; adequate for the small rates used here.
  int poisson(double rate) {
    if (rate <= 0.0) return 0;
    const double limit = std::exp(-rate);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// Stable sub-seed for a named purpose, so adding a consumer never shifts
// the streams of existing ones.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose) {
  return splitmix64(master ^ fnv1a64(purpose));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose, std::uint64_t index) {
  return splitmix64(derive_seed(master, purpose) ^ splitmix64(index + 0x51ed270b7a7c1611ull));
}

}  // namespace tps
