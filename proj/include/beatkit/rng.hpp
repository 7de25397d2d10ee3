// SPDX-License-Identifier: Apache-2.0
#ifndef BEATKIT_RNG_HPP
#define BEATKIT_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace beatkit {

// Deterministic random source. Wraps mt19937_64 but implements the
// distributions by hand so that streams are reproducible across standard
// library implementations, not just across runs.
class Rng {
public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return double(engine_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive. Rejection-free modulo bias is
  // negligible for the small ranges used here, but reject anyway.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = uint64_t(hi - lo) + 1;
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return lo + int64_t(v % span);
  }

  // Box-Muller; deterministic, no cached spare value.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  // Normal truncated to [-2 sigma, 2 sigma], the usual transformer init.
  double truncated_normal(double stddev) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (std::abs(v) <= 2.0 * stddev) return v;
    }
  }

  template <class Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(0, int64_t(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent stream; used to give each sample draw its own rng.
  Rng fork(uint64_t salt) {
    uint64_t s = next_u64();
    return Rng(s ^ (salt * 0x9E3779B97F4A7C15ull));
  }

private:
  std::mt19937_64 engine_;
};

}  // namespace beatkit

#endif  // BEATKIT_RNG_HPP
