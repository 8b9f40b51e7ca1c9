#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "biobred/types.hpp"

namespace biobred {

/* Seeded RNG used by every randomized component. The raw stream is
 * std::mt19937_64, but all mappings to ints/reals are hand-rolled here so
 * that a given seed produces the same draws regardless of how the standard
 * library implements its distributions. */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  // uniform double in [0, 1), 53 bits
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in {0, ..., n-1}, rejection sampling for exact uniformity
  std::int64_t below(std::int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::below: n must be positive");
    const auto un = static_cast<std::uint64_t>(n);
    // 2^64 mod un, computed without 128-bit arithmetic
    const std::uint64_t rem = (UINT64_MAX % un + 1) % un;
    std::uint64_t v = gen_();
    if (rem != 0) {
      const std::uint64_t bound = UINT64_MAX - rem + 1;  // multiple of un
      while (v >= bound) v = gen_();
    }
    return static_cast<std::int64_t>(v % un);
  }

  // standard normal via the polar method (no cached spare, keeps state simple)
  double normal() {
    while (true) {
      const double u = 2.0 * uniform() - 1.0;
      const double v = 2.0 * uniform() - 1.0;
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

  Vec gaussian(int d) {
    Vec z(d);
    for (int i = 0; i < d; ++i) z[i] = normal();
    return z;
  }

  Vec uniform_box(int d, double lo, double hi) {
    Vec z(d);
    for (int i = 0; i < d; ++i) z[i] = uniform(lo, hi);
    return z;
  }

  // uniform random b-subset of {0..n-1} via partial Fisher-Yates;
  // returned order is random but fully determined by the stream
  std::vector<int> sample_without_replacement(int n, int b) {
    if (b < 0 || b > n)
      throw std::invalid_argument("Rng::sample_without_replacement: need 0 <= b <= n");
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < b; ++i) {
      const auto j = i + static_cast<int>(below(n - i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(b));
    return idx;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace biobred
