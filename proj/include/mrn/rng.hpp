#pragma once

#include <cmath>
#include <cstdint>

#include "mrn/vec2.hpp"

namespace mrn {

// xoshiro256++ with a splitmix64 seeder. Self-contained so that draws are
// reproducible across standard libraries and platforms; std::* distributions
// are implementation-defined and would break byte-identical reruns.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : s_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      word = z ^ (z >> 31);
    }
    have_spare_ = false;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  // Marsaglia polar method; one spare kept between calls.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    have_spare_ = true;
    return u * m;
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  Vec2 gaussian_vec(double stddev) { return {gaussian() * stddev, gaussian() * stddev}; }

  // Uniform direction on the unit circle.
  Vec2 unit_vec() {
    const double a = uniform(0.0, 2.0 * 3.14159265358979323846);
    return {std::cos(a), std::sin(a)};
  }

  // Derive an independent stream; used to give each subsystem its own RNG.
  Rng split(std::uint64_t tag) { return Rng(next_u64() ^ (tag * 0x2545f4914f6cdd1dULL)); }

 private:
  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::uint64_t s_[4] = {};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace mrn
