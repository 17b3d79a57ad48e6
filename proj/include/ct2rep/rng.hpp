#pragma once

#include <cstdint>

namespace ct2rep {

// xoshiro256** seeded through splitmix64. All randomness in the project
// flows through this generator so results depend only on the seed, not on
// the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream keyed by `salt`.
  Rng fork(std::uint64_t salt) const;

 private:
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace ct2rep
