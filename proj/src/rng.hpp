#pragma once

#include <cstdint>
#include <vector>

namespace polydet {

// Deterministic PRNG (xoshiro256++ seeded via splitmix64). Self-contained so
// that streams are reproducible across compilers and standard libraries,
// which the run-to-run determinism guarantees depend on.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1).
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  uint64_t uniform_index(uint64_t n);
  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi);
  // Standard normal via Box-Muller (one value per call, cached pair).
  double normal();
  double normal(double mean, double stddev);
  // Poisson by inversion; intended for small lambda.
  int poisson(double lambda);
  bool bernoulli(double p);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = static_cast<size_t>(uniform_index(i + 1));
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t s_[4];
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

// Stable seed derivation for independent sub-streams (dataset scenes, stub
// noise, parameter init, ...). Not cryptographic; just well mixed.
uint64_t mix_seed(uint64_t base, uint64_t stream);

}  // namespace polydet
