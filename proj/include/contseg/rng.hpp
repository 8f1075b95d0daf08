#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace contseg {

// Deterministic random source used everywhere the library needs randomness.
//
// The engine is std::mt19937_64, whose output sequence is pinned by the
// C++ standard, so identical seeds give identical streams on every platform.
// Distributions are implemented here by hand because the standard library's
// distribution objects are not bit-stable across implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1), 53 bits of precision.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive, rejection-sampled (no modulo bias).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Standard normal via Box-Muller; two engine draws per value.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates shuffle driven by uniform_int.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(
          uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer; used to derive independent stream seeds.
std::uint64_t splitmix64(std::uint64_t x);

// Derives the seed of a named sub-stream from a parent seed. Different
// stream ids give statistically independent sequences.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace contseg
