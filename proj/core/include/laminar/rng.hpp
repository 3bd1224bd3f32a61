#pragma once

#include <cstdint>
#include <vector>

namespace laminar {

// SplitMix64: the project-wide deterministic PRNG. All shuffling, synthetic
// data, parameter init and augmentation sampling go through this generator so
// that a fixed seed reproduces byte-identical results on any platform.
// Reference: Steele, Lea & Flood, "Fast splittable pseudorandom number
// generators" (the standard splitmix64 finalizer).
struct SplitMix64 {
  uint64_t state = 0;

  SplitMix64() = default;
  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n) via 128-bit multiply-shift (Lemire reduction,
  // single draw; bias is < 2^-64 and irrelevant at our scales).
  uint64_t below(uint64_t n);

  bool bernoulli(double p) { return next_double() < p; }
};

// Mixes auxiliary words (epoch, batch index, ...) into a base seed so that
// derived streams are decorrelated but fully determined by their inputs.
uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0);

// In-place Fisher-Yates using the supplied stream.
void shuffle_indices(std::vector<size_t>& idxs, SplitMix64& rng);

// The loader's documented shuffle: permutation of [0, n) from (seed, epoch).
std::vector<size_t> seeded_permutation(size_t n, uint64_t seed, uint64_t epoch);

// Standard normal via Box-Muller (two draws per call, no caching).
double sample_normal(SplitMix64& rng);

// Gamma(shape, 1) via Marsaglia-Tsang squeeze; Beta via two gammas.
double sample_gamma(SplitMix64& rng, double shape);
double sample_beta(SplitMix64& rng, double a, double b);

}  // namespace laminar
