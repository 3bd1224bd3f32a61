#include "laminar/rng.hpp"

#include <cmath>

namespace laminar {

uint64_t SplitMix64::below(uint64_t n) {
  unsigned __int128 m = (unsigned __int128)next() * (unsigned __int128)n;
  return (uint64_t)(m >> 64);
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
  SplitMix64 rng(seed ^ (a * 0x9E3779B97F4A7C15ull) ^ (b * 0xC2B2AE3D27D4EB4Full));
  return rng.next();
}

void shuffle_indices(std::vector<size_t>& idxs, SplitMix64& rng) {
  for (size_t i = idxs.size(); i > 1; --i) {
    size_t j = size_t(rng.below(i));
    std::swap(idxs[i - 1], idxs[j]);
  }
}

std::vector<size_t> seeded_permutation(size_t n, uint64_t seed, uint64_t epoch) {
  std::vector<size_t> idxs(n);
  for (size_t i = 0; i < n; ++i) idxs[i] = i;
  SplitMix64 rng(mix_seed(seed, epoch + 1));
  shuffle_indices(idxs, rng);
  return idxs;
}

double sample_normal(SplitMix64& rng) {
  double u1 = rng.next_double();
  double u2 = rng.next_double();
  while (u1 <= 0.0) u1 = rng.next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double sample_gamma(SplitMix64& rng, double shape) {
  if (shape < 1.0) {
    // Boost to shape+1 and scale back (Marsaglia-Tsang trick).
    double u = rng.next_double();
    while (u <= 0.0) u = rng.next_double();
    return sample_gamma(rng, shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = sample_normal(rng);
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = rng.next_double();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double sample_beta(SplitMix64& rng, double a, double b) {
  double x = sample_gamma(rng, a);
  double y = sample_gamma(rng, b);
  return x / (x + y);
}

}  // namespace laminar
