#pragma once

#include <cstdint>
#include <cmath>
#include <random>

namespace dtz {

/// splitmix64 finalizer; the building block of the keyed generators below.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t v) { return mix64(seed ^ mix64(v)); }

/// Uniform in [0, 1) with 24 bits of resolution, exactly representable as float.
constexpr float unit_float(std::uint64_t bits) { return static_cast<float>(bits >> 40) * 0x1.0p-24f; }

/// Counter-based uniform draw keyed by (seed, step, layer, unit). Stateless, so
/// both worlds reproduce the same dropout mask without sharing generator state.
constexpr float counter_uniform(std::uint64_t seed, std::uint64_t step, std::uint64_t layer, std::uint64_t unit) {
  return unit_float(hash_combine(hash_combine(hash_combine(mix64(seed), step), layer), unit));
}

/// Deterministic stream engine. std::mt19937_64's sequence is fixed by the standard;
/// conversions to floats are done here rather than through <random> distributions,
/// whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  float uniform() { return unit_float(engine_()); }
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do x = engine_(); while (x >= limit);
    return x % n;
  }

  /// Box-Muller standard normal.
  double normal() {
    double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) std::swap(first[i - 1], first[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dtz
