#pragma once

// Shared utilities: deterministic RNG, seed derivation, hashing, percentiles.
// Everything downstream assumes these are reproducible across runs on the
// same platform; no global state, no wall-clock dependence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bg {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// ============================================================================
// Hashing / seed derivation
// ============================================================================

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stable per-purpose seed: hash the tag into the base seed and mix.
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
  uint64_t s = base ^ fnv1a64(tag);
  splitmix64(s);
  return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t base, uint64_t index) {
  uint64_t s = base ^ (0x9e3779b97f4a7c15ULL + index * 0xff51afd7ed558ccdULL);
  splitmix64(s);
  return splitmix64(s);
}

inline std::string hex64(uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// ============================================================================
// RNG — xoshiro256** seeded via splitmix64, explicit normal sampling so the
// stream is a pure function of the seed and the call sequence.
// ============================================================================

class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& word : state_) word = splitmix64(s);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // inclusive bounds
  int64_t uniform_int(int64_t lo, int64_t hi) {
    require(hi >= lo, "uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  // Box-Muller, one value per call (second root discarded; keeps the stream
  // stateless between calls).
  double normal() {
    double u1 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t state_[4];
};

// ============================================================================
// Small numeric helpers
// ============================================================================

// Linear-interpolated percentile (p in [0, 100]); input need not be sorted.
inline double percentile(std::vector<double> values, double p) {
  require(!values.empty(), "percentile: empty sample");
  require(p >= 0.0 && p <= 100.0, "percentile: p out of [0,100]");
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + (values[lo + 1] - values[lo]) * frac;
}

inline double mean_of(const std::vector<double>& v) {
  require(!v.empty(), "mean_of: empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double stddev_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace bg
