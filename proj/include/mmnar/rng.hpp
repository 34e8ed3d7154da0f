#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace mmnar {

inline uint64_t splitmix64_next(uint64_t& s) {
  s += 0x9e3779b97f4a7c15ULL;
  uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Keyed deterministic stream. Distinct (seed, label, index) triples give
// independent streams, so per-patient / per-batch work can run in parallel
// without sharing generator state.
class StreamRng {
 public:
  StreamRng(uint64_t seed, std::string_view label, uint64_t index = 0) {
    state_ = mix(seed ^ 0x6a09e667f3bcc909ULL);
    state_ = mix(state_ ^ fnv1a64(label));
    state_ = mix(state_ ^ (index * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL));
  }

  uint64_t next_u64() { return splitmix64_next(state_); }

  // uniform in (0, 1)
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  // standard normal via Box-Muller (two uniforms per draw, no cached state)
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // uniform integer in [0, n)
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t mix(uint64_t x) {
    uint64_t s = x;
    return splitmix64_next(s);
  }
  uint64_t state_;
};

}  // namespace mmnar
