#pragma once

#include <cmath>
#include <cstdint>

namespace qslam {

/// SplitMix64 generator. Small state, splittable by hashing a stream id
/// into the seed, which is what makes per-pixel / per-ray streams cheap
/// and order-independent.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller. No caching of the second value, so
  /// the stream state depends only on the number of calls made.
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    // Guard against log(0).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  uint64_t state_;
};

/// Mix a stream id into a base seed so distinct ids give decorrelated
/// generators regardless of evaluation order.
inline SplitMix64 stream_rng(uint64_t seed, uint64_t stream) {
  SplitMix64 mixer(seed ^ (stream * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull));
  return SplitMix64(mixer.next());
}

}  // namespace qslam
