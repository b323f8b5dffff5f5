#pragma once

#include <cmath>
#include <cstdint>

namespace kn {

/// Counter-based random stream. A stream is identified by an immutable key
/// derived from (seed, stream ids); drawing advances only a counter, so the
/// sequence for a given key is fixed regardless of what other streams do or
/// which thread owns them. split() derives an independent child stream and
/// never disturbs the parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(mix(0x7c0e1a4bULL, seed), stream)), ctr_(0) {}

  Rng split(std::uint64_t stream_id) const {
    Rng r;
    r.key_ = mix(key_ ^ 0x9e3779b97f4a7c15ULL, stream_id);
    r.ctr_ = 0;
    return r;
  }

  std::uint64_t next_u64() { return mix(key_, ctr_++); }

  /// Uniform in [0, 1).
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; always consumes two draws.
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool next_bernoulli(double p) { return next_uniform() < p; }

  /// Uniform integer in [0, bound), bound >= 1.
  std::uint64_t next_below(std::uint64_t bound) {
    // rejection sampling keeps the draw unbiased and stream-deterministic
    const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % bound);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % bound;
  }

 private:
  Rng() = default;

  static std::uint64_t mix(std::uint64_t k, std::uint64_t c) {
    std::uint64_t z = k + c * 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t ctr_;
};

}  // namespace kn
