#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace didi {

/// Counter-based generator: draw i is the SplitMix64 finalizer applied to
/// `key + (i + 1) * 0x9E3779B97F4A7C15`, which is exactly the SplitMix64
/// sequence seeded with `key`. Only 64-bit integer arithmetic is involved,
/// so the integer stream is identical on every platform.
///
/// Derived draws:
///   uniform()  = (next() >> 11) * 2^-53, in [0, 1)
///   normal()   = Box-Muller cosine branch over two uniforms (u1 mapped to (0, 1])
///   below(n)   = (next() * n) >> 64   (multiply-shift, n < 2^32 in practice)
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t position = 0)
      : seed_(seed), key_(mix(seed)), position_(position) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return position_; }

  std::uint64_t next() noexcept {
    ++position_;
    return mix(key_ + position_ * kGamma);
  }

  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double normal() noexcept {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  /// Independent stream for a sub-task (episode, worker, ...). Does not advance this stream.
  Rng fork(std::uint64_t stream) const noexcept { return Rng(mix(seed_ ^ mix(stream + kGamma))); }

  static std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t position_;
};

}  // namespace didi
