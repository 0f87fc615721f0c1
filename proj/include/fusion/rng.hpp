#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>

#include "fusion/errors.hpp"

namespace fusion {

// SplitMix64 output function (Steele, Lea, Flood 2014). Pure integer mixing,
// identical on every platform.
inline constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Stable seed derivation used throughout the project: order-sensitive, so
// combine(a, b) != combine(b, a) in general. Every experiment cell derives its
// own seed with this, which makes any single cell reproducible in isolation.
inline constexpr std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b) {
  return splitmix64_mix(a + 0x9e3779b97f4a7c15ull +
                        splitmix64_mix(b ^ 0x517cc1b727220a95ull));
}

// Counter-based SplitMix64 generator with explicit stream splitting. The k-th
// output of stream s under seed q is mix(h(q, s) + k * golden), a pure function
// of (q, s, k): parallel consumers of disjoint streams always see the same
// values regardless of scheduling.
class Rng {
 public:
  static Rng seeded(std::uint64_t seed, std::uint64_t stream = 0) {
    Rng r;
    r.state_ = seed_combine(seed, stream);
    return r;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return splitmix64_mix(state_);
  }

  // Uniform in the open interval (0, 1); never returns 0 or 1, which keeps
  // log() in Box-Muller finite.
  double next_unit() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // Box-Muller, cosine branch only: exactly two uniforms per draw.
  double next_gaussian() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  Eigen::VectorXd gaussian_vector(int d) {
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v[i] = next_gaussian();
    return v;
  }

  // Uniform on the unit sphere via normalized Gaussians.
  Eigen::VectorXd unit_sphere(int d) {
    if (d < 1) throw InvalidParameterError("unit_sphere: dimension must be >= 1");
    for (;;) {
      Eigen::VectorXd v = gaussian_vector(d);
      const double norm = v.norm();
      if (norm > 1e-300) return v / norm;
    }
  }

 private:
  std::uint64_t state_ = 0;
};

}  // namespace fusion
