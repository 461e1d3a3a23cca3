#pragma once

// Counter-based random streams. Every stochastic step draws from a SplitMix64
// generator seeded by hashing (seed, step, stream), so results do not depend
// on the order in which particles are processed.

#include <cstdint>
#include <limits>
#include <random>

#include <Eigen/Dense>

#include "magslam/error.hpp"
#include "magslam/geom.hpp"

namespace magslam {

class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t state = 0) : state_(state) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 33;
  x *= 0xFF51AFD7ED558CCDULL;
  x ^= x >> 33;
  x *= 0xC4CEB9FE1A85EC53ULL;
  return x ^ (x >> 33);
}

/// Generator for stream `stream` at counter `step` under a global seed.
inline SplitMix64 stream_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t stream) {
  std::uint64_t h = mix64(seed ^ 0x6A09E667F3BCC909ULL);
  h = mix64(h ^ (step + 0x9E3779B97F4A7C15ULL));
  h = mix64(h ^ (stream * 0xD1B54A32D192ED03ULL + 1));
  return SplitMix64(h);
}

/// Symmetric square root of a positive semidefinite matrix.
inline Mat3 psd_sqrt(const Mat3& s) {
  if (!s.allFinite()) throw DataError("covariance has non-finite entries");
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + s.cwiseAbs().maxCoeff()))
    throw DataError("covariance is not symmetric");
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(s);
  const Vec3 ev = eig.eigenvalues();
  if (ev.minCoeff() < -1e-12 * (1.0 + ev.cwiseAbs().maxCoeff()))
    throw DataError("covariance is not positive semidefinite");
  return eig.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

template <class Rng>
Vec3 standard_normal3(Rng& rng) {
  std::normal_distribution<double> n01;
  const double a = n01(rng);
  const double b = n01(rng);
  const double c = n01(rng);
  return {a, b, c};
}

}  // namespace magslam
