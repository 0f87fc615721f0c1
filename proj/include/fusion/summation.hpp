#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <functional>
#include <span>

namespace fusion {

// Pairwise (cascade) summation. Rounding error grows like O(log n) ulps and the
// result depends only on element order, not on any internal chunking, so sums
// are reproducible no matter how callers schedule the work.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

inline double pairwise_mean(std::span<const double> v) {
  return v.empty() ? 0.0 : pairwise_sum(v) / static_cast<double>(v.size());
}

// Pairwise sum of n generated vectors; term(i) is evaluated exactly once.
inline Eigen::VectorXd pairwise_vector_sum(
    std::size_t n, std::size_t dim,
    const std::function<Eigen::VectorXd(std::size_t)>& term) {
  struct Rec {
    static Eigen::VectorXd sum(std::size_t lo, std::size_t hi, std::size_t dim,
                               const std::function<Eigen::VectorXd(std::size_t)>& term) {
      if (hi - lo <= 8) {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
        for (std::size_t i = lo; i < hi; ++i) s += term(i);
        return s;
      }
      const std::size_t mid = lo + (hi - lo) / 2;
      return sum(lo, mid, dim, term) + sum(mid, hi, dim, term);
    }
  };
  if (n == 0) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  return Rec::sum(0, n, dim, term);
}

}  // namespace fusion
