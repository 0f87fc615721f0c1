#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fusion/errors.hpp"
#include "fusion/losses.hpp"
#include "fusion/rng.hpp"

namespace fusion {

// Inverse standard normal CDF: Acklam's rational approximation polished by one
// Newton step through erfc, giving absolute error far below 1e-9.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw InvalidParameterError("normal_quantile: p must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double dd[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
  } else if (p <= phigh) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
  }
  // one Newton step: Phi(x) via erfc, density phi(x)
  const double cdf = 0.5 * std::erfc(-x * 0.7071067811865475244);
  const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
  return x - (cdf - p) / pdf;
}

// Construction parameters for (epsilon, delta)-related coefficient vectors on
// a sphere of the given radius.
struct RelatednessSpec {
  int m = 1;
  double epsilon = 0.0;
  double delta = 0.0;
  int dim = 20;
  double signal = 2.0;
  std::uint64_t seed = 0;

  int num_outliers() const {
    // guard floating rounding like 0.3 * 10 = 2.999...
    return static_cast<int>(std::floor(epsilon * m + 1e-9));
  }

  void validate() const {
    if (m < 1) throw InvalidParameterError("relatedness: m must be >= 1");
    if (dim < 1) throw InvalidParameterError("relatedness: dim must be >= 1");
    if (!(epsilon >= 0.0 && epsilon < 1.0))
      throw InvalidParameterError("relatedness: epsilon must lie in [0, 1)");
    if (!(signal > 0.0)) throw InvalidParameterError("relatedness: signal must be > 0");
    if (!(delta >= 0.0) || delta > 2.0 * signal)
      throw InvalidParameterError("relatedness: need 0 <= delta <= 2 * signal");
  }
};

struct GroundTruth {
  Mat gamma_star;              // dim x m
  Mat theta_star;              // (dim + 1) x m, intercept row first; filled by
                               // generate_quantile_tasks once tau and noise are known
  std::vector<int> inlier_set;  // sorted indices of S
  RelatednessSpec spec;

  bool is_inlier(int j) const {
    return std::binary_search(inlier_set.begin(), inlier_set.end(), j);
  }
};

namespace detail {
// RNG stream ids used by the generators; fixed so that S depends only on
// (seed, m, outlier count) and each task's coefficient draw has its own stream.
constexpr std::uint64_t kOutlierStream = 0;
constexpr std::uint64_t kCoefficientStreamBase = 1000;
constexpr std::uint64_t kDataStreamBase = 1u << 20;
}  // namespace detail

// Sphere construction: outlier tasks get gamma = signal * eta with eta uniform
// on the full unit sphere; inlier tasks get
//   gamma = (signal cos alpha) e1 + (signal sin alpha) eta,
// with alpha = 2 asin(delta / (2 signal)) and eta uniform on the unit sphere
// of the orthogonal complement of e1. Drawing eta orthogonal to e1 makes
// |gamma| = signal and |gamma - signal e1| = delta hold exactly, which the
// plain full-sphere draw would only satisfy approximately.
inline GroundTruth generate_related_coefficients(const RelatednessSpec& spec) {
  spec.validate();
  GroundTruth truth;
  truth.spec = spec;
  truth.gamma_star.resize(spec.dim, spec.m);

  const int outliers = spec.num_outliers();
  std::vector<int> order(spec.m);
  std::iota(order.begin(), order.end(), 0);
  Rng pick = Rng::seeded(spec.seed, detail::kOutlierStream);
  for (int i = 0; i < outliers; ++i) {
    const int j = i + static_cast<int>(pick.next_below(static_cast<std::uint64_t>(spec.m - i)));
    std::swap(order[i], order[j]);
  }
  std::vector<char> is_out(spec.m, 0);
  for (int i = 0; i < outliers; ++i) is_out[order[i]] = 1;
  for (int j = 0; j < spec.m; ++j)
    if (!is_out[j]) truth.inlier_set.push_back(j);

  const double alpha = 2.0 * std::asin(spec.delta / (2.0 * spec.signal));
  for (int j = 0; j < spec.m; ++j) {
    Rng rng = Rng::seeded(spec.seed, detail::kCoefficientStreamBase + j);
    if (is_out[j]) {
      truth.gamma_star.col(j) = spec.signal * rng.unit_sphere(spec.dim);
    } else if (spec.dim == 1) {
      truth.gamma_star(0, j) = spec.signal * std::cos(alpha);
    } else {
      Vec eta_rest = rng.unit_sphere(spec.dim - 1);
      Vec gamma = Vec::Zero(spec.dim);
      gamma[0] = spec.signal * std::cos(alpha);
      gamma.tail(spec.dim - 1) = (spec.signal * std::sin(alpha)) * eta_rest;
      truth.gamma_star.col(j) = gamma;
    }
  }
  return truth;
}

// Multi-task quantile-regression sampler: x ~ N(0, I_dim), y = x'gamma + eps
// with eps ~ N(0, noise_sd^2); emitted covariates are (1, x) of dimension
// dim + 1. Also fills truth.theta_star with the true quantile coefficients
// (intercept noise_sd * Phi^{-1}(tau) stacked over gamma). Deterministic in
// (seed); task j draws from its own stream.
inline MultiTaskDataset generate_quantile_tasks(GroundTruth& truth, int n, double tau,
                                                double noise_sd, std::uint64_t seed) {
  if (n < 1) throw InvalidParameterError("generate_quantile_tasks: n must be >= 1");
  if (!(noise_sd > 0.0))
    throw InvalidParameterError("generate_quantile_tasks: noise_sd must be > 0");
  LossSpec::require_tau(tau);
  const int dim = static_cast<int>(truth.gamma_star.rows());
  const int m = static_cast<int>(truth.gamma_star.cols());

  truth.theta_star.resize(dim + 1, m);
  const double intercept = noise_sd * normal_quantile(tau);
  for (int j = 0; j < m; ++j) {
    truth.theta_star(0, j) = intercept;
    truth.theta_star.col(j).tail(dim) = truth.gamma_star.col(j);
  }

  std::vector<TaskDataset> tasks(m);
  for (int j = 0; j < m; ++j) {
    Rng rng = Rng::seeded(seed, detail::kDataStreamBase + j);
    tasks[j].task_id = "task" + std::to_string(j);
    tasks[j].samples.reserve(n);
    for (int i = 0; i < n; ++i) {
      Vec x = rng.gaussian_vector(dim);
      const double y = x.dot(truth.gamma_star.col(j)) + noise_sd * rng.next_gaussian();
      Vec cov(dim + 1);
      cov[0] = 1.0;
      cov.tail(dim) = x;
      tasks[j].samples.push_back({std::move(cov), y});
    }
  }
  return MultiTaskDataset::from_tasks(std::move(tasks));
}

}  // namespace fusion
