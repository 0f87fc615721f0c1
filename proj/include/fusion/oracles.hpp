#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "fusion/errors.hpp"
#include "fusion/losses.hpp"
#include "fusion/solver.hpp"

namespace fusion {

// Regularity description used by the deterministic theorem checkers. rho and
// lip are the Hessian eigenvalue bounds of the smooth comparison function on a
// ball of the given radius; zeta_j are per-task subgradient approximation
// gaps; sigma is a subgaussian proxy kept as verification metadata only. For
// quadratic empirical risks these are computable from data (Gram eigenvalues,
// zeta = 0); for nonsmooth losses they are population quantities the caller
// must supply.
struct RegularityParams {
  double rho = 1.0;
  double lip = 1.0;
  double radius = std::numeric_limits<double>::infinity();
  Vec zeta;  // per-task gaps, >= 0 (empty: all zero)
  double zeta_total = 0.0;
  double sigma = 0.0;

  double kappa() const { return lip / rho; }

  void validate() const {
    if (!(rho > 0.0) || !(lip >= rho))
      throw InvalidParameterError("regularity: need 0 < rho <= lip");
    if (!(radius > 0.0)) throw InvalidParameterError("regularity: radius must be > 0");
    if (zeta.size() > 0) {
      if ((zeta.array() < 0.0).any())
        throw InvalidParameterError("regularity: zeta_j must be >= 0");
      if (zeta_total > zeta.sum() + 1e-12)
        throw InvalidParameterError("regularity: aggregate gap exceeds the per-task sum");
    }
  }
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Full argmin interval of q -> sum_i rho_tau(D_i - q): endpoints are order
// statistics located by the subgradient sign change. Degenerate when the
// minimizer is unique (tau * n not an integer, up to roundoff).
inline Interval exact_quantile_location(std::vector<double> samples, double tau) {
  if (samples.empty()) throw InvalidInputError("exact_quantile_location: no samples");
  LossSpec::require_tau(tau);
  std::sort(samples.begin(), samples.end());
  const auto n = static_cast<double>(samples.size());
  const double t = tau * n;
  const double k = std::round(t);
  if (std::abs(t - k) <= 1e-9 * n && k >= 1.0 && k < n) {
    const auto idx = static_cast<std::size_t>(k);
    return {samples[idx - 1], samples[idx]};
  }
  const auto idx = static_cast<std::size_t>(std::ceil(t - 1e-9 * n));
  return {samples[idx - 1], samples[idx - 1]};
}

struct BruteForceResult {
  Vec argmin;
  double value = std::numeric_limits<double>::infinity();
};

// Exhaustive grid minimization over a k <= 3 dimensional box. Returns the
// first grid minimizer in lexicographic order. The default cell budget caps
// runaway grids; callers size their instances to fit.
inline BruteForceResult brute_force_minimize(const std::function<double(const Vec&)>& objective,
                                             const std::vector<Interval>& box, double step,
                                             std::uint64_t cell_budget = 10'000'000) {
  if (box.empty() || box.size() > 3)
    throw InvalidParameterError("brute_force_minimize: box must have 1 to 3 dimensions");
  if (!(step > 0.0)) throw InvalidParameterError("brute_force_minimize: step must be > 0");
  const int k = static_cast<int>(box.size());
  std::vector<std::int64_t> counts(k);
  std::uint64_t cells = 1;
  for (int i = 0; i < k; ++i) {
    if (!(box[i].hi >= box[i].lo))
      throw InvalidParameterError("brute_force_minimize: empty box side");
    counts[i] = static_cast<std::int64_t>(std::floor((box[i].hi - box[i].lo) / step + 1e-9)) + 1;
    cells *= static_cast<std::uint64_t>(counts[i]);
    if (cells > cell_budget) throw BudgetError("brute_force_minimize: grid exceeds cell budget");
  }
  BruteForceResult best;
  Vec x(k);
  std::vector<std::int64_t> idx(k, 0);
  for (;;) {
    for (int i = 0; i < k; ++i) x[i] = box[i].lo + static_cast<double>(idx[i]) * step;
    const double v = objective(x);
    if (v < best.value) {
      best.value = v;
      best.argmin = x;
    }
    int i = k - 1;
    for (; i >= 0; --i) {
      if (++idx[i] < counts[i]) break;
      idx[i] = 0;
    }
    if (i < 0) break;
  }
  return best;
}

struct ReferenceSolution {
  Mat theta;
  Vec beta;
  double objective = std::numeric_limits<double>::infinity();
  double certified_gap = std::numeric_limits<double>::infinity();
};

// Slow cross-check solver, never used on the product path: projected
// subgradient descent on the joint variable (Theta, beta) with path-based
// target-level step sizes (Polyak steps against an adaptively lowered level;
// Brannlund / Nedic-Bertsekas). Each iterate also contributes a linearization
// lower bound over the projection ball, so certified_gap = best - lower is a
// true optimality gap whenever the optimum lies in B(0, radius).
inline ReferenceSolution reference_solve_fused(const MultiTaskDataset& data, const LossSpec& spec,
                                               const FusionConfig& config, long budget,
                                               double radius = 0.0) {
  const int m = data.num_tasks();
  const int d = data.dim;
  config.validate(m);
  if (budget < 1) throw InvalidParameterError("reference solver: budget must be >= 1");
  const Vec w = config.resolved_weights(m);
  const Vec lambda = config.resolved_penalties(m);

  if (radius <= 0.0) {
    double ymax = 0.0;
    for (const auto& task : data.tasks)
      for (const auto& s : task.samples) ymax = std::max(ymax, std::abs(s.response));
    radius = 4.0 * (1.0 + ymax);
  }

  const int joint = d * (m + 1);
  Vec x = Vec::Zero(joint);

  auto unpack_theta = [&](const Vec& v, int j) { return v.segment(j * d, d); };
  auto beta_of = [&](const Vec& v) { return v.segment(m * d, d); };

  auto eval = [&](const Vec& v) {
    Mat th(d, m);
    for (int j = 0; j < m; ++j) th.col(j) = unpack_theta(v, j);
    return objective_value(data, spec, w, lambda, th, beta_of(v));
  };
  auto subgrad = [&](const Vec& v) {
    Vec g = Vec::Zero(joint);
    const Vec beta = beta_of(v);
    for (int j = 0; j < m; ++j) {
      const Vec tj = unpack_theta(v, j);
      Vec gj = w[j] * empirical_subgradient(spec, tj, data.tasks[j]);
      const Vec diff = tj - beta;
      const double dn = diff.norm();
      if (dn > 0.0 && w[j] * lambda[j] > 0.0) {
        const Vec s = (w[j] * lambda[j] / dn) * diff;
        gj += s;
        g.segment(m * d, d) -= s;
      }
      g.segment(j * d, d) += gj;
    }
    return g;
  };

  double f_best = eval(x);
  Vec x_best = x;
  double lower = -std::numeric_limits<double>::infinity();

  Vec g = subgrad(x);
  double f_cur = f_best;
  lower = std::max(lower, f_cur - g.dot(x) - radius * g.norm());

  double delta = std::max(0.5 * (f_best - lower), 1e-3 * (1.0 + std::abs(f_best)));
  const double path_budget = 2.0 * radius;
  double path = 0.0;

  for (long k = 1; k < budget; ++k) {
    const double gn = g.norm();
    if (gn == 0.0) break;  // exact stationary point
    const double target = f_best - delta;
    const double step = (f_cur - target) / (gn * gn);
    x -= step * g;
    const double xn = x.norm();
    if (xn > radius) x *= radius / xn;

    f_cur = eval(x);
    if (f_cur < f_best) {
      f_best = f_cur;
      x_best = x;
    }
    path += step * gn;
    if (path > path_budget) {
      delta *= 0.5;
      path = 0.0;
    }

    g = subgrad(x);
    lower = std::max(lower, f_cur - g.dot(x) - radius * g.norm());
    if (f_best - lower <= 1e-13 * (1.0 + std::abs(f_best))) break;
  }

  ReferenceSolution out;
  out.theta.resize(d, m);
  for (int j = 0; j < m; ++j) out.theta.col(j) = unpack_theta(x_best, j);
  out.beta = beta_of(x_best);
  out.objective = f_best;
  out.certified_gap = std::max(0.0, f_best - lower);
  return out;
}

struct PersonalizationCheck {
  bool ok = false;
  Vec slack;  // bound minus distance, per task
};

// Verifies |theta_fused_j - theta_stl_j| <= lambda_j / rho + zeta_j / rho + tol
// for all tasks.
inline PersonalizationCheck check_personalization_bound(const Mat& fused, const Mat& stl,
                                                        const Vec& lambda,
                                                        const RegularityParams& params,
                                                        double tol = 1e-9) {
  params.validate();
  if (fused.rows() != stl.rows() || fused.cols() != stl.cols())
    throw ShapeError("personalization check: estimator shapes differ");
  const int m = static_cast<int>(fused.cols());
  if (lambda.size() != m) throw ShapeError("personalization check: penalty count mismatch");
  if (params.zeta.size() > 0 && params.zeta.size() != m)
    throw ShapeError("personalization check: zeta count mismatch");
  PersonalizationCheck out;
  out.slack.resize(m);
  out.ok = true;
  for (int j = 0; j < m; ++j) {
    const double zeta_j = params.zeta.size() > 0 ? params.zeta[j] : 0.0;
    const double bound = lambda[j] / params.rho + zeta_j / params.rho + tol;
    out.slack[j] = bound - (fused.col(j) - stl.col(j)).norm();
    if (out.slack[j] < 0.0) out.ok = false;
  }
  return out;
}

// inf_{x'} f(x') + lambda |x - x'| for convex 1-d f, by coarse grid over the
// search interval plus golden-section refinement (the inner objective is
// convex in x', hence unimodal).
inline double infimal_convolution_1d(const std::function<double(double)>& f, double lambda,
                                     double x, Interval search, int grid_points = 2001,
                                     int refine_iters = 200) {
  if (!(lambda >= 0.0)) throw InvalidParameterError("infimal convolution: lambda must be >= 0");
  if (grid_points < 3) throw InvalidParameterError("infimal convolution: grid too small");
  auto h = [&](double xp) { return f(xp) + lambda * std::abs(x - xp); };
  const double lo = std::min(search.lo, x), hi = std::max(search.hi, x);
  const double dx = (hi - lo) / (grid_points - 1);
  double best = std::numeric_limits<double>::infinity();
  int best_i = 0;
  for (int i = 0; i < grid_points; ++i) {
    const double v = h(lo + i * dx);
    if (v < best) {
      best = v;
      best_i = i;
    }
  }
  double a = lo + std::max(0, best_i - 1) * dx;
  double b = lo + std::min(grid_points - 1, best_i + 1) * dx;
  const double inv_phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - inv_phi * (b - a);
  double e = a + inv_phi * (b - a);
  double fc = h(c), fe = h(e);
  for (int it = 0; it < refine_iters && b - a > 1e-15 * (1.0 + std::abs(a)); ++it) {
    if (fc < fe) {
      b = e;
      e = c;
      fe = fc;
      c = b - inv_phi * (b - a);
      fc = h(c);
    } else {
      a = c;
      c = e;
      fc = fe;
      e = a + inv_phi * (b - a);
      fe = h(e);
    }
  }
  return std::min({best, fc, fe, h(0.5 * (a + b))});
}

}  // namespace fusion
