#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "fusion/errors.hpp"
#include "fusion/piecewise.hpp"
#include "fusion/summation.hpp"

namespace fusion {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// One observation. Covariates are plain features: nothing here ever prepends
// an all-one intercept column implicitly; generators and ingestion do that
// explicitly when asked to.
struct SamplePoint {
  Vec covariates;
  double response = 0.0;
};

struct TaskDataset {
  std::string task_id;
  std::vector<SamplePoint> samples;

  int dim() const { return samples.empty() ? 0 : static_cast<int>(samples.front().covariates.size()); }
  int size() const { return static_cast<int>(samples.size()); }
};

struct MultiTaskDataset {
  std::vector<TaskDataset> tasks;
  int dim = 0;

  int num_tasks() const { return static_cast<int>(tasks.size()); }

  static MultiTaskDataset from_tasks(std::vector<TaskDataset> tasks) {
    if (tasks.empty()) throw InvalidInputError("dataset must contain at least one task");
    MultiTaskDataset data;
    data.dim = tasks.front().dim();
    for (const auto& t : tasks) {
      if (t.samples.empty())
        throw InvalidInputError("task '" + t.task_id + "' has no samples");
      for (const auto& s : t.samples)
        if (static_cast<int>(s.covariates.size()) != data.dim)
          throw ShapeError("task '" + t.task_id + "' mixes covariate dimensions");
      for (const auto& u : tasks)
        if (&u != &t && u.task_id == t.task_id)
          throw InvalidInputError("duplicate task id '" + t.task_id + "'");
    }
    data.tasks = std::move(tasks);
    return data;
  }
};

enum class LossKind { Check, Newsvendor, GeneralizedNewsvendor, HingeRidge, Quadratic };

// Tagged description of the per-sample loss. Construct through the factories,
// which validate parameters once; evaluation assumes a valid spec.
//
// Newsvendor is represented internally as its exact check-loss multiple,
//   b*r+ + h*r- == (b+h) * rho_{b/(b+h)}(r),
// so the proportionality identity holds bitwise, not just approximately.
struct LossSpec {
  LossKind kind = LossKind::Quadratic;
  double tau = 0.5;             // Check / Newsvendor quantile level
  double backorder_cost = 0.0;  // Newsvendor b
  double holding_cost = 0.0;    // Newsvendor h
  double ridge = 0.0;           // HingeRidge mu
  std::shared_ptr<const PiecewisePolynomial> shortage_fn;  // GeneralizedNewsvendor B
  std::shared_ptr<const PiecewisePolynomial> overage_fn;   // GeneralizedNewsvendor H

  static LossSpec check(double tau) {
    require_tau(tau);
    LossSpec s;
    s.kind = LossKind::Check;
    s.tau = tau;
    return s;
  }

  static LossSpec newsvendor(double b, double h) {
    if (!(b > 0.0) || !(h > 0.0))
      throw InvalidParameterError("newsvendor costs must be positive");
    LossSpec s;
    s.kind = LossKind::Newsvendor;
    s.backorder_cost = b;
    s.holding_cost = h;
    s.tau = b / (b + h);
    return s;
  }

  static LossSpec generalized_newsvendor(PiecewisePolynomial shortage,
                                         PiecewisePolynomial overage) {
    const double b0 = shortage.value(0.0), h0 = overage.value(0.0);
    if (std::abs(b0 - h0) > 1e-12 * (1.0 + std::abs(b0)))
      throw InvalidParameterError("generalized newsvendor requires B(0) = H(0)");
    LossSpec s;
    s.kind = LossKind::GeneralizedNewsvendor;
    s.shortage_fn = std::make_shared<PiecewisePolynomial>(std::move(shortage));
    s.overage_fn = std::make_shared<PiecewisePolynomial>(std::move(overage));
    return s;
  }

  static LossSpec hinge_ridge(double mu) {
    if (!(mu >= 0.0)) throw InvalidParameterError("hinge ridge penalty must be >= 0");
    LossSpec s;
    s.kind = LossKind::HingeRidge;
    s.ridge = mu;
    return s;
  }

  static LossSpec quadratic() { return LossSpec{}; }

  // (b+h) for Newsvendor, 1 otherwise: the multiplier relating the loss to the
  // tau-level check loss of the residual.
  double check_scale() const {
    return kind == LossKind::Newsvendor ? backorder_cost + holding_cost : 1.0;
  }

  static void require_tau(double tau) {
    if (!(tau > 0.0 && tau < 1.0))
      throw InvalidParameterError("quantile level must lie in (0, 1)");
  }
};

// rho_tau(z) = (1 - tau) z^- + tau z^+.
inline double check_loss(double z, double tau) {
  LossSpec::require_tau(tau);
  return (1.0 - tau) * std::max(-z, 0.0) + tau * std::max(z, 0.0);
}

// tau = b / (b + h).
inline double tau_from_costs(double b, double h) {
  if (!(b >= 0.0) || !(h >= 0.0) || !(b + h > 0.0))
    throw InvalidParameterError("costs must be nonnegative with b + h > 0");
  return b / (b + h);
}

namespace detail {

inline void require_dim(const LossSpec&, const Vec& theta, const SamplePoint& s) {
  if (theta.size() != s.covariates.size())
    throw ShapeError("parameter/covariate dimension mismatch");
}

// Scalar derivative of the loss with respect to the residual r = y - x'theta,
// for the residual-based families. `side` selects the one-sided derivative at
// kinks: -1 left, +1 right, 0 the documented fixed choice (0 at r = 0,
// right-continuous at interior knots of B and H).
inline double residual_derivative(const LossSpec& spec, double r, int side) {
  switch (spec.kind) {
    case LossKind::Check:
    case LossKind::Newsvendor: {
      const double c = spec.check_scale();
      if (r > 0.0) return c * spec.tau;
      if (r < 0.0) return c * (spec.tau - 1.0);
      if (side > 0) return c * spec.tau;
      if (side < 0) return c * (spec.tau - 1.0);
      return 0.0;
    }
    case LossKind::GeneralizedNewsvendor: {
      const auto& B = *spec.shortage_fn;
      const auto& H = *spec.overage_fn;
      if (r > 0.0) return side < 0 ? B.derivative_left(r) : B.derivative_right(r);
      if (r < 0.0) return side > 0 ? -H.derivative_left(-r) : -H.derivative_right(-r);
      if (side > 0) return B.derivative_right(0.0);
      if (side < 0) return -H.derivative_right(0.0);
      return 0.0;
    }
    default:
      throw InvalidParameterError("residual_derivative: not a residual loss");
  }
}

}  // namespace detail

inline double loss_value(const LossSpec& spec, const Vec& theta, const SamplePoint& s) {
  detail::require_dim(spec, theta, s);
  const double fit = s.covariates.dot(theta);
  switch (spec.kind) {
    case LossKind::Check:
      return check_loss(s.response - fit, spec.tau);
    case LossKind::Newsvendor:
      return spec.check_scale() * check_loss(s.response - fit, spec.tau);
    case LossKind::GeneralizedNewsvendor: {
      const double r = s.response - fit;
      return spec.shortage_fn->value(std::max(r, 0.0)) +
             spec.overage_fn->value(std::max(-r, 0.0));
    }
    case LossKind::HingeRidge:
      return std::max(1.0 - s.response * fit, 0.0) + spec.ridge * theta.squaredNorm();
    case LossKind::Quadratic: {
      const double r = s.response - fit;
      return 0.5 * r * r;
    }
  }
  throw InvalidParameterError("unknown loss kind");
}

// One fixed element of the subdifferential. The selection at kinks is part of
// the contract: residual losses contribute 0 at residual exactly 0 (valid
// since 0 lies in the scaled [tau-1, tau] interval), the hinge contributes
// only the ridge term 2*mu*theta at margin exactly 1, and interior knots of
// generalized costs use the right derivative.
inline Vec loss_subgradient(const LossSpec& spec, const Vec& theta, const SamplePoint& s) {
  detail::require_dim(spec, theta, s);
  const double fit = s.covariates.dot(theta);
  switch (spec.kind) {
    case LossKind::Check:
    case LossKind::Newsvendor:
    case LossKind::GeneralizedNewsvendor: {
      const double g = detail::residual_derivative(spec, s.response - fit, 0);
      return (-g) * s.covariates;
    }
    case LossKind::HingeRidge: {
      Vec g = (2.0 * spec.ridge) * theta;
      if (s.response * fit < 1.0) g -= s.response * s.covariates;
      return g;
    }
    case LossKind::Quadratic:
      return (fit - s.response) * s.covariates;
  }
  throw InvalidParameterError("unknown loss kind");
}

// Empirical risk f(theta) = mean of loss_value over samples, in sample order
// with pairwise summation: the value is independent of how callers parallelize
// around this function.
inline double empirical_risk(const LossSpec& spec, const Vec& theta, const TaskDataset& task) {
  if (task.samples.empty())
    throw InvalidInputError("empirical_risk: task '" + task.task_id + "' is empty");
  std::vector<double> vals(task.samples.size());
  if (spec.kind == LossKind::Newsvendor) {
    // Accumulate the unit check losses and scale the mean once, so the
    // newsvendor risk equals (b + h) times the check risk bitwise.
    for (std::size_t i = 0; i < task.samples.size(); ++i) {
      detail::require_dim(spec, theta, task.samples[i]);
      vals[i] = check_loss(task.samples[i].response - task.samples[i].covariates.dot(theta),
                           spec.tau);
    }
    return spec.check_scale() * pairwise_mean(vals);
  }
  for (std::size_t i = 0; i < task.samples.size(); ++i)
    vals[i] = loss_value(spec, theta, task.samples[i]);
  return pairwise_mean(vals);
}

inline Vec empirical_subgradient(const LossSpec& spec, const Vec& theta, const TaskDataset& task) {
  if (task.samples.empty())
    throw InvalidInputError("empirical_subgradient: task '" + task.task_id + "' is empty");
  const auto n = task.samples.size();
  Vec sum = pairwise_vector_sum(n, theta.size(), [&](std::size_t i) {
    return loss_subgradient(spec, theta, task.samples[i]);
  });
  return sum / static_cast<double>(n);
}

// Parametrization of one sample's subdifferential: { base + u * dir, u in
// [lo, hi] }. Smooth samples have lo == hi == 0. `kink_tol` is the absolute
// residual (or margin) half-width within which a sample is treated as sitting
// on a kink; iterative solvers cannot land on kinks exactly, so certificate
// computations need a small band (scaled by the sample's magnitude).
struct SampleSubdiff {
  Vec base;
  Vec dir;
  double lo = 0.0;
  double hi = 0.0;
};

inline SampleSubdiff sample_subdifferential(const LossSpec& spec, const Vec& theta,
                                            const SamplePoint& s, double kink_tol = 0.0) {
  detail::require_dim(spec, theta, s);
  const double fit = s.covariates.dot(theta);
  const double scale = 1.0 + std::abs(s.response) + std::abs(fit);
  const double band = kink_tol * scale;
  SampleSubdiff out;
  out.dir = Vec::Zero(theta.size());
  switch (spec.kind) {
    case LossKind::Check:
    case LossKind::Newsvendor:
    case LossKind::GeneralizedNewsvendor: {
      const double r = s.response - fit;
      double glo, ghi;
      if (std::abs(r) <= band) {
        glo = detail::residual_derivative(spec, 0.0, -1);
        ghi = detail::residual_derivative(spec, 0.0, +1);
      } else if (spec.kind == LossKind::GeneralizedNewsvendor) {
        glo = detail::residual_derivative(spec, r, -1);
        ghi = detail::residual_derivative(spec, r, +1);
        // widen to the knot interval when r sits within the band of a knot
        for (double knot : spec.shortage_fn->knots())
          if (knot > 0.0 && std::abs(r - knot) <= band) {
            glo = std::min(glo, detail::residual_derivative(spec, knot, -1));
            ghi = std::max(ghi, detail::residual_derivative(spec, knot, +1));
          }
        for (double knot : spec.overage_fn->knots())
          if (knot > 0.0 && std::abs(r + knot) <= band) {
            glo = std::min(glo, detail::residual_derivative(spec, -knot, -1));
            ghi = std::max(ghi, detail::residual_derivative(spec, -knot, +1));
          }
      } else {
        glo = ghi = detail::residual_derivative(spec, r, 0);
      }
      out.base = Vec::Zero(theta.size());
      out.dir = -s.covariates;
      out.lo = glo;
      out.hi = ghi;
      if (out.lo == out.hi) {  // collapse fixed part into base
        out.base = out.lo * out.dir;
        out.dir = Vec::Zero(theta.size());
        out.lo = out.hi = 0.0;
      }
      return out;
    }
    case LossKind::HingeRidge: {
      const double margin = s.response * fit;
      out.base = (2.0 * spec.ridge) * theta;
      if (std::abs(margin - 1.0) <= band) {
        out.dir = -s.response * s.covariates;
        out.lo = 0.0;
        out.hi = 1.0;
      } else if (margin < 1.0) {
        out.base -= s.response * s.covariates;
      }
      return out;
    }
    case LossKind::Quadratic:
      out.base = (fit - s.response) * s.covariates;
      return out;
  }
  throw InvalidParameterError("unknown loss kind");
}

// Upper bound on sup { ||g|| : g in subdifferential of the empirical risk at
// theta } via the triangle inequality over samples. Used when computing
// sufficient pooling thresholds.
inline double subgradient_sup_norm(const LossSpec& spec, const Vec& theta,
                                   const TaskDataset& task, double kink_tol = 1e-6) {
  if (task.samples.empty())
    throw InvalidInputError("subgradient_sup_norm: task '" + task.task_id + "' is empty");
  double total = 0.0;
  for (const auto& s : task.samples) {
    const SampleSubdiff sd = sample_subdifferential(spec, theta, s, kink_tol);
    total += std::max((sd.base + sd.lo * sd.dir).norm(), (sd.base + sd.hi * sd.dir).norm());
  }
  return total / static_cast<double>(task.samples.size());
}

}  // namespace fusion
