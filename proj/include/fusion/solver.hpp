#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "fusion/detail/inner.hpp"
#include "fusion/errors.hpp"
#include "fusion/losses.hpp"
#include "fusion/summation.hpp"

namespace fusion {

// Controls for the fused solver. Empty weight/penalty vectors mean "all ones"
// and "all zeros" respectively; use uniform() for the common equal-penalty
// setup.
struct FusionConfig {
  Vec weights;    // w_j >= 0, size m (empty: all 1)
  Vec penalties;  // lambda_j >= 0, size m (empty: all 0)
  double admm_step = 1.0;
  bool adapt_step = true;  // residual balancing: double/halve when 10x apart
  double tol_abs = 1e-8;
  double tol_rel = 1e-6;
  int max_outer_iters = 2000;
  double inner_tol = 1e-9;
  int inner_max_iters = 4000;

  static FusionConfig uniform(int m, double lambda, double weight = 1.0) {
    FusionConfig c;
    c.weights = Vec::Constant(m, weight);
    c.penalties = Vec::Constant(m, lambda);
    return c;
  }

  Vec resolved_weights(int m) const {
    if (weights.size() == 0) return Vec::Ones(m);
    if (weights.size() != m) throw InvalidParameterError("config: weight count mismatch");
    return weights;
  }

  Vec resolved_penalties(int m) const {
    if (penalties.size() == 0) return Vec::Zero(m);
    if (penalties.size() != m) throw InvalidParameterError("config: penalty count mismatch");
    return penalties;
  }

  void validate(int m) const {
    const Vec w = resolved_weights(m);
    const Vec l = resolved_penalties(m);
    if ((w.array() < 0.0).any()) throw InvalidParameterError("config: weights must be >= 0");
    if ((l.array() < 0.0).any()) throw InvalidParameterError("config: penalties must be >= 0");
    if (!(admm_step > 0.0)) throw InvalidParameterError("config: admm_step must be > 0");
    if (!(tol_abs > 0.0) || !(tol_rel > 0.0))
      throw InvalidParameterError("config: tolerances must be > 0");
    if (max_outer_iters < 1 || inner_max_iters < 1)
      throw InvalidParameterError("config: iteration budgets must be >= 1");
    if (!(inner_tol > 0.0)) throw InvalidParameterError("config: inner_tol must be > 0");
  }
};

struct SolverDiagnostics {
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  bool converged = false;
  std::vector<double> inner_residuals;  // per task, last outer iteration
};

// Joint estimate. theta_hat is reported in the consensus parametrization
// theta_j = beta + z_j, so pooled_mask[j] (z_j block-thresholded to exactly
// zero) implies theta_hat.col(j) == beta_hat bit for bit. The reported iterate
// is the best one encountered, which keeps the objective monotone relative to
// the zero start.
struct FusionSolution {
  Mat theta_hat;
  Vec beta_hat;
  double objective = 0.0;
  std::vector<bool> pooled_mask;
  SolverDiagnostics diagnostics;
};

struct SubproblemConvergenceError : ConvergenceError {
  SubproblemConvergenceError(Vec best_iterate, double res)
      : ConvergenceError("theta subproblem: iteration budget exhausted"),
        best(std::move(best_iterate)),
        residual(res) {}
  Vec best;
  double residual;
};

struct FusedConvergenceError : ConvergenceError {
  explicit FusedConvergenceError(FusionSolution best_solution)
      : ConvergenceError("solve_fused: no convergence within max_outer_iters"),
        best(std::move(best_solution)) {}
  FusionSolution best;
};

// Block soft-threshold: prox of kappa * ||.||_2.
inline Vec prox_group_norm(const Vec& v, double kappa) {
  if (kappa < 0.0) throw InvalidParameterError("prox_group_norm: kappa must be >= 0");
  if (kappa == 0.0) return v;
  const double norm = v.norm();
  if (norm <= kappa) return Vec::Zero(v.size());
  return (1.0 - kappa / norm) * v;
}

// F_{w,lambda}(Theta, beta) = sum_j w_j [ f_j(theta_j) + lambda_j |theta_j - beta| ].
inline double objective_value(const MultiTaskDataset& data, const LossSpec& spec, const Vec& w,
                              const Vec& lambda, const Mat& theta, const Vec& beta) {
  const int m = data.num_tasks();
  if (w.size() != m || lambda.size() != m) throw ShapeError("objective: weight/penalty size");
  if (theta.rows() != data.dim || theta.cols() != m || beta.size() != data.dim)
    throw ShapeError("objective: parameter shape mismatch");
  std::vector<double> terms(m);
  for (int j = 0; j < m; ++j) {
    const Vec tj = theta.col(j);
    terms[j] = w[j] * (empirical_risk(spec, tj, data.tasks[j]) + lambda[j] * (tj - beta).norm());
  }
  return pairwise_sum(terms);
}

// argmin_theta  w_scale * f_task(theta) + (strength/2) |theta - target|^2.
// The optimality residual is the minimal norm over the subdifferential box at
// kinks (see detail::subproblem_residual).
inline Vec theta_subproblem(const TaskDataset& task, const LossSpec& spec, const Vec& target,
                            double strength, double w_scale, double inner_tol = 1e-9,
                            int max_iters = 4000) {
  if (!(strength > 0.0)) throw InvalidParameterError("theta_subproblem: strength must be > 0");
  if (!(w_scale > 0.0)) throw InvalidParameterError("theta_subproblem: w_scale must be > 0");
  auto ws = detail::WeightedSamples::from_task(spec, task, w_scale);
  detail::ProxWorkspace wsp;
  InnerOptions opts{inner_tol, max_iters};
  detail::ProxResult r = detail::prox_weighted(ws, target, strength, opts, wsp);
  if (!r.converged) throw SubproblemConvergenceError(std::move(r.theta), r.residual);
  return r.theta;
}

// Single-task empirical risk minimizer.
inline Vec solve_stl(const TaskDataset& task, const LossSpec& spec, const InnerOptions& opts = {}) {
  auto ws = detail::WeightedSamples::from_task(spec, task, 1.0);
  detail::ProxResult r = detail::minimize_weighted(ws, opts);
  if (!r.converged) throw SubproblemConvergenceError(std::move(r.theta), r.residual);
  return r.theta;
}

// Data pooling: argmin_theta sum_j omega_j f_j(theta); omega defaults to n_j,
// i.e. plain sample pooling.
inline Vec solve_dp(const MultiTaskDataset& data, const LossSpec& spec, const Vec& weights = Vec(),
                    const InnerOptions& opts = {}) {
  Vec omega = weights;
  if (omega.size() == 0) {
    omega.resize(data.num_tasks());
    for (int j = 0; j < data.num_tasks(); ++j) omega[j] = data.tasks[j].size();
  }
  auto ws = detail::WeightedSamples::from_dataset(spec, data, omega);
  detail::ProxResult r = detail::minimize_weighted(ws, opts);
  if (!r.converged) throw SubproblemConvergenceError(std::move(r.theta), r.residual);
  return r.theta;
}

namespace detail {

// Stationarity certificate for Eq-style objectives: the minimal norm of the
// stacked subdifferential of F at (Theta, beta), minimizing jointly over the
// per-sample boxes and, wherever theta_j == beta, the free unit ball of the
// norm subgradient. Block coordinate descent; the ball step is an isotropic
// quadratic so its constrained minimizer is the projected unconstrained one.
inline double joint_optimality_residual(const MultiTaskDataset& data, const LossSpec& spec,
                                        const Vec& w, const Vec& lambda, const Mat& theta,
                                        const Vec& beta) {
  const int m = data.num_tasks();
  const int d = data.dim;
  struct TaskBlock {
    Vec fixed;                  // w_j * (subgradient base sum), norm term excluded
    std::vector<FreeDir> dirs;  // kink directions, scaled by w_j
    bool ball = false;          // theta_j == beta: s_j free in the unit ball
    Vec s;                      // norm subgradient selection (fixed unless ball)
    double q = 0.0;             // w_j * lambda_j
  };
  std::vector<TaskBlock> blocks(m);
  bool any_ball = false;
  for (int j = 0; j < m; ++j) {
    auto ws = WeightedSamples::from_task(spec, data.tasks[j], w[j]);
    SubdiffTerms terms = assemble_subdiff(ws, theta.col(j));
    TaskBlock& b = blocks[j];
    b.fixed = std::move(terms.fixed);
    b.dirs = std::move(terms.dirs);
    b.q = w[j] * lambda[j];
    const Vec diff = theta.col(j) - beta;
    const double dn = diff.norm();
    if (dn == 0.0) {
      b.ball = true;
      b.s = Vec::Zero(d);
      any_ball = true;
    } else {
      b.s = diff / dn;
    }
  }

  std::vector<Vec> R(m);
  Vec Rb(d);
  const int rounds = any_ball ? 80 : 1;
  for (int round = 0; round < rounds; ++round) {
    Rb.setZero();
    for (int j = 0; j < m; ++j) {
      Vec fixed = blocks[j].fixed + blocks[j].q * blocks[j].s;
      R[j] = bvls_residual(fixed, blocks[j].dirs);
      Rb -= blocks[j].q * blocks[j].s;
    }
    if (!any_ball) break;
    double moved = 0.0;
    for (int j = 0; j < m; ++j) {
      TaskBlock& b = blocks[j];
      if (!b.ball || b.q <= 0.0) continue;
      // minimize |A + q s|^2 + |C - q s|^2 over |s| <= 1; isotropic, so the
      // projected unconstrained minimizer is the constrained one
      const Vec A = R[j] - b.q * b.s;
      const Vec C = Rb + b.q * b.s;
      Vec s_new = (C - A) / (2.0 * b.q);
      const double sn = s_new.norm();
      if (sn > 1.0) s_new /= sn;
      const Vec ds = s_new - b.s;
      if (ds.squaredNorm() > 0.0) {
        R[j] += b.q * ds;
        Rb -= b.q * ds;
        b.s = s_new;
        moved += b.q * ds.norm();
      }
    }
    if (moved <= 1e-16) break;
  }
  double total = Rb.squaredNorm();
  for (int j = 0; j < m; ++j) total += R[j].squaredNorm();
  double best = std::sqrt(total);

  if (any_ball) {
    // Constructive feasible point, tight in the pooled regime: pick zero-sum
    // subgradient selections for the collapsed tasks via one joint BVLS
    // targeted at cancelling the fixed norm terms, then set s_j = -g_j /
    // (w_j lambda_j), which zeroes each collapsed block whenever the norm cap
    // allows. Any feasible selection upper-bounds the minimum.
    Vec target = Vec::Zero(d);  // = sum of fixed w_j lambda_j s_j over non-ball tasks
    for (int j = 0; j < m; ++j)
      if (!blocks[j].ball) target += blocks[j].q * blocks[j].s;
    Vec fixed = -target;
    std::vector<FreeDir> dirs;
    for (int j = 0; j < m; ++j) {
      if (!blocks[j].ball) continue;
      fixed += blocks[j].fixed;
      for (const auto& fd : blocks[j].dirs) dirs.push_back(fd);
    }
    std::vector<std::size_t> owner;  // dir index -> task
    for (int j = 0; j < m; ++j)
      if (blocks[j].ball)
        for (std::size_t k = 0; k < blocks[j].dirs.size(); ++k) owner.push_back(j);
    const Vec row_residual = bvls_residual(fixed, dirs);
    // per-task scaled subgradients G_j = w_j g_j from the chosen selections
    std::vector<Vec> G(m);
    for (int j = 0; j < m; ++j)
      if (blocks[j].ball) G[j] = blocks[j].fixed;
    for (std::size_t k = 0; k < dirs.size(); ++k) G[owner[k]] += dirs[k].u * dirs[k].dir;
    double total2 = 0.0;
    Vec rb = Vec::Zero(d);
    for (int j = 0; j < m; ++j) {
      if (!blocks[j].ball) {
        Vec f = blocks[j].fixed + blocks[j].q * blocks[j].s;
        total2 += bvls_residual(f, blocks[j].dirs).squaredNorm();
        rb -= blocks[j].q * blocks[j].s;
        continue;
      }
      const double cap = blocks[j].q;
      const double gn = G[j].norm();
      Vec s = cap > 0.0 && gn > 0.0 ? Vec(-G[j] / std::max(cap, gn)) : Vec::Zero(d);
      total2 += (G[j] + cap * s).squaredNorm();
      rb -= cap * s;
    }
    total2 += rb.squaredNorm();
    best = std::min(best, std::sqrt(total2));
  }
  return best;
}

}  // namespace detail

namespace detail {

// Exact pooled candidate: snap beta onto the vertex of the pooled problem and
// accept when the joint stationarity certificate of the fused program
// vanishes there. Returns true with the certified center on success.
inline bool certified_pooled_center(const MultiTaskDataset& data, const LossSpec& spec,
                                    const Vec& w, const Vec& lambda,
                                    const WeightedSamples& merged, const Vec& beta_guess,
                                    double tol, Vec& center_out) {
  Vec center;
  bool have = face_polish(merged, beta_guess, std::max(tol, 1e-7), center);
  if (!have && merged.spec.kind == LossKind::Quadratic) {
    center = quadratic_minimize(merged);
    have = true;
  }
  if (!have) return false;
  Mat cand(center.size(), data.num_tasks());
  cand.colwise() = center;
  if (joint_optimality_residual(data, spec, w, lambda, cand, center) > tol) return false;
  center_out = std::move(center);
  return true;
}

}  // namespace detail

// Certificate for a candidate (Theta, beta): nonnegative, ~0 at exact optima.
inline double optimality_residual(const MultiTaskDataset& data, const LossSpec& spec,
                                  const FusionConfig& config, const Mat& theta, const Vec& beta) {
  const int m = data.num_tasks();
  config.validate(m);
  if (theta.rows() != data.dim || theta.cols() != m || beta.size() != data.dim)
    throw ShapeError("optimality_residual: parameter shape mismatch");
  return detail::joint_optimality_residual(data, spec, config.resolved_weights(m),
                                           config.resolved_penalties(m), theta, beta);
}

// Sufficient penalty level for exact pooling: with lambda_j >= the returned
// value for all j, the w-weighted pooled minimizer is optimal for the fused
// program, so all columns collapse onto it. Uses the subdifferential sup-norm
// bound at the pooled solution; see the pooling-collapse tests.
inline double pooling_threshold(const MultiTaskDataset& data, const LossSpec& spec,
                                const Vec& weights, double margin_rel = 1e-3) {
  const int m = data.num_tasks();
  Vec w = weights.size() == 0 ? Vec::Ones(m) : weights;
  if (w.size() != m) throw InvalidParameterError("pooling_threshold: weight count mismatch");
  if ((w.array() <= 0.0).any())
    throw InvalidParameterError("pooling_threshold: weights must be positive");
  const Vec pooled = solve_dp(data, spec, w);
  double max_term = 0.0;
  for (int j = 0; j < m; ++j)
    max_term = std::max(max_term, w[j] * subgradient_sup_norm(spec, pooled, data.tasks[j]));
  const double raw = 2.0 / w.minCoeff() * max_term;
  return raw + margin_rel * (1.0 + raw);
}

// Consensus ADMM for
//   min_{Theta, beta} sum_j w_j [ f_j(theta_j) + lambda_j |theta_j - beta| ]
// with the splitting z_j = theta_j - beta and scaled duals u_j:
//   theta_j <- argmin w_j f_j + (sigma/2)|theta - (beta + z_j - u_j)|^2
//   z_j     <- prox_group_norm(theta_j - beta + u_j, w_j lambda_j / sigma)
//   beta    <- mean_j (theta_j - z_j + u_j)
//   u_j     <- u_j + theta_j - beta - z_j
// The block soft-threshold produces exact zeros, which is what makes the
// pooling collapse machine-testable. When every w_j * lambda_j is zero the
// program decouples into STL and beta is reported as the w-weighted mean of
// the columns by convention.
inline FusionSolution solve_fused(const MultiTaskDataset& data, const LossSpec& spec,
                                  const FusionConfig& config) {
  const int m = data.num_tasks();
  const int d = data.dim;
  config.validate(m);
  const Vec w = config.resolved_weights(m);
  const Vec lambda = config.resolved_penalties(m);
  const Vec coupling = w.cwiseProduct(lambda);

  InnerOptions inner{config.inner_tol, config.inner_max_iters};

  if (coupling.maxCoeff() == 0.0) {
    FusionSolution sol;
    sol.theta_hat.resize(d, m);
    sol.diagnostics.inner_residuals.assign(m, 0.0);
    for (int j = 0; j < m; ++j) {
      auto ws = detail::WeightedSamples::from_task(spec, data.tasks[j], 1.0);
      detail::ProxResult r = detail::minimize_weighted(ws, inner);
      sol.theta_hat.col(j) = r.theta;
      sol.diagnostics.inner_residuals[j] = r.residual;
    }
    const double wsum = w.sum();
    sol.beta_hat = wsum > 0.0 ? Vec((sol.theta_hat * w) / wsum)
                              : Vec(sol.theta_hat.rowwise().mean());
    sol.pooled_mask.assign(m, false);
    for (int j = 0; j < m; ++j)
      sol.pooled_mask[j] = (sol.theta_hat.col(j) - sol.beta_hat).norm() == 0.0;
    sol.objective = objective_value(data, spec, w, lambda, sol.theta_hat, sol.beta_hat);
    sol.diagnostics.converged = true;
    return sol;
  }

  std::vector<detail::WeightedSamples> tasks;
  std::vector<detail::ProxWorkspace> wsp(m);
  tasks.reserve(m);
  for (int j = 0; j < m; ++j)
    tasks.push_back(detail::WeightedSamples::from_task(spec, data.tasks[j], w[j]));

  double sigma = config.admm_step;
  Mat theta = Mat::Zero(d, m), z = Mat::Zero(d, m), u = Mat::Zero(d, m);

  // the zero iterate anchors the monotonicity contract; the center itself
  // starts at the pooled least-squares fit so badly scaled data does not have
  // to be crossed one prox step at a time
  FusionSolution best;
  best.theta_hat = Mat::Zero(d, m);
  best.beta_hat = Vec::Zero(d);
  best.pooled_mask.assign(m, true);
  best.objective = objective_value(data, spec, w, lambda, best.theta_hat, best.beta_hat);
  best.diagnostics.inner_residuals.assign(m, 0.0);

  Vec beta = detail::quadratic_minimize(detail::WeightedSamples::from_dataset(spec, data, w));

  std::vector<double> inner_res(m, 0.0);
  const double sqrt_dm = std::sqrt(static_cast<double>(d) * m);
  const double cert_tol = std::max(10.0 * config.inner_tol * m, 1e-10);
  std::optional<detail::WeightedSamples> merged;
  int pooled_streak = 0;
  bool converged = false;
  double prim_norm = 0.0, dual_norm = 0.0;
  int iter = 0;

  for (iter = 1; iter <= config.max_outer_iters; ++iter) {
    for (int j = 0; j < m; ++j) {
      if (w[j] == 0.0) {
        // task contributes nothing; keep theta_j glued to its target
        theta.col(j) = beta + z.col(j) - u.col(j);
        inner_res[j] = 0.0;
        continue;
      }
      const Vec target = beta + z.col(j) - u.col(j);
      detail::ProxResult r = detail::prox_weighted(tasks[j], target, sigma, inner, wsp[j]);
      theta.col(j) = r.theta;
      inner_res[j] = r.residual;
    }

    const Mat z_prev = z;
    const Vec beta_prev = beta;
    for (int j = 0; j < m; ++j)
      z.col(j) = prox_group_norm(theta.col(j) - beta + u.col(j), coupling[j] / sigma);

    beta = Vec::Zero(d);
    for (int j = 0; j < m; ++j) beta += theta.col(j) - z.col(j) + u.col(j);
    beta /= static_cast<double>(m);

    for (int j = 0; j < m; ++j) u.col(j) += theta.col(j) - beta - z.col(j);

    prim_norm = 0.0;
    dual_norm = 0.0;
    for (int j = 0; j < m; ++j) {
      prim_norm += (theta.col(j) - beta - z.col(j)).squaredNorm();
      dual_norm += ((beta + z.col(j)) - (beta_prev + z_prev.col(j))).squaredNorm();
    }
    prim_norm = std::sqrt(prim_norm);
    dual_norm = sigma * std::sqrt(dual_norm);

    // candidate in the consensus parametrization
    Mat cand = z;
    cand.colwise() += beta;
    const double cand_obj = objective_value(data, spec, w, lambda, cand, beta);
    if (cand_obj < best.objective) {
      best.theta_hat = cand;
      best.beta_hat = beta;
      best.objective = cand_obj;
      for (int j = 0; j < m; ++j) best.pooled_mask[j] = z.col(j).squaredNorm() == 0.0;
      best.diagnostics.inner_residuals = inner_res;
    }

    double iter_scale = std::max(theta.norm(), cand.norm());
    const double eps_pri = sqrt_dm * config.tol_abs + config.tol_rel * iter_scale;
    const double eps_dual = sqrt_dm * config.tol_abs + config.tol_rel * sigma * u.norm();
    if (prim_norm <= eps_pri && dual_norm <= eps_dual) {
      converged = true;
      break;
    }

    // Fully collapsed iterates converge by consensus averaging, which can be
    // slow; an exact pooled vertex with a vanishing joint certificate is a
    // finished solution, so exit through it when it verifies.
    bool all_pooled_now = true;
    for (int j = 0; j < m; ++j) all_pooled_now = all_pooled_now && z.col(j).squaredNorm() == 0.0;
    pooled_streak = all_pooled_now ? pooled_streak + 1 : 0;
    if (pooled_streak >= 3 && pooled_streak % 10 == 3) {
      if (!merged) merged = detail::WeightedSamples::from_dataset(spec, data, w);
      Vec center;
      if (detail::certified_pooled_center(data, spec, w, lambda, *merged, beta, cert_tol,
                                          center)) {
        Mat pooled_cand(d, m);
        pooled_cand.colwise() = center;
        const double pooled_obj = objective_value(data, spec, w, lambda, pooled_cand, center);
        if (pooled_obj <= best.objective) {
          best.theta_hat = pooled_cand;
          best.beta_hat = center;
          best.objective = pooled_obj;
          best.pooled_mask.assign(m, true);
          best.diagnostics.inner_residuals = inner_res;
        }
        converged = true;
        break;
      }
    }

    // Balancing is throttled after a burn-in: each sigma change rescales the
    // duals, and rescaling every iteration can trap the iteration in a limit
    // cycle; occasional adjustments still fix gross imbalance.
    if (config.adapt_step && (iter <= 100 || iter % 50 == 0)) {
      if (prim_norm > 10.0 * dual_norm && sigma < 1e4) {
        sigma *= 2.0;
        u *= 0.5;
      } else if (dual_norm > 10.0 * prim_norm && sigma > 1e-4) {
        sigma *= 0.5;
        u *= 2.0;
      }
    }
  }

  // Even at the iteration cap, a fully collapsed iterate may still admit the
  // certified pooled exit; the candidate is kept only if it helps.
  if (!converged) {
    bool all_pooled = true;
    for (int j = 0; j < m; ++j) all_pooled = all_pooled && z.col(j).squaredNorm() == 0.0;
    if (all_pooled) {
      if (!merged) merged = detail::WeightedSamples::from_dataset(spec, data, w);
      Vec center;
      if (detail::certified_pooled_center(data, spec, w, lambda, *merged, beta, cert_tol,
                                          center)) {
        Mat cand(d, m);
        cand.colwise() = center;
        const double cand_obj = objective_value(data, spec, w, lambda, cand, center);
        if (cand_obj <= best.objective) {
          best.theta_hat = cand;
          best.beta_hat = center;
          best.objective = cand_obj;
          best.pooled_mask.assign(m, true);
          best.diagnostics.inner_residuals = inner_res;
        }
        converged = true;
      }
    }
  }

  best.diagnostics.iterations = std::min(iter, config.max_outer_iters);
  best.diagnostics.primal_residual = prim_norm;
  best.diagnostics.dual_residual = dual_norm;
  best.diagnostics.converged = converged;
  if (!converged) throw FusedConvergenceError(std::move(best));
  return best;
}

}  // namespace fusion
