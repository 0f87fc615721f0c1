#pragma once

// Internal solver engines. Everything here is deterministic: fixed sweep
// orders, ordered reductions, no randomized pivoting. Public entry points live
// in fusion/solver.hpp.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "fusion/errors.hpp"
#include "fusion/losses.hpp"
#include "fusion/summation.hpp"

namespace fusion {

struct InnerOptions {
  double tol = 1e-9;     // optimality-residual target
  int max_iters = 4000;  // sweep / iteration budget per subproblem
};

namespace detail {

// ---------------------------------------------------------------------------
// Weighted sample collections: sum_i coef_i * loss(theta; sample_i).
// Single-task empirical risks use coef = w / n; data pooling mixes tasks with
// coef = omega_j / n_j. Weighting stays internal to the solvers; the public
// loss API is unweighted.
// ---------------------------------------------------------------------------

struct WeightedTerm {
  const SamplePoint* sample;
  double coef;
};

struct WeightedSamples {
  LossSpec spec;
  std::vector<WeightedTerm> terms;
  int dim = 0;

  static WeightedSamples from_task(const LossSpec& spec, const TaskDataset& task, double w) {
    if (task.samples.empty())
      throw InvalidInputError("solver: task '" + task.task_id + "' is empty");
    WeightedSamples ws;
    ws.spec = spec;
    ws.dim = task.dim();
    const double coef = w / static_cast<double>(task.samples.size());
    ws.terms.reserve(task.samples.size());
    for (const auto& s : task.samples) ws.terms.push_back({&s, coef});
    return ws;
  }

  static WeightedSamples from_dataset(const LossSpec& spec, const MultiTaskDataset& data,
                                      const Vec& task_weights) {
    if (data.tasks.empty()) throw InvalidInputError("solver: dataset is empty");
    if (task_weights.size() != data.num_tasks())
      throw ShapeError("solver: task weight count mismatch");
    WeightedSamples ws;
    ws.spec = spec;
    ws.dim = data.dim;
    for (int j = 0; j < data.num_tasks(); ++j) {
      const auto& task = data.tasks[j];
      if (task.samples.empty())
        throw InvalidInputError("solver: task '" + task.task_id + "' is empty");
      const double coef = task_weights[j] / static_cast<double>(task.samples.size());
      for (const auto& s : task.samples) ws.terms.push_back({&s, coef});
    }
    return ws;
  }

  double total_ridge() const {
    if (spec.kind != LossKind::HingeRidge) return 0.0;
    double c = 0.0;
    for (const auto& t : terms) c += t.coef;
    return c * spec.ridge;
  }

  double value(const Vec& theta) const {
    std::vector<double> vals(terms.size());
    for (std::size_t i = 0; i < terms.size(); ++i)
      vals[i] = terms[i].coef * loss_value(spec, theta, *terms[i].sample);
    return pairwise_sum(vals);
  }
};

// ---------------------------------------------------------------------------
// Minimal-norm subgradient selection. The subdifferential of a weighted sum at
// theta is { fixed + sum_i u_i * dir_i : u_i in [lo_i, hi_i] }; the minimal
// norm over that box is a small box-constrained least-squares problem solved
// by cyclic coordinate descent (each step is an exact clipped minimization).
// ---------------------------------------------------------------------------

struct FreeDir {
  Vec dir;
  double lo = 0.0;
  double hi = 0.0;
  double u = 0.0;
};

// Exact bounded-variable least squares in the style of Stark & Parker: the
// free set is re-solved by a dense least-squares factorization each pivot, so
// the result does not suffer the zigzag stalling of coordinate descent on
// ill-conditioned boxes. Problems here are tiny (one variable per kink
// sample), so the dense solves are cheap.
inline Vec bvls_residual(const Vec& fixed, std::vector<FreeDir>& dirs, int max_pivots = 400) {
  std::vector<FreeDir*> act;
  act.reserve(dirs.size());
  for (auto& d : dirs) {
    if (d.dir.squaredNorm() > 0.0 && d.hi > d.lo)
      act.push_back(&d);
    else
      d.u = std::clamp(0.0, d.lo, d.hi);
  }
  const int k = static_cast<int>(act.size());
  Vec r = fixed;
  for (auto& d : dirs)
    if (d.dir.squaredNorm() > 0.0 && !(d.hi > d.lo)) r += d.u * d.dir;
  if (k == 0) return r;

  enum { kAtLo = 0, kAtHi = 1, kFree = 2 };
  std::vector<int> status(k);
  for (int i = 0; i < k; ++i) {
    act[i]->u = std::clamp(0.0, act[i]->lo, act[i]->hi);
    status[i] = act[i]->u == act[i]->lo ? kAtLo : (act[i]->u == act[i]->hi ? kAtHi : kFree);
  }
  auto recompute = [&]() {
    r = fixed;
    for (auto& d : dirs)
      if (d.dir.squaredNorm() > 0.0) r += d.u * d.dir;
  };
  recompute();

  for (int pivot = 0; pivot < max_pivots; ++pivot) {
    std::vector<int> free_idx;
    for (int i = 0; i < k; ++i)
      if (status[i] == kFree) free_idx.push_back(i);

    if (!free_idx.empty()) {
      const auto nf = static_cast<int>(free_idx.size());
      Mat A(fixed.size(), nf);
      Vec rhs = -fixed;
      for (int i = 0; i < k; ++i)
        if (status[i] != kFree) rhs -= act[i]->u * act[i]->dir;
      for (int c = 0; c < nf; ++c) A.col(c) = act[free_idx[c]]->dir;
      const Vec sol = A.completeOrthogonalDecomposition().solve(rhs);
      // step toward the free solution until a bound blocks
      double alpha = 1.0;
      int blocker = -1;
      for (int c = 0; c < nf; ++c) {
        FreeDir* d = act[free_idx[c]];
        const double delta = sol[c] - d->u;
        if (delta > 0.0 && sol[c] > d->hi) {
          const double a = (d->hi - d->u) / delta;
          if (a < alpha) {
            alpha = a;
            blocker = c;
          }
        } else if (delta < 0.0 && sol[c] < d->lo) {
          const double a = (d->lo - d->u) / delta;
          if (a < alpha) {
            alpha = a;
            blocker = c;
          }
        }
      }
      for (int c = 0; c < nf; ++c) {
        FreeDir* d = act[free_idx[c]];
        d->u = std::clamp(d->u + alpha * (sol[c] - d->u), d->lo, d->hi);
      }
      if (blocker >= 0) {
        FreeDir* d = act[free_idx[blocker]];
        const double mid = 0.5 * (d->lo + d->hi);
        d->u = d->u <= mid ? d->lo : d->hi;
        status[free_idx[blocker]] = d->u == d->lo ? kAtLo : kAtHi;
        recompute();
        continue;
      }
      recompute();
    }

    // KKT at the bounds: free the worst violator, if any
    int worst = -1;
    double worst_viol = 0.0;
    for (int i = 0; i < k; ++i) {
      if (status[i] == kFree) continue;
      const double g = act[i]->dir.dot(r);
      const double tol = 1e-13 * act[i]->dir.norm() * (1.0 + r.norm());
      const double viol = status[i] == kAtLo ? -g - tol : g - tol;
      if (viol > worst_viol) {
        worst_viol = viol;
        worst = i;
      }
    }
    if (worst < 0) break;
    status[worst] = kFree;
  }
  return r;
}

inline double min_norm_over_box(const Vec& fixed, std::vector<FreeDir>& dirs) {
  return bvls_residual(fixed, dirs).norm();
}

// Kink band used when certifying iterates: samples whose residual/margin sits
// within kink_tol (times a per-sample scale) of a kink contribute their whole
// subdifferential interval. Iterative solvers cannot land on kinks exactly, so
// certificates need this band; polished solutions land within 1e-12 of kinks
// and are well inside it.
constexpr double kCertifyKinkTol = 1e-8;

struct SubdiffTerms {
  Vec fixed;
  std::vector<FreeDir> dirs;
};

inline SubdiffTerms assemble_subdiff(const WeightedSamples& ws, const Vec& theta,
                                     double kink_tol = kCertifyKinkTol) {
  SubdiffTerms out;
  std::vector<Vec> bases(ws.terms.size());
  for (std::size_t i = 0; i < ws.terms.size(); ++i) {
    SampleSubdiff sd = sample_subdifferential(ws.spec, theta, *ws.terms[i].sample, kink_tol);
    bases[i] = ws.terms[i].coef * sd.base;
    if (sd.lo != sd.hi && sd.dir.squaredNorm() > 0.0)
      out.dirs.push_back({ws.terms[i].coef * sd.dir, sd.lo, sd.hi, 0.0});
  }
  out.fixed = pairwise_vector_sum(bases.size(), theta.size(),
                                  [&](std::size_t i) { return bases[i]; });
  return out;
}

// Residual of the prox subproblem  min_theta ws(theta) + (strength/2)|theta-t|^2,
// minimized over the subdifferential box at kinks.
inline double subproblem_residual(const WeightedSamples& ws, const Vec& theta, const Vec& target,
                                  double strength, double kink_tol = kCertifyKinkTol) {
  SubdiffTerms terms = assemble_subdiff(ws, theta, kink_tol);
  if (strength != 0.0) terms.fixed += strength * (theta - target);
  return min_norm_over_box(terms.fixed, terms.dirs);
}

// ---------------------------------------------------------------------------
// Engine A: exact one-dimensional minimization. G convex with non-decreasing
// right derivative; bisect on its sign, then snap onto nearby kinks by value.
// ---------------------------------------------------------------------------

struct Convex1d {
  std::function<double(double)> value;
  std::function<double(double)> dplus;  // right derivative
  std::vector<double> kinks;            // candidate nonsmooth points (sorted not required)
};

inline double minimize_convex_1d(const Convex1d& f, double x0, int* bracket_failures = nullptr) {
  double d0 = f.dplus(x0);
  double lo, hi;
  if (d0 == 0.0) return x0;
  double step = 1.0 + std::abs(x0);
  if (d0 > 0.0) {
    hi = x0;
    double cur = x0 - step;
    int guard = 0;
    for (;; cur = hi - step) {
      const double d = f.dplus(cur);
      if (d < 0.0) {
        lo = cur;
        break;
      }
      if (d == 0.0) return cur;
      hi = cur;
      step *= 2.0;
      if (++guard > 300) {
        if (bracket_failures) ++*bracket_failures;
        throw ConvergenceError("1-d minimization: bracketing failed (unbounded below?)");
      }
    }
  } else {
    lo = x0;
    double cur = x0 + step;
    int guard = 0;
    for (;; cur = lo + step) {
      const double d = f.dplus(cur);
      if (d >= 0.0) {
        hi = cur;
        break;
      }
      lo = cur;
      step *= 2.0;
      if (++guard > 300) {
        if (bracket_failures) ++*bracket_failures;
        throw ConvergenceError("1-d minimization: bracketing failed (unbounded below?)");
      }
    }
  }
  // invariant: dplus(lo) < 0 <= dplus(hi); the leftmost minimizer is in (lo, hi]
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (f.dplus(mid) < 0.0)
      lo = mid;
    else
      hi = mid;
  }
  double best_x = hi;
  double best_v = f.value(hi);
  const double window = (hi - lo) + 1e-9 * (1.0 + std::abs(hi));
  auto consider = [&](double x) {
    const double v = f.value(x);
    if (v < best_v || (v == best_v && x < best_x)) {
      best_v = v;
      best_x = x;
    }
  };
  consider(lo);
  for (double k : f.kinks)
    if (k >= lo - window && k <= hi + window) consider(k);
  return best_x;
}

inline std::vector<double> kink_locations_1d(const WeightedSamples& ws) {
  std::vector<double> kinks;
  for (const auto& t : ws.terms) {
    const double x = t.sample->covariates[0];
    const double y = t.sample->response;
    if (x == 0.0) continue;
    switch (ws.spec.kind) {
      case LossKind::Check:
      case LossKind::Newsvendor:
        kinks.push_back(y / x);
        break;
      case LossKind::GeneralizedNewsvendor:
        kinks.push_back(y / x);
        for (double c : ws.spec.shortage_fn->knots())
          if (c > 0.0) kinks.push_back((y - c) / x);
        for (double c : ws.spec.overage_fn->knots())
          if (c > 0.0) kinks.push_back((y + c) / x);
        break;
      case LossKind::HingeRidge:
        if (y != 0.0) kinks.push_back(1.0 / (y * x));
        break;
      case LossKind::Quadratic:
        break;
    }
  }
  std::sort(kinks.begin(), kinks.end());
  return kinks;
}

// One-sided derivative of the weighted 1-d objective, exact at kinks.
inline double weighted_dplus_1d(const WeightedSamples& ws, double theta) {
  Vec th(1);
  th[0] = theta;
  double d = 0.0;
  for (const auto& t : ws.terms) {
    const SampleSubdiff sd = sample_subdifferential(ws.spec, th, *t.sample, 0.0);
    const double a = sd.base[0] + sd.lo * sd.dir[0];
    const double b = sd.base[0] + sd.hi * sd.dir[0];
    d += t.coef * std::max(a, b);
  }
  return d;
}

inline double minimize_1d(const WeightedSamples& ws, double strength, double target) {
  Convex1d f;
  f.kinks = kink_locations_1d(ws);
  f.value = [&](double x) {
    Vec th(1);
    th[0] = x;
    double v = ws.value(th);
    if (strength > 0.0) v += 0.5 * strength * (x - target) * (x - target);
    return v;
  };
  f.dplus = [&](double x) {
    double d = weighted_dplus_1d(ws, x);
    if (strength > 0.0) d += strength * (x - target);
    return d;
  };
  const double x0 = strength > 0.0 ? target : 0.0;
  return minimize_convex_1d(f, x0);
}

// ---------------------------------------------------------------------------
// Engine B: dual coordinate ascent for max-affine losses (check, newsvendor,
// hinge + ridge) with a strongly convex quadratic part. Writing each loss term
// as  max_{v in [lo_i, hi_i]} v * (a_i - b_i' theta)  gives the concave dual
//   D(v) = v'a - |eta + B v|^2 / (2 kappa),   theta(v) = (eta + B v) / kappa,
// a box QP solved exactly coordinate-wise. After the duality gap is small, an
// active-set polish solves the KKT system of the interior coordinates so the
// returned point sits on its kinks exactly (up to linear-solve roundoff).
// ---------------------------------------------------------------------------

struct BoxDualData {
  Mat B;       // d x N
  Vec a;       // N
  Vec lo, hi;  // per-sample dual boxes (sample coefficients folded in)
  Vec bnorm2;
  double ridge = 0.0;  // adds 2*ridge to kappa
  bool valid = false;

  void build(const WeightedSamples& ws) {
    const int n = static_cast<int>(ws.terms.size());
    B.resize(ws.dim, n);
    a.resize(n);
    lo.resize(n);
    hi.resize(n);
    bnorm2.resize(n);
    for (int i = 0; i < n; ++i) {
      const auto& t = ws.terms[i];
      switch (ws.spec.kind) {
        case LossKind::Check:
        case LossKind::Newsvendor: {
          const double cc = t.coef * ws.spec.check_scale();
          B.col(i) = t.sample->covariates;
          a[i] = t.sample->response;
          lo[i] = cc * (ws.spec.tau - 1.0);
          hi[i] = cc * ws.spec.tau;
          break;
        }
        case LossKind::HingeRidge: {
          B.col(i) = t.sample->response * t.sample->covariates;
          a[i] = 1.0;
          lo[i] = 0.0;
          hi[i] = t.coef;
          break;
        }
        default:
          throw InvalidParameterError("box dual: unsupported loss kind");
      }
      bnorm2[i] = B.col(i).squaredNorm();
    }
    ridge = ws.total_ridge();
    valid = true;
  }
};

struct ProxResult {
  Vec theta;
  double residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

// Solve the KKT system of a guessed active set exactly: theta sits on the
// kinks of the active samples, inactive duals are pinned at the bound their
// residual sign dictates. Returns false when the guess is inconsistent.
inline bool box_dual_polish_try(const BoxDualData& bd, const std::vector<int>& active,
                                const Vec& v_pin, double kappa, const Vec& eta, Vec& theta_out) {
  const int n = static_cast<int>(bd.a.size());
  const int d = static_cast<int>(bd.B.rows());
  const int na = static_cast<int>(active.size());
  if (na > 2 * d + 8) return false;  // not near the optimal face yet

  std::vector<char> is_active(n, 0);
  for (int i : active) is_active[i] = 1;
  Vec w_pin = eta;
  for (int i = 0; i < n; ++i)
    if (!is_active[i] && v_pin[i] != 0.0) w_pin += v_pin[i] * bd.B.col(i);

  Vec theta;
  Vec u(na);
  if (na == 0) {
    theta = w_pin / kappa;
  } else {
    Mat M(d, na);
    for (int k = 0; k < na; ++k) M.col(k) = bd.B.col(active[k]);
    Vec rhs(na);
    for (int k = 0; k < na; ++k) rhs[k] = bd.a[active[k]] - M.col(k).dot(w_pin) / kappa;
    Mat gram = (M.transpose() * M) / kappa;
    u = gram.completeOrthogonalDecomposition().solve(rhs);
    if ((gram * u - rhs).norm() > 1e-8 * (1.0 + rhs.norm())) return false;
    for (int k = 0; k < na; ++k) {
      const int i = active[k];
      const double slack = 1e-10 * (bd.hi[i] - bd.lo[i]);
      if (u[k] < bd.lo[i] - slack || u[k] > bd.hi[i] + slack) return false;
      u[k] = std::clamp(u[k], bd.lo[i], bd.hi[i]);
    }
    theta = w_pin;
    for (int k = 0; k < na; ++k) theta += u[k] * M.col(k);
    theta /= kappa;
  }

  // complementarity: coordinates pinned at a bound must see the right sign
  const double tnorm = theta.norm();
  for (int i = 0; i < n; ++i) {
    if (is_active[i] || bd.bnorm2[i] == 0.0) continue;
    const double r = bd.a[i] - bd.B.col(i).dot(theta);
    const double stol = 1e-8 * (1.0 + std::abs(bd.a[i]) + std::sqrt(bd.bnorm2[i]) * tnorm);
    if (v_pin[i] == bd.hi[i] && r < -stol) return false;
    if (v_pin[i] == bd.lo[i] && r > stol) return false;
  }
  theta_out = std::move(theta);
  return true;
}

// Candidate active sets: the dual-interior coordinates, then primal near-kink
// bands of growing width. Coordinate ascent identifies the face slowly when
// the box is tight, while residual proximity flags it almost immediately, so
// both signals are tried.
inline bool box_dual_polish(const BoxDualData& bd, const Vec& v, const Vec& theta, double kappa,
                            const Vec& eta, Vec& theta_out) {
  const int n = static_cast<int>(bd.a.size());
  {
    std::vector<int> active;
    Vec v_pin = v;
    for (int i = 0; i < n; ++i) {
      const double margin = 1e-6 * (bd.hi[i] - bd.lo[i]);
      if (bd.bnorm2[i] > 0.0 && v[i] > bd.lo[i] + margin && v[i] < bd.hi[i] - margin)
        active.push_back(i);
      else
        v_pin[i] = (v[i] - bd.lo[i] <= bd.hi[i] - v[i]) ? bd.lo[i] : bd.hi[i];
    }
    if (box_dual_polish_try(bd, active, v_pin, kappa, eta, theta_out)) return true;
  }
  const double tnorm = theta.norm();
  for (double band : {1e-9, 1e-7, 1e-5, 1e-3}) {
    std::vector<int> active;
    Vec v_pin(n);
    for (int i = 0; i < n; ++i) {
      const double r = bd.a[i] - bd.B.col(i).dot(theta);
      const double scale = 1.0 + std::abs(bd.a[i]) + std::sqrt(bd.bnorm2[i]) * tnorm;
      if (bd.bnorm2[i] > 0.0 && std::abs(r) <= band * scale) {
        active.push_back(i);
        v_pin[i] = 0.0;
      } else {
        v_pin[i] = r > 0.0 ? bd.hi[i] : bd.lo[i];
      }
    }
    if (box_dual_polish_try(bd, active, v_pin, kappa, eta, theta_out)) return true;
  }
  return false;
}

inline ProxResult box_dual_solve(const WeightedSamples& ws, const BoxDualData& bd,
                                 const Vec& target, double strength, const InnerOptions& opts,
                                 Vec& warm_dual) {
  const int n = static_cast<int>(bd.a.size());
  const int d = ws.dim;
  const double kappa = strength + 2.0 * bd.ridge;
  if (!(kappa > 0.0)) throw InvalidParameterError("box dual: needs strict convexity");
  const Vec eta = strength * target;

  Vec v;
  if (warm_dual.size() == n) {
    v = warm_dual;
    for (int i = 0; i < n; ++i) v[i] = std::clamp(v[i], bd.lo[i], bd.hi[i]);
  } else {
    v.resize(n);
    for (int i = 0; i < n; ++i) v[i] = std::clamp(0.0, bd.lo[i], bd.hi[i]);
  }
  Vec w = eta + bd.B * v;
  Vec theta = w / kappa;

  auto primal = [&](const Vec& th) {
    double val = ws.value(th);
    return val + 0.5 * strength * (th - target).squaredNorm();
  };
  auto certify = [&](const Vec& th) { return subproblem_residual(ws, th, target, strength); };

  ProxResult out;
  auto finish = [&](const Vec& th, int sweeps) {
    out.theta = th;
    out.residual = certify(th);
    out.iterations = sweeps;
    out.converged = out.residual <= opts.tol;
    warm_dual = v;
    return out;
  };

  int sweep = 0;
  for (; sweep < opts.max_iters; ++sweep) {
    bool moved = false;
    for (int i = 0; i < n; ++i) {
      if (bd.bnorm2[i] == 0.0) continue;
      const double r = bd.a[i] - bd.B.col(i).dot(theta);
      const double v_new = std::clamp(v[i] + kappa * r / bd.bnorm2[i], bd.lo[i], bd.hi[i]);
      const double delta = v_new - v[i];
      if (delta != 0.0) {
        v[i] = v_new;
        w += delta * bd.B.col(i);
        theta = w / kappa;
        moved = true;
      }
    }
    const bool check_now = !moved || (sweep % 8 == 7);
    if (check_now) {
      w = eta + bd.B * v;  // refresh against incremental drift
      theta = w / kappa;
      double gap = 0.0;
      for (int i = 0; i < n; ++i) {
        const double r = bd.a[i] - bd.B.col(i).dot(theta);
        gap += std::max(bd.lo[i] * r, bd.hi[i] * r) - v[i] * r;
      }
      const double pval = primal(theta);
      const double scale = 1.0 + std::abs(pval);
      if (gap <= 1e-7 * scale || !moved || sweep % 64 == 63) {
        Vec polished;
        if (box_dual_polish(bd, v, theta, kappa, eta, polished)) {
          const double res = certify(polished);
          if (res <= opts.tol) {
            out.theta = std::move(polished);
            out.residual = res;
            out.iterations = sweep + 1;
            out.converged = true;
            warm_dual = v;
            return out;
          }
        }
      }
      if (gap <= 1e-13 * scale || !moved) {
        ProxResult r = finish(theta, sweep + 1);
        if (r.converged || !moved) return r;
      }
    }
  }
  (void)d;
  return finish(theta, sweep);
}

// ---------------------------------------------------------------------------
// Quadratic losses have closed-form prox and minimizers.
// ---------------------------------------------------------------------------

struct QuadraticData {
  Mat gram;  // sum coef_i x_i x_i'
  Vec xy;    // sum coef_i y_i x_i
  bool valid = false;
  Eigen::LDLT<Mat> factor;
  double factor_strength = -1.0;

  void build(const WeightedSamples& ws) {
    gram = Mat::Zero(ws.dim, ws.dim);
    xy = Vec::Zero(ws.dim);
    for (const auto& t : ws.terms) {
      gram.noalias() += t.coef * t.sample->covariates * t.sample->covariates.transpose();
      xy += t.coef * t.sample->response * t.sample->covariates;
    }
    valid = true;
    factor_strength = -1.0;
  }
};

inline Vec quadratic_prox(QuadraticData& qd, const Vec& target, double strength) {
  if (qd.factor_strength != strength) {
    Mat m = qd.gram;
    m.diagonal().array() += strength;
    qd.factor.compute(m);
    qd.factor_strength = strength;
  }
  return qd.factor.solve(qd.xy + strength * target);
}

// Unregularized weighted least squares; minimum-norm solution when singular.
inline Vec quadratic_minimize(const WeightedSamples& ws) {
  const int n = static_cast<int>(ws.terms.size());
  Mat A(n, ws.dim);
  Vec b(n);
  for (int i = 0; i < n; ++i) {
    const double s = std::sqrt(ws.terms[i].coef);
    A.row(i) = s * ws.terms[i].sample->covariates.transpose();
    b[i] = s * ws.terms[i].sample->response;
  }
  return A.completeOrthogonalDecomposition().solve(b);
}

// ---------------------------------------------------------------------------
// Engine for generalized newsvendor in d >= 2: split the per-sample residuals
// out as their own block (r_i = y_i - x_i' theta) and alternate between a
// linear solve in theta and independent 1-d proxes in r.
// ---------------------------------------------------------------------------

struct ResidualSplitData {
  Mat X;  // d x n
  Vec y;
  Vec coef;
  bool valid = false;
  Eigen::LDLT<Mat> factor;
  double factor_strength = -1.0;

  void build(const WeightedSamples& ws) {
    const int n = static_cast<int>(ws.terms.size());
    X.resize(ws.dim, n);
    y.resize(n);
    coef.resize(n);
    for (int i = 0; i < n; ++i) {
      X.col(i) = ws.terms[i].sample->covariates;
      y[i] = ws.terms[i].sample->response;
      coef[i] = ws.terms[i].coef;
    }
    valid = true;
    factor_strength = -1.0;
  }
};

inline double residual_prox_1d(const LossSpec& spec, double coef, double rho, double v) {
  Convex1d f;
  f.value = [&](double r) {
    const double phi = spec.shortage_fn->value(std::max(r, 0.0)) +
                       spec.overage_fn->value(std::max(-r, 0.0));
    return coef * phi + 0.5 * rho * (r - v) * (r - v);
  };
  f.dplus = [&](double r) {
    return coef * detail::residual_derivative(spec, r, +1) + rho * (r - v);
  };
  f.kinks.push_back(0.0);
  for (double c : spec.shortage_fn->knots())
    if (c > 0.0) f.kinks.push_back(c);
  for (double c : spec.overage_fn->knots())
    if (c > 0.0) f.kinks.push_back(-c);
  return minimize_convex_1d(f, v);
}

inline ProxResult residual_split_solve(const WeightedSamples& ws, ResidualSplitData& rs,
                                       const Vec& target, double strength,
                                       const InnerOptions& opts, Vec& warm_r, Vec& warm_p) {
  const int n = static_cast<int>(rs.y.size());
  const double rho = strength;
  if (rs.factor_strength != strength) {
    Mat m = rho * rs.X * rs.X.transpose();
    m.diagonal().array() += strength;
    rs.factor.compute(m);
    rs.factor_strength = strength;
  }
  Vec r, p;
  if (warm_r.size() == n) {
    r = warm_r;
    p = warm_p;
  } else {
    r = rs.y - rs.X.transpose() * Vec::Zero(ws.dim).eval();
    p = Vec::Zero(n);
  }
  Vec theta = Vec::Zero(ws.dim);
  int iter = 0;
  for (; iter < opts.max_iters; ++iter) {
    theta = rs.factor.solve(strength * target + rho * (rs.X * (rs.y - r + p)));
    const Vec fit = rs.X.transpose() * theta;
    Vec r_old = r;
    for (int i = 0; i < n; ++i)
      r[i] = residual_prox_1d(ws.spec, rs.coef[i], rho, rs.y[i] - fit[i] + p[i]);
    p += rs.y - fit - r;
    const double prim = (rs.y - fit - r).norm();
    const double dual = rho * (rs.X * (r - r_old)).norm();
    const double scale = 1.0 + r.norm() + fit.norm();
    if (prim <= 1e-12 * scale * std::sqrt(n) && dual <= 1e-12 * scale * std::sqrt(n)) {
      ++iter;
      break;
    }
  }
  warm_r = r;
  warm_p = p;
  ProxResult out;
  out.theta = theta;
  out.residual = subproblem_residual(ws, theta, target, strength);
  out.iterations = iter;
  out.converged = out.residual <= std::max(opts.tol, 1e-7);
  return out;
}

// ---------------------------------------------------------------------------
// Prox dispatcher with per-problem workspace (warm duals, cached factors).
// ---------------------------------------------------------------------------

struct ProxWorkspace {
  BoxDualData box;
  QuadraticData quad;
  ResidualSplitData split;
  Vec warm_dual;
  Vec warm_r, warm_p;
};

inline ProxResult prox_weighted(const WeightedSamples& ws, const Vec& target, double strength,
                                const InnerOptions& opts, ProxWorkspace& wsp) {
  if (!(strength > 0.0)) throw InvalidParameterError("prox: strength must be positive");
  if (target.size() != ws.dim) throw ShapeError("prox: target dimension mismatch");
  ProxResult out;
  if (ws.dim == 1) {
    Vec th(1);
    th[0] = minimize_1d(ws, strength, target[0]);
    out.theta = th;
    out.residual = subproblem_residual(ws, th, target, strength);
    out.iterations = 1;
    out.converged = out.residual <= opts.tol;
    return out;
  }
  switch (ws.spec.kind) {
    case LossKind::Quadratic: {
      if (!wsp.quad.valid) wsp.quad.build(ws);
      out.theta = quadratic_prox(wsp.quad, target, strength);
      out.residual = subproblem_residual(ws, out.theta, target, strength);
      out.iterations = 1;
      out.converged = out.residual <= opts.tol;
      return out;
    }
    case LossKind::Check:
    case LossKind::Newsvendor:
    case LossKind::HingeRidge: {
      if (!wsp.box.valid) wsp.box.build(ws);
      return box_dual_solve(ws, wsp.box, target, strength, opts, wsp.warm_dual);
    }
    case LossKind::GeneralizedNewsvendor: {
      if (!wsp.split.valid) wsp.split.build(ws);
      return residual_split_solve(ws, wsp.split, target, strength, opts, wsp.warm_r, wsp.warm_p);
    }
  }
  throw InvalidParameterError("unknown loss kind");
}

// Kink hyperplanes n'theta = o of the weighted sample set (none for the
// quadratic loss).
struct KinkPlanes {
  std::vector<Vec> normals;
  std::vector<double> offsets;
};

inline KinkPlanes kink_planes(const WeightedSamples& ws) {
  KinkPlanes out;
  auto push = [&](Vec b, double o) {
    out.normals.push_back(std::move(b));
    out.offsets.push_back(o);
  };
  for (const auto& t : ws.terms) {
    const auto& s = *t.sample;
    switch (ws.spec.kind) {
      case LossKind::Check:
      case LossKind::Newsvendor:
        push(s.covariates, s.response);
        break;
      case LossKind::GeneralizedNewsvendor:
        push(s.covariates, s.response);
        for (double c : ws.spec.shortage_fn->knots())
          if (c > 0.0) push(s.covariates, s.response - c);
        for (double c : ws.spec.overage_fn->knots())
          if (c > 0.0) push(s.covariates, s.response + c);
        break;
      case LossKind::HingeRidge:
        push(Vec(s.response * s.covariates), 1.0);
        break;
      case LossKind::Quadratic:
        break;
    }
  }
  return out;
}

// Project theta onto the intersection of its near-kink hyperplanes and accept
// when the projected point certifies. This converts an iterate that is merely
// close to the optimal vertex into the exact vertex.
inline bool face_polish(const WeightedSamples& ws, const Vec& theta, double tol, Vec& out) {
  const int d = ws.dim;
  KinkPlanes planes = kink_planes(ws);
  std::vector<Vec>& normals = planes.normals;
  std::vector<double>& offsets = planes.offsets;
  if (normals.empty()) return false;
  const double tnorm = theta.norm();
  // rank hyperplanes by scaled distance and try nested prefixes: this isolates
  // the true active set without committing to one distance threshold
  std::vector<std::pair<double, int>> ranked;
  for (std::size_t k = 0; k < normals.size(); ++k) {
    const double scale = 1.0 + std::abs(offsets[k]) + normals[k].norm() * tnorm;
    const double dist = std::abs(offsets[k] - normals[k].dot(theta)) / scale;
    if (dist <= 1e-2) ranked.push_back({dist, static_cast<int>(k)});
  }
  if (ranked.empty()) return false;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  const int max_prefix = std::min<int>(static_cast<int>(ranked.size()), 2 * d + 4);
  for (int prefix = 1; prefix <= max_prefix; ++prefix) {
    Mat N(prefix, d);
    Vec rhs(prefix);
    for (int k = 0; k < prefix; ++k) {
      const int idx = ranked[k].second;
      N.row(k) = normals[idx].transpose();
      rhs[k] = offsets[idx] - normals[idx].dot(theta);
    }
    const Vec delta = N.completeOrthogonalDecomposition().solve(rhs);
    if ((N * delta - rhs).norm() > 1e-9 * (1.0 + rhs.norm())) continue;
    Vec candidate = theta + delta;
    if (subproblem_residual(ws, candidate, candidate, 0.0) <= tol) {
      out = std::move(candidate);
      return true;
    }
  }
  return false;
}

// Exact descent over the kink arrangement for piecewise-linear objectives
// (check, newsvendor, hinge without ridge). From any start: take the minimal
// norm subgradient g at theta (exact over the active kink intervals), walk
// along -g to the first hyperplane crossing, re-anchor onto the planes hit,
// repeat. The objective strictly decreases face by face, so the walk reaches
// a point with 0 in the subdifferential in finitely many steps; this is a
// simplex-style active-set method driven by steepest descent.
inline bool edge_descent(const WeightedSamples& ws, Vec& theta, double tol, int max_steps) {
  const KinkPlanes planes = kink_planes(ws);
  const int p = static_cast<int>(planes.normals.size());
  if (p == 0) return false;
  const int d = ws.dim;
  double value = ws.value(theta);

  for (int step = 0; step < max_steps; ++step) {
    SubdiffTerms terms = assemble_subdiff(ws, theta);
    const Vec g = bvls_residual(terms.fixed, terms.dirs);
    const double gnorm = g.norm();
    if (gnorm <= tol) return true;
    const Vec dir = -g / gnorm;

    // first crossing along the ray theta + t * dir
    double tmax = std::numeric_limits<double>::infinity();
    const double tnorm = theta.norm();
    for (int k = 0; k < p; ++k) {
      const double nn = planes.normals[k].norm();
      const double scale = 1.0 + std::abs(planes.offsets[k]) + nn * tnorm;
      const double r = planes.offsets[k] - planes.normals[k].dot(theta);
      if (std::abs(r) <= 1e-11 * scale) continue;  // already on this plane
      const double slope = planes.normals[k].dot(dir);
      if (std::abs(slope) <= 1e-13 * nn) continue;
      const double t = r / slope;
      if (t > 1e-13 && t < tmax) tmax = t;
    }
    if (!std::isfinite(tmax)) return false;  // descent ray escapes the arrangement

    Vec candidate = theta + tmax * dir;
    // re-anchor exactly onto every plane now within roundoff distance
    {
      const double cnorm = candidate.norm();
      std::vector<int> near;
      for (int k = 0; k < p; ++k) {
        const double scale = 1.0 + std::abs(planes.offsets[k]) + planes.normals[k].norm() * cnorm;
        if (std::abs(planes.offsets[k] - planes.normals[k].dot(candidate)) <= 1e-9 * scale)
          near.push_back(k);
      }
      if (!near.empty() && static_cast<int>(near.size()) <= d) {
        Mat N(near.size(), d);
        Vec rhs(near.size());
        for (std::size_t k = 0; k < near.size(); ++k) {
          N.row(k) = planes.normals[near[k]].transpose();
          rhs[k] = planes.offsets[near[k]] - planes.normals[near[k]].dot(candidate);
        }
        const Vec delta = N.completeOrthogonalDecomposition().solve(rhs);
        if ((N * delta - rhs).norm() <= 1e-9 * (1.0 + rhs.norm())) candidate += delta;
      }
    }
    const double new_value = ws.value(candidate);
    if (!(new_value < value)) return gnorm <= tol;  // numerical wedge; stop honestly
    theta = candidate;
    value = new_value;
  }
  return false;
}

// Unconstrained minimization of a weighted empirical risk (STL / data pooling).
// 1-d and quadratic problems are solved exactly; hinge + positive ridge is
// strongly convex and goes straight to the dual engine; everything else runs
// the proximal point iteration, which terminates finitely on polyhedral
// objectives because each prox lands exactly on the optimal face.
inline ProxResult minimize_weighted(const WeightedSamples& ws, const InnerOptions& opts) {
  ProxResult out;
  if (ws.dim == 1) {
    Vec th(1);
    th[0] = minimize_1d(ws, 0.0, 0.0);
    out.theta = th;
    out.residual = subproblem_residual(ws, th, th, 0.0);
    out.iterations = 1;
    out.converged = out.residual <= opts.tol;
    return out;
  }
  if (ws.spec.kind == LossKind::Quadratic) {
    out.theta = quadratic_minimize(ws);
    out.residual = subproblem_residual(ws, out.theta, out.theta, 0.0);
    out.iterations = 1;
    out.converged = out.residual <= std::max(opts.tol, 1e-8);
    return out;
  }
  ProxWorkspace wsp;
  if (ws.spec.kind == LossKind::HingeRidge && ws.total_ridge() > 0.0) {
    wsp.box.build(ws);
    Vec zero_target = Vec::Zero(ws.dim);
    return box_dual_solve(ws, wsp.box, zero_target, 0.0, opts, wsp.warm_dual);
  }

  if (ws.spec.kind != LossKind::GeneralizedNewsvendor) {
    // piecewise-linear (check, newsvendor, ridgeless hinge): least-squares
    // warm start, then the exact arrangement walk
    Vec theta = quadratic_minimize(ws);
    const int steps = std::max(200, 4 * static_cast<int>(ws.terms.size()));
    const bool ok = edge_descent(ws, theta, opts.tol, steps);
    out.theta = theta;
    out.residual = subproblem_residual(ws, theta, theta, 0.0);
    out.iterations = steps;
    out.converged = ok && out.residual <= opts.tol;
    return out;
  }

  // generalized newsvendor: proximal point with geometrically shrinking
  // strength from a least-squares warm start (smooth between knots, so the
  // arrangement walk above does not apply), plus a stall detector for
  // problems whose infimum is not attained.
  double strength = 1.0;
  Vec theta = quadratic_minimize(ws);
  InnerOptions inner = opts;
  inner.tol = std::min(opts.tol * 1e-2, 1e-11);
  int total = 0;
  double prev_delta = std::numeric_limits<double>::infinity();
  double best_value = std::numeric_limits<double>::infinity();
  int stalled = 0;
  const int outer_budget = std::max(60, opts.max_iters / 8);
  for (int k = 0; k < outer_budget; ++k) {
    ProxResult step = prox_weighted(ws, theta, strength, inner, wsp);
    total += step.iterations;
    const double delta = (step.theta - theta).norm();
    theta = step.theta;
    if (strength * delta <= 0.5 * opts.tol) {
      out.theta = theta;
      out.residual = subproblem_residual(ws, theta, theta, 0.0);
      out.iterations = total;
      out.converged = out.residual <= opts.tol;
      if (out.converged) return out;
    }
    const double value = ws.value(theta);
    if (value < best_value - 1e-13 * (1.0 + std::abs(best_value))) {
      best_value = value;
      stalled = 0;
    } else if (++stalled >= 10) {
      break;
    }
    if (delta > 0.25 * prev_delta && strength > 1e-5) strength *= 0.5;
    prev_delta = delta;
  }
  out.theta = theta;
  out.residual = subproblem_residual(ws, theta, theta, 0.0);
  out.iterations = total;
  out.converged = out.residual <= opts.tol;
  return out;
}

}  // namespace detail
}  // namespace fusion
