#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "fusion/errors.hpp"
#include "fusion/losses.hpp"
#include "fusion/rng.hpp"
#include "fusion/solver.hpp"
#include "fusion/summation.hpp"

namespace fusion {

// Penalty selection plan: lambda = C * sqrt(d / n) over the C grid, scored by
// k-fold cross-validation or a time-ordered holdout split.
struct CvPlan {
  std::vector<double> c_grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  int folds = 5;
  double train_fraction = 0.8;  // holdout variant
  std::uint64_t seed = 0;

  void validate() const {
    if (c_grid.empty()) throw InvalidParameterError("cv: C grid must be nonempty");
    for (double c : c_grid)
      if (!(c > 0.0)) throw InvalidParameterError("cv: C values must be positive");
    if (folds < 2) throw InvalidParameterError("cv: need at least 2 folds");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw InvalidParameterError("cv: train fraction must lie in (0, 1)");
  }
};

struct CvReport {
  std::vector<double> c_grid;
  std::vector<double> lambdas;                   // lambda(C), same order
  std::vector<double> mean_scores;               // validation score per C
  std::vector<std::vector<double>> fold_scores;  // [C][fold]
  int chosen_index = 0;
  double chosen_c = 0.0;
  double chosen_lambda = 0.0;
  int non_converged_fits = 0;  // grid fits scored from their best iterate
  FusionSolution refit;
};

inline std::vector<double> lambda_grid(int d, int n, const std::vector<double>& c_grid) {
  if (d < 1 || n < 1) throw InvalidParameterError("lambda_grid: d and n must be >= 1");
  const double unit = std::sqrt(static_cast<double>(d) / static_cast<double>(n));
  std::vector<double> out;
  out.reserve(c_grid.size());
  for (double c : c_grid) out.push_back(c * unit);
  return out;
}

namespace detail {

inline double mean_task_size(const MultiTaskDataset& data) {
  double total = 0.0;
  for (const auto& t : data.tasks) total += t.size();
  return total / data.num_tasks();
}

// Mean validation empirical risk, equally weighted over tasks.
inline double validation_score(const LossSpec& spec, const Mat& theta,
                               const std::vector<TaskDataset>& validation) {
  std::vector<double> per_task(validation.size());
  for (std::size_t j = 0; j < validation.size(); ++j)
    per_task[j] = empirical_risk(spec, theta.col(static_cast<int>(j)), validation[j]);
  return pairwise_mean(per_task);
}

inline FusionConfig with_lambda(const FusionConfig& base, int m, double lambda) {
  FusionConfig cfg = base;
  cfg.weights = base.resolved_weights(m);
  cfg.penalties = Vec::Constant(m, lambda);
  return cfg;
}

// Grid candidates are scored even when the solver stops at its iteration cap:
// the carried best iterate is a feasible estimate whose validation risk is
// still meaningful, and a candidate that converges poorly simply scores what
// it earned. Refits at the chosen lambda never swallow failures.
inline FusionSolution fit_for_scoring(const MultiTaskDataset& data, const LossSpec& spec,
                                      const FusionConfig& cfg, int& non_converged) {
  try {
    return solve_fused(data, spec, cfg);
  } catch (const FusedConvergenceError& e) {
    ++non_converged;
    return e.best;
  }
}

inline CvReport choose_and_refit(const MultiTaskDataset& data, const LossSpec& spec,
                                 const FusionConfig& base, CvReport report) {
  report.chosen_index = 0;
  for (std::size_t i = 1; i < report.mean_scores.size(); ++i)
    if (report.mean_scores[i] < report.mean_scores[report.chosen_index])
      report.chosen_index = static_cast<int>(i);
  report.chosen_c = report.c_grid[report.chosen_index];
  report.chosen_lambda = report.lambdas[report.chosen_index];
  report.refit =
      solve_fused(data, spec, with_lambda(base, data.num_tasks(), report.chosen_lambda));
  return report;
}

}  // namespace detail

// 5-fold style cross-validation: folds are assigned per task by a seeded
// shuffle (every task appears in every fold; per-task fold sizes differ by at
// most one). Scores average the validation empirical risk over tasks and
// folds; ties go to the earlier grid entry, i.e. the smaller C on the default
// ascending grid.
inline CvReport kfold_cv(const MultiTaskDataset& data, const LossSpec& spec, const CvPlan& plan,
                         const FusionConfig& base = {}) {
  plan.validate();
  const int m = data.num_tasks();
  const int k = plan.folds;
  for (const auto& t : data.tasks)
    if (t.size() < k)
      throw InvalidInputError("kfold_cv: task '" + t.task_id + "' has fewer samples than folds");

  // fold id per task per sample: shuffled round robin
  std::vector<std::vector<int>> fold_of(m);
  for (int j = 0; j < m; ++j) {
    const int n = data.tasks[j].size();
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng = Rng::seeded(plan.seed, 0x4f1dull + j);
    for (int i = n - 1; i > 0; --i)
      std::swap(perm[i], perm[rng.next_below(static_cast<std::uint64_t>(i + 1))]);
    fold_of[j].resize(n);
    for (int i = 0; i < n; ++i) fold_of[j][perm[i]] = i % k;
  }

  CvReport report;
  report.c_grid = plan.c_grid;
  report.lambdas = lambda_grid(data.dim, static_cast<int>(std::lround(detail::mean_task_size(data))),
                               plan.c_grid);
  report.fold_scores.assign(plan.c_grid.size(), std::vector<double>(k, 0.0));
  report.mean_scores.assign(plan.c_grid.size(), 0.0);

  for (std::size_t ci = 0; ci < plan.c_grid.size(); ++ci) {
    for (int fold = 0; fold < k; ++fold) {
      std::vector<TaskDataset> train(m), validation(m);
      for (int j = 0; j < m; ++j) {
        train[j].task_id = data.tasks[j].task_id;
        validation[j].task_id = data.tasks[j].task_id;
        for (int i = 0; i < data.tasks[j].size(); ++i) {
          (fold_of[j][i] == fold ? validation[j] : train[j])
              .samples.push_back(data.tasks[j].samples[i]);
        }
      }
      MultiTaskDataset train_data = MultiTaskDataset::from_tasks(std::move(train));
      FusionSolution sol = detail::fit_for_scoring(
          train_data, spec, detail::with_lambda(base, m, report.lambdas[ci]),
          report.non_converged_fits);
      report.fold_scores[ci][fold] = detail::validation_score(spec, sol.theta_hat, validation);
    }
    report.mean_scores[ci] = pairwise_mean(report.fold_scores[ci]);
  }
  return detail::choose_and_refit(data, spec, base, std::move(report));
}

// Time-ordered holdout: each task is split by sample order (no shuffle), fit
// on the leading fraction and scored on the rest, then refit on the whole
// input at the chosen lambda.
inline CvReport holdout_cv(const MultiTaskDataset& data, const LossSpec& spec, const CvPlan& plan,
                           const FusionConfig& base = {}) {
  plan.validate();
  const int m = data.num_tasks();
  std::vector<TaskDataset> train(m), validation(m);
  for (int j = 0; j < m; ++j) {
    const int n = data.tasks[j].size();
    const int cut = static_cast<int>(std::floor(plan.train_fraction * n));
    if (cut < 1 || cut >= n)
      throw InvalidInputError("holdout_cv: task '" + data.tasks[j].task_id +
                              "' has an empty train or validation slice");
    train[j].task_id = data.tasks[j].task_id;
    validation[j].task_id = data.tasks[j].task_id;
    for (int i = 0; i < n; ++i)
      (i < cut ? train[j] : validation[j]).samples.push_back(data.tasks[j].samples[i]);
  }
  MultiTaskDataset train_data = MultiTaskDataset::from_tasks(std::move(train));

  CvReport report;
  report.c_grid = plan.c_grid;
  report.lambdas = lambda_grid(data.dim, static_cast<int>(std::lround(detail::mean_task_size(data))),
                               plan.c_grid);
  report.fold_scores.assign(plan.c_grid.size(), std::vector<double>(1, 0.0));
  report.mean_scores.assign(plan.c_grid.size(), 0.0);
  for (std::size_t ci = 0; ci < plan.c_grid.size(); ++ci) {
    FusionSolution sol = detail::fit_for_scoring(
        train_data, spec, detail::with_lambda(base, m, report.lambdas[ci]),
        report.non_converged_fits);
    report.mean_scores[ci] = detail::validation_score(spec, sol.theta_hat, validation);
    report.fold_scores[ci][0] = report.mean_scores[ci];
  }
  return detail::choose_and_refit(data, spec, base, std::move(report));
}

}  // namespace fusion
