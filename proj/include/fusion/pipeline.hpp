#pragma once

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fusion/datagen.hpp"
#include "fusion/errors.hpp"
#include "fusion/losses.hpp"
#include "fusion/oracles.hpp"
#include "fusion/solver.hpp"
#include "fusion/tuning.hpp"

namespace fusion {

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

// Column mapping for tabular inputs. Simple comma-separated files: header row,
// '.' decimal, no quoting, no locale dependence.
struct IngestSchema {
  std::string task_column;
  std::string response_column;
  std::vector<std::string> covariate_columns;
  bool add_intercept = true;
  std::string time_column;  // optional; enables ordered windowing

  void validate() const {
    if (task_column.empty() || response_column.empty() || covariate_columns.empty())
      throw SchemaError("schema: task, response and at least one covariate column are required",
                        covariate_columns.empty() ? "covariates" : "task");
    std::vector<std::string> names = covariate_columns;
    names.push_back(task_column);
    names.push_back(response_column);
    if (!time_column.empty()) names.push_back(time_column);
    for (std::size_t i = 0; i < names.size(); ++i)
      for (std::size_t j = i + 1; j < names.size(); ++j)
        if (names[i] == names[j]) throw SchemaError("schema: duplicate column use", names[i]);
  }
};

struct TimedDataset {
  MultiTaskDataset data;
  std::vector<std::vector<double>> time;  // per task, parallel to samples; empty if no time column
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(field);
  return out;
}

inline double parse_cell(const std::string& cell, long row, const std::string& column) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end)
    throw ParseError("row " + std::to_string(row) + ": cannot parse '" + cell + "' in column '" +
                         column + "'",
                     row);
  return value;
}

}  // namespace detail

inline TimedDataset ingest_csv_timed(const std::string& path, const IngestSchema& schema) {
  schema.validate();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty file: '" + path + "'", "");
  const auto header = detail::split_csv_line(line);
  auto column_of = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw SchemaError("missing column '" + name + "'", name);
  };
  const int task_col = column_of(schema.task_column);
  const int resp_col = column_of(schema.response_column);
  const int time_col = schema.time_column.empty() ? -1 : column_of(schema.time_column);
  std::vector<int> cov_cols;
  for (const auto& name : schema.covariate_columns) cov_cols.push_back(column_of(name));

  std::vector<TaskDataset> tasks;
  std::vector<std::vector<double>> times;
  std::map<std::string, std::size_t> index_of;
  long row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("row " + std::to_string(row) + ": expected " +
                           std::to_string(header.size()) + " fields, found " +
                           std::to_string(cells.size()),
                       row);
    const std::string& id = cells[task_col];
    auto it = index_of.find(id);
    if (it == index_of.end()) {
      it = index_of.emplace(id, tasks.size()).first;
      tasks.push_back(TaskDataset{id, {}});
      times.emplace_back();
    }
    SamplePoint s;
    const int extra = schema.add_intercept ? 1 : 0;
    s.covariates.resize(static_cast<int>(cov_cols.size()) + extra);
    if (schema.add_intercept) s.covariates[0] = 1.0;
    for (std::size_t c = 0; c < cov_cols.size(); ++c)
      s.covariates[static_cast<int>(c) + extra] =
          detail::parse_cell(cells[cov_cols[c]], row, schema.covariate_columns[c]);
    s.response = detail::parse_cell(cells[resp_col], row, schema.response_column);
    if (time_col >= 0)
      times[it->second].push_back(detail::parse_cell(cells[time_col], row, schema.time_column));
    tasks[it->second].samples.push_back(std::move(s));
  }
  TimedDataset out;
  out.data = MultiTaskDataset::from_tasks(std::move(tasks));
  if (time_col >= 0) out.time = std::move(times);
  return out;
}

inline MultiTaskDataset ingest_csv(const std::string& path, const IngestSchema& schema) {
  return ingest_csv_timed(path, schema).data;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
  double max_error_all = std::numeric_limits<double>::quiet_NaN();
  double max_error_inliers = std::numeric_limits<double>::quiet_NaN();   // over S
  double max_error_outliers = std::numeric_limits<double>::quiet_NaN();  // over S^c
  double avg_test_loss = std::numeric_limits<double>::quiet_NaN();
};

// Estimation-error metrics against the generating truth.
inline MetricsReport evaluate_metrics(const Mat& estimate, const GroundTruth& truth) {
  if (estimate.rows() != truth.theta_star.rows() || estimate.cols() != truth.theta_star.cols())
    throw ShapeError("evaluate_metrics: estimate shape does not match the truth");
  MetricsReport report;
  const int m = static_cast<int>(estimate.cols());
  double all = 0.0, in = 0.0, out = 0.0;
  bool any_out = false;
  for (int j = 0; j < m; ++j) {
    const double err = (estimate.col(j) - truth.theta_star.col(j)).norm();
    all = std::max(all, err);
    if (truth.is_inlier(j)) {
      in = std::max(in, err);
    } else {
      out = std::max(out, err);
      any_out = true;
    }
  }
  report.max_error_all = all;
  report.max_error_inliers = in;
  if (any_out) report.max_error_outliers = out;
  return report;
}

// Held-out loss metric: mean empirical risk over tasks on test data.
inline MetricsReport evaluate_metrics(const LossSpec& spec, const Mat& estimate,
                                      const MultiTaskDataset& test) {
  if (estimate.rows() != test.dim || estimate.cols() != test.num_tasks())
    throw ShapeError("evaluate_metrics: estimate shape does not match the test data");
  MetricsReport report;
  std::vector<double> losses(test.num_tasks());
  for (int j = 0; j < test.num_tasks(); ++j)
    losses[j] = empirical_risk(spec, estimate.col(j), test.tasks[j]);
  report.avg_test_loss = pairwise_mean(losses);
  return report;
}

// ---------------------------------------------------------------------------
// Experiment orchestration
// ---------------------------------------------------------------------------

enum class Method { Fused, Stl, Dp };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Fused: return "fused";
    case Method::Stl: return "stl";
    case Method::Dp: return "dp";
  }
  return "?";
}

inline Method method_from_name(const std::string& name) {
  if (name == "fused") return Method::Fused;
  if (name == "stl") return Method::Stl;
  if (name == "dp") return Method::Dp;
  throw InvalidParameterError("unknown method '" + name + "'");
}

struct ExperimentConfig {
  std::string mode = "synthetic";  // synthetic | newsvendor
  std::vector<double> epsilon_grid = {0.0};
  std::vector<double> delta_grid = {0.0, 0.5, 1.0, 1.5, 2.0};
  int tasks = 20;
  int samples = 100;
  int dim = 10;
  double signal = 2.0;
  double tau = 0.9;
  double noise_sd = 0.5;
  int replications = 20;
  std::vector<Method> methods = {Method::Fused, Method::Stl, Method::Dp};
  CvPlan cv;
  FusionConfig solver;
  std::string out_dir = "out";
  std::uint64_t master_seed = 1;
  int threads = 1;
  // newsvendor mode
  std::vector<int> window_grid = {1, 2, 3};

  void validate() const {
    if (mode != "synthetic" && mode != "newsvendor")
      throw InvalidParameterError("config: mode must be synthetic or newsvendor");
    if (replications < 1) throw InvalidParameterError("config: replications must be >= 1");
    if (epsilon_grid.empty() || delta_grid.empty() || methods.empty())
      throw InvalidParameterError("config: grids and method list must be nonempty");
    if (tasks < 1 || samples < 1 || dim < 1)
      throw InvalidParameterError("config: tasks, samples, dim must be >= 1");
    if (threads < 1) throw InvalidParameterError("config: threads must be >= 1");
    cv.validate();
  }
};

struct ResultRow {
  std::string mode;
  Method method = Method::Fused;
  double epsilon = std::numeric_limits<double>::quiet_NaN();
  double delta = std::numeric_limits<double>::quiet_NaN();
  int window_months = -1;  // newsvendor x-axis; -1 emits an empty field
  int replication = 0;
  std::uint64_t seed = 0;
  double chosen_c = std::numeric_limits<double>::quiet_NaN();
  double chosen_lambda = std::numeric_limits<double>::quiet_NaN();
  MetricsReport metrics;
  int iterations = 0;
  bool converged = false;
  std::string status = "ok";
  std::string message;
};

struct ResultsTable {
  std::vector<ResultRow> rows;
};

// One synthetic cell: generate, tune, fit all methods, measure.
inline std::vector<ResultRow> run_synthetic_cell(const ExperimentConfig& cfg, double epsilon,
                                                 double delta, int replication,
                                                 std::uint64_t cell_seed) {
  std::vector<ResultRow> rows;
  ResultRow proto;
  proto.mode = "synthetic";
  proto.epsilon = epsilon;
  proto.delta = delta;
  proto.replication = replication;
  proto.seed = cell_seed;

  RelatednessSpec rspec;
  rspec.m = cfg.tasks;
  rspec.epsilon = epsilon;
  rspec.delta = delta;
  rspec.dim = cfg.dim;
  rspec.signal = cfg.signal;
  rspec.seed = seed_combine(cell_seed, 0);
  GroundTruth truth = generate_related_coefficients(rspec);
  MultiTaskDataset data =
      generate_quantile_tasks(truth, cfg.samples, cfg.tau, cfg.noise_sd, seed_combine(cell_seed, 1));
  LossSpec spec = LossSpec::check(cfg.tau);

  for (Method method : cfg.methods) {
    ResultRow row = proto;
    row.method = method;
    try {
      Mat estimate;
      switch (method) {
        case Method::Fused: {
          CvPlan plan = cfg.cv;
          plan.seed = seed_combine(cell_seed, 2);
          CvReport report = kfold_cv(data, spec, plan, cfg.solver);
          estimate = report.refit.theta_hat;
          row.chosen_c = report.chosen_c;
          row.chosen_lambda = report.chosen_lambda;
          row.iterations = report.refit.diagnostics.iterations;
          row.converged = report.refit.diagnostics.converged;
          break;
        }
        case Method::Stl: {
          estimate.resize(data.dim, data.num_tasks());
          InnerOptions opts{cfg.solver.inner_tol, cfg.solver.inner_max_iters};
          for (int j = 0; j < data.num_tasks(); ++j)
            estimate.col(j) = solve_stl(data.tasks[j], spec, opts);
          row.converged = true;
          break;
        }
        case Method::Dp: {
          InnerOptions opts{cfg.solver.inner_tol, cfg.solver.inner_max_iters};
          const Vec pooled = solve_dp(data, spec, Vec(), opts);
          estimate.resize(data.dim, data.num_tasks());
          estimate.colwise() = pooled;
          row.converged = true;
          break;
        }
      }
      row.metrics = evaluate_metrics(estimate, truth);
    } catch (const Error& e) {
      row.status = "error";
      row.message = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// Full sweep: cells are (epsilon, delta, replication); each derives its own
// seed from the master seed, so any cell is reproducible in isolation. Cells
// may run on several threads; rows land in preassigned slots, making the
// output byte-identical for every thread count.
inline ResultsTable run_synthetic_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  struct Cell {
    double epsilon, delta;
    int grid_index, replication;
  };
  std::vector<Cell> cells;
  int grid_index = 0;
  for (double eps : cfg.epsilon_grid)
    for (double delta : cfg.delta_grid) {
      for (int r = 0; r < cfg.replications; ++r) cells.push_back({eps, delta, grid_index, r});
      ++grid_index;
    }

  std::vector<std::vector<ResultRow>> slots(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const Cell& cell = cells[i];
      const std::uint64_t cell_seed = seed_combine(
          cfg.master_seed,
          seed_combine(static_cast<std::uint64_t>(cell.grid_index),
                       static_cast<std::uint64_t>(cell.replication)));
      slots[i] = run_synthetic_cell(cfg, cell.epsilon, cell.delta, cell.replication, cell_seed);
    }
  };
  if (cfg.threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < cfg.threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ResultsTable table;
  for (auto& rows : slots)
    for (auto& row : rows) table.rows.push_back(std::move(row));
  return table;
}

// ---------------------------------------------------------------------------
// Newsvendor pipeline
// ---------------------------------------------------------------------------

// Synthetic stand-in for the bakery sales data: per-store linear demand models
// sharing a common structure, calendric and lag covariates, consecutive months
// of daily observations. The real dataset is external; this fixture makes the
// windowed pipeline testable end to end.
struct BakeryFixtureSpec {
  int stores = 8;
  int history_months = 12;
  int test_months = 3;
  int days_per_month = 28;
  double store_spread = 0.12;  // sd of per-store coefficient offsets
  double noise_sd = 1.0;
  std::uint64_t seed = 0;
};

struct BakeryFixture {
  TimedDataset timed;       // time holds the 1-based month of each sample
  int first_test_month = 0;  // months >= this form the fixed evaluation window
};

inline BakeryFixture generate_bakery_fixture(const BakeryFixtureSpec& spec) {
  if (spec.stores < 1 || spec.history_months < 1 || spec.test_months < 1 ||
      spec.days_per_month < 7)
    throw InvalidParameterError("bakery fixture: degenerate size parameters");
  // covariates: intercept, sin/cos day-of-week, weekend, promo intensity,
  // temperature (AR(1), continuous), centered 7-day lag mean. The continuous
  // columns keep short training windows in general position.
  const int d = 7;
  Vec common(d);
  common << 20.0, 2.0, 1.5, 4.0, 5.0, 0.6, 0.3;
  const int total_days = (spec.history_months + spec.test_months) * spec.days_per_month;

  BakeryFixture fixture;
  std::vector<TaskDataset> tasks(spec.stores);
  fixture.timed.time.resize(spec.stores);
  // shared weather path across stores
  std::vector<double> temperature(total_days);
  {
    Rng weather = Rng::seeded(spec.seed, 7);
    double t = 0.0;
    for (int day = 0; day < total_days; ++day) {
      t = 0.8 * t + weather.next_gaussian();
      temperature[day] = t;
    }
  }
  for (int s = 0; s < spec.stores; ++s) {
    Rng rng = Rng::seeded(spec.seed, 100 + s);
    Vec theta = common;
    for (int i = 0; i < d; ++i)
      theta[i] += common[i] * spec.store_spread * rng.next_gaussian();
    tasks[s].task_id = "store" + std::to_string(s);
    std::vector<double> history;
    double lag_mean = theta[0];
    for (int day = 0; day < total_days; ++day) {
      const int dow = day % 7;
      Vec x(d);
      x[0] = 1.0;
      x[1] = std::sin(2.0 * 3.14159265358979323846 * dow / 7.0);
      x[2] = std::cos(2.0 * 3.14159265358979323846 * dow / 7.0);
      x[3] = (dow == 5 || dow == 6) ? 1.0 : 0.0;
      x[4] = rng.next_unit() < 0.15 ? 0.5 + 0.5 * rng.next_unit() : 0.0;
      x[5] = temperature[day];
      if (day >= 7) {
        double acc = 0.0;
        for (int back = 1; back <= 7; ++back) acc += history[day - back];
        lag_mean = acc / 7.0;
      }
      x[6] = lag_mean - theta[0];  // centered so the intercept keeps its meaning
      const double demand = theta.dot(x) + spec.noise_sd * rng.next_gaussian();
      history.push_back(demand);
      tasks[s].samples.push_back({x, demand});
      fixture.timed.time[s].push_back(static_cast<double>(day / spec.days_per_month + 1));
    }
  }
  fixture.timed.data = MultiTaskDataset::from_tasks(std::move(tasks));
  fixture.first_test_month = spec.history_months + 1;
  return fixture;
}

// Windowed newsvendor comparison: for each k in the window grid, fit on the
// trailing k months before the test window (tuning lambda by time-ordered
// holdout), then score the average per-task loss on the fixed test window.
inline ResultsTable run_newsvendor_experiment(const TimedDataset& timed, int first_test_month,
                                              const std::vector<int>& window_grid,
                                              const LossSpec& spec, const CvPlan& plan,
                                              const FusionConfig& base = {},
                                              const std::vector<Method>& methods = {
                                                  Method::Fused, Method::Stl, Method::Dp}) {
  if (timed.time.size() != static_cast<std::size_t>(timed.data.num_tasks()))
    throw InvalidInputError("newsvendor: time labels are required for every task");
  if (window_grid.empty()) throw InvalidParameterError("newsvendor: empty window grid");
  const int m = timed.data.num_tasks();
  for (int j = 0; j < m; ++j) {
    const auto& t = timed.time[j];
    if (t.size() != timed.data.tasks[j].samples.size())
      throw InvalidInputError("newsvendor: time labels out of sync for task '" +
                              timed.data.tasks[j].task_id + "'");
    if (!std::is_sorted(t.begin(), t.end()))
      throw InvalidInputError("newsvendor: task '" + timed.data.tasks[j].task_id +
                              "' is not time-ordered");
  }

  // fixed test window: everything at or after first_test_month
  std::vector<TaskDataset> test_tasks(m);
  for (int j = 0; j < m; ++j) {
    test_tasks[j].task_id = timed.data.tasks[j].task_id;
    for (std::size_t i = 0; i < timed.time[j].size(); ++i)
      if (timed.time[j][i] >= first_test_month)
        test_tasks[j].samples.push_back(timed.data.tasks[j].samples[i]);
    if (test_tasks[j].samples.empty())
      throw InvalidInputError("newsvendor: empty test window for task '" +
                              test_tasks[j].task_id + "'");
  }
  MultiTaskDataset test_data = MultiTaskDataset::from_tasks(std::move(test_tasks));

  ResultsTable table;
  for (int k : window_grid) {
    std::vector<TaskDataset> train_tasks(m);
    for (int j = 0; j < m; ++j) {
      if (timed.time[j].front() > first_test_month - k)
        throw InvalidInputError("newsvendor: task '" + timed.data.tasks[j].task_id +
                                "' has less than k = " + std::to_string(k) +
                                " months of history before the test window");
      train_tasks[j].task_id = timed.data.tasks[j].task_id;
      for (std::size_t i = 0; i < timed.time[j].size(); ++i) {
        const double month = timed.time[j][i];
        if (month >= first_test_month - k && month < first_test_month)
          train_tasks[j].samples.push_back(timed.data.tasks[j].samples[i]);
      }
      if (train_tasks[j].samples.empty())
        throw InvalidInputError("newsvendor: empty training window for task '" +
                                timed.data.tasks[j].task_id + "' at k = " + std::to_string(k));
    }
    MultiTaskDataset train = MultiTaskDataset::from_tasks(std::move(train_tasks));

    for (Method method : methods) {
      ResultRow row;
      row.mode = "newsvendor";
      row.method = method;
      row.window_months = k;
      try {
        Mat estimate;
        switch (method) {
          case Method::Fused: {
            CvReport report = holdout_cv(train, spec, plan, base);
            estimate = report.refit.theta_hat;
            row.chosen_c = report.chosen_c;
            row.chosen_lambda = report.chosen_lambda;
            row.iterations = report.refit.diagnostics.iterations;
            row.converged = report.refit.diagnostics.converged;
            break;
          }
          case Method::Stl: {
            estimate.resize(train.dim, m);
            InnerOptions opts{base.inner_tol, base.inner_max_iters};
            for (int j = 0; j < m; ++j) estimate.col(j) = solve_stl(train.tasks[j], spec, opts);
            row.converged = true;
            break;
          }
          case Method::Dp: {
            InnerOptions opts{base.inner_tol, base.inner_max_iters};
            const Vec pooled = solve_dp(train, spec, Vec(), opts);
            estimate.resize(train.dim, m);
            estimate.colwise() = pooled;
            row.converged = true;
            break;
          }
        }
        row.metrics = evaluate_metrics(spec, estimate, test_data);
      } catch (const Error& e) {
        row.status = "error";
        row.message = e.what();
      }
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

inline std::string sanitize_field(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

struct SummaryCell {
  int n_ok = 0;
  int n_total = 0;
  std::vector<double> max_err_all, max_err_in, max_err_out, test_loss;
};

inline std::pair<double, double> mean_ci(const std::vector<double>& xs) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (xs.empty()) return {nan, nan};
  const double mean = pairwise_mean(xs);
  if (xs.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (xs.size() - 1));
  return {mean, 1.96 * sd / std::sqrt(static_cast<double>(xs.size()))};
}

}  // namespace detail

// Writes results.csv (one row per method x grid point x replication),
// summary.csv (means and 95% normal-approximation half-widths over the ok
// replications of each cell), and plotdata.csv (long format for external
// plotting). Overwrites are idempotent; identical inputs produce identical
// bytes.
inline void emit_report(const ResultsTable& table, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir + "'");

  auto open = [&](const char* name) {
    std::ofstream out(fs::path(out_dir) / name, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(std::string("cannot write '") + name + "'");
    return out;
  };
  const auto fd = detail::format_double;

  {
    std::ofstream out = open("results.csv");
    out << "mode,method,epsilon,delta,window_months,replication,seed,chosen_c,chosen_lambda,"
           "max_error_all,max_error_S,max_error_Sc,avg_test_loss,iterations,converged,status,"
           "message\n";
    for (const auto& r : table.rows) {
      out << r.mode << ',' << method_name(r.method) << ',' << fd(r.epsilon) << ',' << fd(r.delta)
          << ',' << (r.window_months < 0 ? "" : std::to_string(r.window_months)) << ','
          << r.replication << ',' << r.seed << ',' << fd(r.chosen_c) << ',' << fd(r.chosen_lambda)
          << ',' << fd(r.metrics.max_error_all) << ',' << fd(r.metrics.max_error_inliers) << ','
          << fd(r.metrics.max_error_outliers) << ',' << fd(r.metrics.avg_test_loss) << ','
          << r.iterations << ',' << (r.converged ? 1 : 0) << ',' << r.status << ','
          << detail::sanitize_field(r.message) << '\n';
    }
  }

  // group by (mode, method, epsilon, delta, window) in first-appearance order
  std::vector<std::string> keys;
  std::map<std::string, detail::SummaryCell> cells;
  std::map<std::string, const ResultRow*> exemplars;
  for (const auto& r : table.rows) {
    std::ostringstream key;
    key << r.mode << ',' << method_name(r.method) << ',' << fd(r.epsilon) << ',' << fd(r.delta)
        << ',' << (r.window_months < 0 ? "" : std::to_string(r.window_months));
    const std::string k = key.str();
    if (!cells.count(k)) {
      keys.push_back(k);
      exemplars[k] = &r;
    }
    auto& cell = cells[k];
    ++cell.n_total;
    if (r.status == "ok") {
      ++cell.n_ok;
      if (!std::isnan(r.metrics.max_error_all)) cell.max_err_all.push_back(r.metrics.max_error_all);
      if (!std::isnan(r.metrics.max_error_inliers))
        cell.max_err_in.push_back(r.metrics.max_error_inliers);
      if (!std::isnan(r.metrics.max_error_outliers))
        cell.max_err_out.push_back(r.metrics.max_error_outliers);
      if (!std::isnan(r.metrics.avg_test_loss)) cell.test_loss.push_back(r.metrics.avg_test_loss);
    }
  }

  {
    std::ofstream out = open("summary.csv");
    out << "mode,method,epsilon,delta,window_months,n_ok,n_total,mean_max_error_all,"
           "ci_max_error_all,mean_max_error_S,ci_max_error_S,mean_max_error_Sc,ci_max_error_Sc,"
           "mean_avg_test_loss,ci_avg_test_loss\n";
    for (const auto& k : keys) {
      const auto& cell = cells[k];
      const auto all = detail::mean_ci(cell.max_err_all);
      const auto in = detail::mean_ci(cell.max_err_in);
      const auto outl = detail::mean_ci(cell.max_err_out);
      const auto loss = detail::mean_ci(cell.test_loss);
      out << k << ',' << cell.n_ok << ',' << cell.n_total << ',' << fd(all.first) << ','
          << fd(all.second) << ',' << fd(in.first) << ',' << fd(in.second) << ','
          << fd(outl.first) << ',' << fd(outl.second) << ',' << fd(loss.first) << ','
          << fd(loss.second) << '\n';
    }
  }

  {
    std::ofstream out = open("plotdata.csv");
    out << "mode,method,x,epsilon,metric,mean,lo,hi\n";
    for (const auto& k : keys) {
      const auto& cell = cells[k];
      const ResultRow* ex = exemplars[k];
      const std::string x = ex->mode == "newsvendor" ? std::to_string(ex->window_months)
                                                     : fd(ex->delta);
      auto emit = [&](const char* metric, const std::vector<double>& xs) {
        if (xs.empty()) return;
        const auto mc = detail::mean_ci(xs);
        out << ex->mode << ',' << method_name(ex->method) << ',' << x << ',' << fd(ex->epsilon)
            << ',' << metric << ',' << fd(mc.first) << ',' << fd(mc.first - mc.second) << ','
            << fd(mc.first + mc.second) << '\n';
      };
      emit("max_error_all", cell.max_err_all);
      emit("max_error_S", cell.max_err_in);
      emit("max_error_Sc", cell.max_err_out);
      emit("avg_test_loss", cell.test_loss);
    }
  }
}

// Dataset CSV writer used by the synth subcommand; drops the intercept column
// when the dataset carries one (ingestion adds it back).
inline void write_dataset_csv(const std::string& path, const MultiTaskDataset& data,
                              bool has_intercept) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  const int start = has_intercept ? 1 : 0;
  out << "task,y";
  for (int c = start; c < data.dim; ++c) out << ",x" << (c - start + 1);
  out << '\n';
  for (const auto& task : data.tasks)
    for (const auto& s : task.samples) {
      out << task.task_id << ',' << detail::format_double(s.response);
      for (int c = start; c < data.dim; ++c) out << ',' << detail::format_double(s.covariates[c]);
      out << '\n';
    }
}

}  // namespace fusion
