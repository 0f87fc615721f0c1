// Command-line front end: synthetic data emission, single fits, lambda
// cross-validation, full experiment sweeps and the windowed newsvendor
// pipeline. Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 convergence failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fusion/datagen.hpp"
#include "fusion/pipeline.hpp"
#include "fusion/solver.hpp"
#include "fusion/tuning.hpp"

using json = nlohmann::json;
using namespace fusion;

namespace {

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(csv);
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  for (const auto& s : split_list(csv)) out.push_back(std::stod(s));
  return out;
}

std::vector<int> parse_ints(const std::string& csv) {
  std::vector<int> out;
  for (const auto& s : split_list(csv)) out.push_back(std::stoi(s));
  return out;
}

struct LossFlags {
  std::string loss = "check";
  double tau = 0.9;
  double backorder = 9.0;
  double holding = 1.0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--loss", loss, "check or newsvendor")->default_val("check");
    cmd->add_option("--tau", tau, "quantile level for the check loss");
    cmd->add_option("--backorder", backorder, "newsvendor backorder cost per unit");
    cmd->add_option("--holding", holding, "newsvendor holding cost per unit");
  }

  LossSpec resolve() const {
    if (loss == "check") return LossSpec::check(tau);
    if (loss == "newsvendor") return LossSpec::newsvendor(backorder, holding);
    throw InvalidParameterError("unsupported loss '" + loss + "' (use check or newsvendor)");
  }
};

struct SchemaFlags {
  std::string task_col = "task";
  std::string response_col = "y";
  std::string covariates;
  std::string time_col;
  bool no_intercept = false;

  void attach(CLI::App* cmd, bool with_time) {
    cmd->add_option("--task-col", task_col, "task id column")->default_val("task");
    cmd->add_option("--response-col", response_col, "response column")->default_val("y");
    cmd->add_option("--covariates", covariates,
                    "comma-separated covariate columns (default: all x1..xK present)");
    if (with_time) cmd->add_option("--time-col", time_col, "time/month column");
    cmd->add_flag("--no-intercept", no_intercept, "do not prepend an all-one covariate");
  }

  IngestSchema resolve(const std::string& csv_path) const {
    IngestSchema schema;
    schema.task_column = task_col;
    schema.response_column = response_col;
    schema.add_intercept = !no_intercept;
    schema.time_column = time_col;
    if (!covariates.empty()) {
      schema.covariate_columns = split_list(covariates);
    } else {
      // default: every header column named x1, x2, ...
      std::ifstream in(csv_path);
      if (!in) throw IoError("cannot open '" + csv_path + "'");
      std::string header;
      std::getline(in, header);
      for (const auto& name : detail::split_csv_line(header))
        if (name.size() >= 2 && name[0] == 'x' &&
            name.find_first_not_of("0123456789", 1) == std::string::npos)
          schema.covariate_columns.push_back(name);
      if (schema.covariate_columns.empty())
        throw SchemaError("no covariate columns found; pass --covariates", "covariates");
    }
    return schema;
  }
};

void write_solution_csv(const std::string& path, const MultiTaskDataset& data, const Mat& theta,
                        const Vec* beta) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "task";
  for (int c = 0; c < theta.rows(); ++c) out << ",theta" << c;
  out << '\n';
  for (int j = 0; j < theta.cols(); ++j) {
    out << data.tasks[j].task_id;
    for (int c = 0; c < theta.rows(); ++c) out << ',' << detail::format_double(theta(c, j));
    out << '\n';
  }
  if (beta) {
    out << "<center>";
    for (int c = 0; c < beta->size(); ++c) out << ',' << detail::format_double((*beta)[c]);
    out << '\n';
  }
}

FusionConfig solver_from_json(const json& j) {
  FusionConfig cfg;
  if (j.contains("admm_step")) cfg.admm_step = j["admm_step"].get<double>();
  if (j.contains("adapt_step")) cfg.adapt_step = j["adapt_step"].get<bool>();
  if (j.contains("tol_abs")) cfg.tol_abs = j["tol_abs"].get<double>();
  if (j.contains("tol_rel")) cfg.tol_rel = j["tol_rel"].get<double>();
  if (j.contains("max_outer_iters")) cfg.max_outer_iters = j["max_outer_iters"].get<int>();
  if (j.contains("inner_tol")) cfg.inner_tol = j["inner_tol"].get<double>();
  if (j.contains("inner_max_iters")) cfg.inner_max_iters = j["inner_max_iters"].get<int>();
  return cfg;
}

CvPlan cv_from_json(const json& j) {
  CvPlan plan;
  if (j.contains("c_grid")) plan.c_grid = j["c_grid"].get<std::vector<double>>();
  if (j.contains("folds")) plan.folds = j["folds"].get<int>();
  if (j.contains("train_fraction")) plan.train_fraction = j["train_fraction"].get<double>();
  return plan;
}

ExperimentConfig config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidParameterError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidParameterError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    if (j.contains("mode")) cfg.mode = j["mode"].get<std::string>();
    if (j.contains("epsilon_grid")) cfg.epsilon_grid = j["epsilon_grid"].get<std::vector<double>>();
    if (j.contains("delta_grid")) cfg.delta_grid = j["delta_grid"].get<std::vector<double>>();
    if (j.contains("tasks")) cfg.tasks = j["tasks"].get<int>();
    if (j.contains("samples")) cfg.samples = j["samples"].get<int>();
    if (j.contains("dim")) cfg.dim = j["dim"].get<int>();
    if (j.contains("signal")) cfg.signal = j["signal"].get<double>();
    if (j.contains("tau")) cfg.tau = j["tau"].get<double>();
    if (j.contains("noise_sd")) cfg.noise_sd = j["noise_sd"].get<double>();
    if (j.contains("replications")) cfg.replications = j["replications"].get<int>();
    if (j.contains("methods")) {
      cfg.methods.clear();
      for (const auto& name : j["methods"].get<std::vector<std::string>>())
        cfg.methods.push_back(method_from_name(name));
    }
    if (j.contains("cv")) cfg.cv = cv_from_json(j["cv"]);
    if (j.contains("solver")) cfg.solver = solver_from_json(j["solver"]);
    if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
    if (j.contains("seed")) cfg.master_seed = j["seed"].get<std::uint64_t>();
    if (j.contains("threads")) cfg.threads = j["threads"].get<int>();
    if (j.contains("windows")) cfg.window_grid = j["windows"].get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw InvalidParameterError(std::string("config field error: ") + e.what());
  }
  return cfg;
}

BakeryFixtureSpec fixture_from_file(const std::string& path, std::uint64_t seed) {
  BakeryFixtureSpec spec;
  spec.seed = seed;
  if (path.empty()) return spec;
  std::ifstream in(path);
  if (!in) throw InvalidParameterError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidParameterError(std::string("config parse error: ") + e.what());
  }
  if (!j.contains("fixture")) return spec;
  const json& f = j["fixture"];
  try {
    if (f.contains("stores")) spec.stores = f["stores"].get<int>();
    if (f.contains("history_months")) spec.history_months = f["history_months"].get<int>();
    if (f.contains("test_months")) spec.test_months = f["test_months"].get<int>();
    if (f.contains("days_per_month")) spec.days_per_month = f["days_per_month"].get<int>();
    if (f.contains("store_spread")) spec.store_spread = f["store_spread"].get<double>();
    if (f.contains("noise_sd")) spec.noise_sd = f["noise_sd"].get<double>();
  } catch (const json::exception& e) {
    throw InvalidParameterError(std::string("config field error: ") + e.what());
  }
  return spec;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"multi-task data fusion for nonsmooth losses"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "emit a synthetic multi-task quantile dataset");
  struct {
    int m = 20, n = 100, dim = 10;
    double epsilon = 0.0, delta = 0.0, tau = 0.9, noise_sd = 0.5, signal = 2.0;
    std::uint64_t seed = 1;
    std::string out = "synthetic.csv", truth;
  } sy;
  synth->add_option("--m,--tasks", sy.m);
  synth->add_option("--n,--samples", sy.n);
  synth->add_option("--dim", sy.dim);
  synth->add_option("--epsilon", sy.epsilon);
  synth->add_option("--delta", sy.delta);
  synth->add_option("--tau", sy.tau);
  synth->add_option("--noise-sd", sy.noise_sd);
  synth->add_option("--signal", sy.signal);
  synth->add_option("--seed", sy.seed);
  synth->add_option("--out", sy.out)->required();
  synth->add_option("--truth", sy.truth, "also write the true coefficients");

  // ---- fit ----
  auto* fit = app.add_subcommand("fit", "one fused/stl/dp fit from a CSV");
  struct {
    std::string data, method = "fused", out = "solution.csv";
    double lambda = -1.0, c = -1.0;
  } ft;
  LossFlags fit_loss;
  SchemaFlags fit_schema;
  fit->add_option("--data", ft.data)->required();
  fit->add_option("--method", ft.method, "fused, stl or dp")->default_val("fused");
  fit->add_option("--lambda", ft.lambda, "penalty level for fused");
  fit->add_option("--c", ft.c, "penalty constant, lambda = C sqrt(d/n)");
  fit->add_option("--out", ft.out);
  fit_loss.attach(fit);
  fit_schema.attach(fit, false);

  // ---- cv ----
  auto* cv = app.add_subcommand("cv", "lambda cross-validation report");
  struct {
    std::string data, out = "cv_report.csv", c_grid;
    int folds = 5;
    bool holdout = false;
    double fraction = 0.8;
    std::uint64_t seed = 0;
  } cvf;
  LossFlags cv_loss;
  SchemaFlags cv_schema;
  cv->add_option("--data", cvf.data)->required();
  cv->add_option("--out", cvf.out);
  cv->add_option("--c-grid", cvf.c_grid, "comma-separated C values");
  cv->add_option("--folds", cvf.folds);
  cv->add_flag("--holdout", cvf.holdout, "time-ordered holdout instead of k-fold");
  cv->add_option("--fraction", cvf.fraction, "holdout training fraction");
  cv->add_option("--seed", cvf.seed);
  cv_loss.attach(cv);
  cv_schema.attach(cv, false);

  // ---- experiment ----
  auto* exp = app.add_subcommand("experiment", "full sweep from a JSON config file");
  struct {
    std::string config, out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0, replications = 0;
  } ex;
  exp->add_option("--config", ex.config)->required();
  exp->add_option("--out", ex.out, "override output directory");
  exp->add_option("--seed", ex.seed, "override master seed")->each([&](const std::string&) {
    ex.seed_set = true;
  });
  exp->add_option("--threads", ex.threads, "override worker count");
  exp->add_option("--replications", ex.replications, "override replication count");

  // ---- newsvendor ----
  auto* nv = app.add_subcommand("newsvendor", "windowed newsvendor pipeline");
  struct {
    std::string data, out = "newsvendor_out", windows = "1,2,3", c_grid, config;
    bool fixture = false;
    int first_test_month = 0;
    std::uint64_t seed = 1;
  } nvf;
  LossFlags nv_loss;
  SchemaFlags nv_schema;
  nv_loss.tau = 0.9;
  nv->add_option("--data", nvf.data, "time-ordered CSV (requires --time-col)");
  nv->add_flag("--fixture", nvf.fixture, "generate the bakery-like fixture instead");
  nv->add_option("--config", nvf.config, "JSON config supplying fixture parameters");
  nv->add_option("--first-test-month", nvf.first_test_month,
                 "months >= this form the test window (required with --data)");
  nv->add_option("--windows", nvf.windows, "training window sizes in months");
  nv->add_option("--c-grid", nvf.c_grid);
  nv->add_option("--seed", nvf.seed);
  nv->add_option("--out", nvf.out);
  nv_loss.attach(nv);
  nv_schema.attach(nv, true);

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    RelatednessSpec rspec;
    rspec.m = sy.m;
    rspec.epsilon = sy.epsilon;
    rspec.delta = sy.delta;
    rspec.dim = sy.dim;
    rspec.signal = sy.signal;
    rspec.seed = seed_combine(sy.seed, 0);
    GroundTruth truth = generate_related_coefficients(rspec);
    MultiTaskDataset data =
        generate_quantile_tasks(truth, sy.n, sy.tau, sy.noise_sd, seed_combine(sy.seed, 1));
    write_dataset_csv(sy.out, data, true);
    if (!sy.truth.empty()) {
      std::ofstream out(sy.truth, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write '" + sy.truth + "'");
      out << "task,inlier";
      for (int c = 0; c < truth.theta_star.rows(); ++c) out << ",theta" << c;
      out << '\n';
      for (int j = 0; j < truth.theta_star.cols(); ++j) {
        out << data.tasks[j].task_id << ',' << (truth.is_inlier(j) ? 1 : 0);
        for (int c = 0; c < truth.theta_star.rows(); ++c)
          out << ',' << detail::format_double(truth.theta_star(c, j));
        out << '\n';
      }
    }
    std::cout << "wrote " << sy.out << " (m=" << sy.m << ", n=" << sy.n << ", d=" << sy.dim + 1
              << ")\n";
    return 0;
  }

  if (fit->parsed()) {
    MultiTaskDataset data = ingest_csv(ft.data, fit_schema.resolve(ft.data));
    LossSpec spec = fit_loss.resolve();
    const int m = data.num_tasks();
    if (ft.method == "fused") {
      double lambda = ft.lambda;
      if (lambda < 0.0 && ft.c > 0.0) {
        double n_mean = 0.0;
        for (const auto& t : data.tasks) n_mean += t.size();
        lambda = ft.c * std::sqrt(data.dim / (n_mean / m));
      }
      if (lambda < 0.0)
        throw InvalidParameterError("fused fit needs --lambda or --c");
      FusionSolution sol = solve_fused(data, spec, FusionConfig::uniform(m, lambda));
      write_solution_csv(ft.out, data, sol.theta_hat, &sol.beta_hat);
      std::cout << "objective " << sol.objective << ", iterations "
                << sol.diagnostics.iterations << ", lambda " << lambda << "\n";
    } else if (ft.method == "stl") {
      Mat theta(data.dim, m);
      for (int j = 0; j < m; ++j) theta.col(j) = solve_stl(data.tasks[j], spec);
      write_solution_csv(ft.out, data, theta, nullptr);
    } else if (ft.method == "dp") {
      Vec pooled = solve_dp(data, spec);
      Mat theta(data.dim, m);
      theta.colwise() = pooled;
      write_solution_csv(ft.out, data, theta, &pooled);
    } else {
      throw InvalidParameterError("unknown method '" + ft.method + "'");
    }
    std::cout << "wrote " << ft.out << "\n";
    return 0;
  }

  if (cv->parsed()) {
    MultiTaskDataset data = ingest_csv(cvf.data, cv_schema.resolve(cvf.data));
    LossSpec spec = cv_loss.resolve();
    CvPlan plan;
    if (!cvf.c_grid.empty()) plan.c_grid = parse_doubles(cvf.c_grid);
    plan.folds = cvf.folds;
    plan.train_fraction = cvf.fraction;
    plan.seed = cvf.seed;
    CvReport report = cvf.holdout ? holdout_cv(data, spec, plan) : kfold_cv(data, spec, plan);
    std::ofstream out(cvf.out, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + cvf.out + "'");
    out << "c,lambda,mean_score,chosen\n";
    for (std::size_t i = 0; i < report.c_grid.size(); ++i)
      out << detail::format_double(report.c_grid[i]) << ','
          << detail::format_double(report.lambdas[i]) << ','
          << detail::format_double(report.mean_scores[i]) << ','
          << (static_cast<int>(i) == report.chosen_index ? 1 : 0) << '\n';
    std::cout << "chosen C = " << report.chosen_c << ", lambda = " << report.chosen_lambda
              << "\nwrote " << cvf.out << "\n";
    return 0;
  }

  if (exp->parsed()) {
    ExperimentConfig cfg = config_from_file(ex.config);
    if (!ex.out.empty()) cfg.out_dir = ex.out;
    if (ex.seed_set) cfg.master_seed = ex.seed;
    if (ex.threads > 0) cfg.threads = ex.threads;
    if (ex.replications > 0) cfg.replications = ex.replications;
    ResultsTable table;
    if (cfg.mode == "synthetic") {
      table = run_synthetic_experiment(cfg);
    } else {
      BakeryFixtureSpec fspec = fixture_from_file(ex.config, cfg.master_seed);
      fspec.seed = cfg.master_seed;
      BakeryFixture fixture = generate_bakery_fixture(fspec);
      LossSpec spec = LossSpec::check(cfg.tau);
      table = run_newsvendor_experiment(fixture.timed, fixture.first_test_month, cfg.window_grid,
                                        spec, cfg.cv, cfg.solver, cfg.methods);
    }
    emit_report(table, cfg.out_dir);
    std::cout << "wrote " << cfg.out_dir << "/results.csv (" << table.rows.size() << " rows)\n";
    return 0;
  }

  if (nv->parsed()) {
    LossSpec spec = nv_loss.resolve();
    CvPlan plan;
    if (!nvf.c_grid.empty()) plan.c_grid = parse_doubles(nvf.c_grid);
    TimedDataset timed;
    int first_test = nvf.first_test_month;
    if (nvf.fixture) {
      BakeryFixtureSpec fspec = fixture_from_file(nvf.config, nvf.seed);
      fspec.seed = nvf.seed;
      BakeryFixture fixture = generate_bakery_fixture(fspec);
      timed = std::move(fixture.timed);
      first_test = fixture.first_test_month;
    } else {
      if (nvf.data.empty())
        throw InvalidParameterError("newsvendor needs --data or --fixture");
      IngestSchema schema = nv_schema.resolve(nvf.data);
      if (schema.time_column.empty())
        throw InvalidParameterError("newsvendor --data requires --time-col");
      timed = ingest_csv_timed(nvf.data, schema);
      if (first_test <= 0)
        throw InvalidParameterError("newsvendor --data requires --first-test-month");
    }
    ResultsTable table = run_newsvendor_experiment(timed, first_test, parse_ints(nvf.windows),
                                                   spec, plan);
    emit_report(table, nvf.out);
    std::cout << "wrote " << nvf.out << "/results.csv (" << table.rows.size() << " rows)\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const InvalidParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ConvergenceError& e) {
    std::cerr << "convergence failure: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
