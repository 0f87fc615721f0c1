// Acceptance suite: one test case per criterion, each printing a single
// PASS/FAIL line with its runtime. Run the whole binary or filter by tag,
// e.g. `acceptance "[c07]"`.

#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fusion/datagen.hpp"
#include "fusion/oracles.hpp"
#include "fusion/pipeline.hpp"
#include "fusion/solver.hpp"
#include "fusion/tuning.hpp"
#include "support/test_util.hpp"

using namespace fusion;
namespace fs = std::filesystem;

namespace {

class Criterion {
 public:
  Criterion(std::string name, double limit_seconds)
      : name_(std::move(name)), limit_(limit_seconds), start_(clock::now()) {}

  double elapsed() const {
    return std::chrono::duration<double>(clock::now() - start_).count();
  }

  void finish(bool ok) const {
    const double t = elapsed();
    std::printf("ACCEPTANCE %s: %s (%.1fs, limit %.0fs)\n", name_.c_str(), ok ? "PASS" : "FAIL",
                t, limit_);
    std::fflush(stdout);
    CHECK(ok);
    CHECK(t < limit_);
  }

 private:
  using clock = std::chrono::steady_clock;
  std::string name_;
  double limit_;
  clock::time_point start_;
};

double stl_objective_total(const MultiTaskDataset& data, const LossSpec& spec) {
  double total = 0.0;
  for (const auto& task : data.tasks)
    total += empirical_risk(spec, solve_stl(task, spec), task);
  return total;
}

struct TrendMeans {
  // mean over replications, keyed by delta index then method
  std::map<std::pair<double, Method>, std::vector<double>> all, inliers, outliers;

  void add(const ResultRow& r) {
    REQUIRE(r.status == "ok");
    const auto key = std::make_pair(r.delta, r.method);
    all[key].push_back(r.metrics.max_error_all);
    inliers[key].push_back(r.metrics.max_error_inliers);
    if (!std::isnan(r.metrics.max_error_outliers))
      outliers[key].push_back(r.metrics.max_error_outliers);
  }

  static double mean(const std::vector<double>& v) {
    REQUIRE(!v.empty());
    return pairwise_mean(v);
  }
};

}  // namespace

TEST_CASE("criterion 1: lambda zero reduces to single-task learning", "[c01]") {
  Criterion crit("c01 stl-reduction", 10.0);
  Rng rng = Rng::seeded(20250811);
  bool ok = true;
  for (int rep = 0; rep < 20; ++rep) {
    const int m = 2 + static_cast<int>(rng.next_below(4));
    const int d = 1 + static_cast<int>(rng.next_below(5));
    auto data = testutil::random_dataset(m, 5, 50, d, rng);
    LossSpec spec = LossSpec::check(0.3 + 0.4 * rng.next_unit());
    FusionSolution sol = solve_fused(data, spec, FusionConfig::uniform(m, 0.0));
    double fused = 0.0;
    for (int j = 0; j < m; ++j)
      fused += empirical_risk(spec, sol.theta_hat.col(j), data.tasks[j]);
    const double gap = std::abs(fused - stl_objective_total(data, spec));
    CHECK(gap <= 1e-8);
    ok = ok && gap <= 1e-8;
  }
  crit.finish(ok);
}

TEST_CASE("criterion 2: pooling collapse at the computed threshold", "[c02]") {
  Criterion crit("c02 pooling-collapse", 30.0);
  Rng rng = Rng::seeded(20250812);
  bool ok = true;
  for (int rep = 0; rep < 20; ++rep) {
    const int m = 2 + static_cast<int>(rng.next_below(4));
    const int d = 1 + static_cast<int>(rng.next_below(4));
    auto data = testutil::random_dataset(m, 4, 30, d, rng);
    LossSpec spec = LossSpec::check(0.3 + 0.5 * rng.next_unit());
    Vec w(m);
    for (int j = 0; j < m; ++j) w[j] = 0.5 + 1.5 * rng.next_unit();
    FusionConfig cfg;
    cfg.weights = w;
    cfg.penalties = Vec::Constant(m, pooling_threshold(data, spec, w));
    FusionSolution sol = solve_fused(data, spec, cfg);
    const Vec pooled = solve_dp(data, spec, w);
    for (int j = 0; j < m; ++j) {
      const bool mask_ok = sol.pooled_mask[j];
      const bool col_ok = (sol.theta_hat.col(j) - pooled).norm() <= 1e-6;
      CHECK(mask_ok);
      CHECK(col_ok);
      ok = ok && mask_ok && col_ok;
    }
  }
  crit.finish(ok);
}

TEST_CASE("criterion 3: exact 1-d newsvendor quantiles", "[c03]") {
  Criterion crit("c03 exact-quantile", 5.0);
  Rng rng = Rng::seeded(20250813);
  bool ok = true;
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 1 + static_cast<int>(rng.next_below(40));  // even sizes included
    const double b = 0.5 + 8.0 * rng.next_unit();
    const double h = 0.5 + 3.0 * rng.next_unit();
    LossSpec spec = LossSpec::newsvendor(b, h);
    std::vector<double> demand(n);
    TaskDataset task;
    task.task_id = "d";
    for (int i = 0; i < n; ++i) {
      demand[i] = std::round(40.0 * rng.next_gaussian()) / 8.0;  // ties happen
      task.samples.push_back(testutil::sample({1.0}, demand[i]));
    }
    const Interval iv = exact_quantile_location(demand, tau_from_costs(b, h));
    const Vec oracle = Vec::Constant(1, iv.lo);
    const Vec est = solve_stl(task, spec);
    const double gap =
        std::abs(empirical_risk(spec, est, task) - empirical_risk(spec, oracle, task));
    CHECK(gap <= 1e-9);
    ok = ok && gap <= 1e-9;
  }
  crit.finish(ok);
}

TEST_CASE("criterion 4: tiny fused instances against brute force", "[c04]") {
  Criterion crit("c04 brute-force", 60.0);
  Rng rng = Rng::seeded(20250814);
  bool ok = true;
  const double lambdas[] = {0.0, 0.3, 0.6, 1.0};
  for (int rep = 0; rep < 10; ++rep) {
    // responses on the 0.1 grid inside [0, 2]: optima land exactly on the
    // brute-force grid, so value comparison at 1e-4 is meaningful
    std::vector<TaskDataset> tasks(2);
    std::vector<std::vector<double>> ys(2);
    for (int j = 0; j < 2; ++j) {
      tasks[j].task_id = j == 0 ? "a" : "b";
      const int n = 1 + static_cast<int>(rng.next_below(3));
      for (int i = 0; i < n; ++i) {
        const double y = 0.1 * static_cast<double>(rng.next_below(21));
        ys[j].push_back(y);
        tasks[j].samples.push_back(testutil::sample({1.0}, y));
      }
    }
    auto data = MultiTaskDataset::from_tasks(tasks);
    const double lambda = lambdas[rep % 4];
    LossSpec spec = LossSpec::check(0.5);
    FusionSolution sol = solve_fused(data, spec, FusionConfig::uniform(2, lambda));

    auto objective = [&](const Vec& v) {
      double value = 0.0;
      for (int j = 0; j < 2; ++j) {
        double risk = 0.0;
        for (double y : ys[j]) risk += check_loss(y - v[j], 0.5);
        value += risk / static_cast<double>(ys[j].size()) + lambda * std::abs(v[j] - v[2]);
      }
      return value;
    };
    BruteForceResult bf =
        brute_force_minimize(objective, {{-1.0, 3.0}, {-1.0, 3.0}, {-1.0, 3.0}}, 0.02);
    const double gap = std::abs(sol.objective - bf.value);
    CHECK(gap <= 1e-4);
    ok = ok && gap <= 1e-4;
  }
  crit.finish(ok);
}

TEST_CASE("criterion 5: personalization bound on quadratic instances", "[c05]") {
  Criterion crit("c05 personalization", 30.0);
  Rng rng = Rng::seeded(20250815);
  bool ok = true;
  for (int rep = 0; rep < 100; ++rep) {
    const int m = 2 + static_cast<int>(rng.next_below(4));
    const int d = 1 + static_cast<int>(rng.next_below(4));
    const int n = 3 * d + 2 + static_cast<int>(rng.next_below(30));
    auto data = testutil::random_dataset(m, n, n, d, rng);
    const double lambda = 0.02 + 0.5 * rng.next_unit();
    FusionConfig cfg = FusionConfig::uniform(m, lambda);
    cfg.tol_abs = 1e-10;  // distances enter the bound check at 1e-6 precision
    cfg.tol_rel = 1e-8;
    FusionSolution sol = solve_fused(data, LossSpec::quadratic(), cfg);
    Mat stl(d, m);
    double rho = std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j) {
      stl.col(j) = solve_stl(data.tasks[j], LossSpec::quadratic());
      Mat gram = Mat::Zero(d, d);
      for (const auto& s : data.tasks[j].samples)
        gram += s.covariates * s.covariates.transpose() / double(data.tasks[j].size());
      rho = std::min(rho, Eigen::SelfAdjointEigenSolver<Mat>(gram).eigenvalues().minCoeff());
    }
    RegularityParams params;
    params.rho = rho;
    params.lip = rho;
    const bool pass = check_personalization_bound(sol.theta_hat, stl, cfg.penalties, params, 1e-6).ok;
    CHECK(pass);
    ok = ok && pass;
  }

  // tightness: the symmetric two-task construction pins the center at zero,
  // so theta_1 is the soft-threshold 1 - lambda and the bound is met exactly
  {
    TaskDataset t1{"p", {testutil::sample({1.0}, 1.0)}};
    TaskDataset t2{"n", {testutil::sample({1.0}, -1.0)}};
    auto data = MultiTaskDataset::from_tasks({t1, t2});
    const double lambda = 0.3;
    FusionConfig cfg = FusionConfig::uniform(2, lambda);
    cfg.tol_abs = 1e-11;
    cfg.tol_rel = 1e-10;
    FusionSolution sol = solve_fused(data, LossSpec::quadratic(), cfg);
    const double dist = std::abs(sol.theta_hat(0, 0) - 1.0);
    const double tightness = std::abs(dist - lambda);  // rho = 1
    CHECK(tightness <= 1e-6);
    ok = ok && tightness <= 1e-6;
  }
  crit.finish(ok);
}

TEST_CASE("criterion 6: block soft-threshold against brute force", "[c06]") {
  Criterion crit("c06 prox-correctness", 5.0);
  Rng rng = Rng::seeded(20250816);
  bool ok = true;
  for (int rep = 0; rep < 50; ++rep) {
    Vec v(2);
    v << 4.0 * (rng.next_unit() - 0.5), 4.0 * (rng.next_unit() - 0.5);
    const double kappa = 2.5 * rng.next_unit();
    const Vec prox = prox_group_norm(v, kappa);
    auto objective = [&](const Vec& z) { return kappa * z.norm() + 0.5 * (z - v).squaredNorm(); };
    BruteForceResult coarse =
        brute_force_minimize(objective, {{-3.0, 3.0}, {-3.0, 3.0}}, 3e-3);
    BruteForceResult fine = brute_force_minimize(
        objective,
        {{coarse.argmin[0] - 6e-3, coarse.argmin[0] + 6e-3},
         {coarse.argmin[1] - 6e-3, coarse.argmin[1] + 6e-3}},
        6e-5);
    const double gap = (prox - fine.argmin).norm();
    CHECK(gap <= 1e-4);
    ok = ok && gap <= 1e-4;
  }
  crit.finish(ok);
}

namespace {

ExperimentConfig trend_config(double epsilon, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.epsilon_grid = {epsilon};
  cfg.delta_grid = {0.0, 1.0, 2.0};
  cfg.tasks = 20;
  cfg.samples = 100;
  cfg.dim = 10;
  cfg.tau = 0.9;
  cfg.noise_sd = 0.5;
  cfg.replications = 20;
  cfg.master_seed = seed;
  cfg.threads = 2;
  return cfg;
}

}  // namespace

TEST_CASE("criterion 7: relatedness trend without outliers", "[c07]") {
  Criterion crit("c07 figure1-trend", 600.0);
  ResultsTable table = run_synthetic_experiment(trend_config(0.0, 71));
  TrendMeans tm;
  for (const auto& r : table.rows) tm.add(r);
  auto mean_of = [&](double delta, Method m) {
    return TrendMeans::mean(tm.all.at({delta, m}));
  };
  bool ok = true;
  const double fused0 = mean_of(0.0, Method::Fused), dp0 = mean_of(0.0, Method::Dp);
  CHECK(fused0 <= 1.15 * dp0);
  ok = ok && fused0 <= 1.15 * dp0;
  const double fused2 = mean_of(2.0, Method::Fused), dp2 = mean_of(2.0, Method::Dp);
  CHECK(dp2 >= 2.0 * fused2);
  ok = ok && dp2 >= 2.0 * fused2;
  for (double delta : {0.0, 1.0, 2.0}) {
    const double fused = mean_of(delta, Method::Fused), stl = mean_of(delta, Method::Stl);
    CHECK(fused <= 1.1 * stl);
    ok = ok && fused <= 1.1 * stl;
  }
  std::printf("  c07 means: delta=0 fused %.3f dp %.3f stl %.3f | delta=2 fused %.3f dp %.3f stl %.3f\n",
              fused0, dp0, mean_of(0.0, Method::Stl), fused2, dp2, mean_of(2.0, Method::Stl));
  crit.finish(ok);
}

TEST_CASE("criterion 8: relatedness trend with outlier tasks", "[c08]") {
  Criterion crit("c08 figure2-trend", 600.0);
  ResultsTable table = run_synthetic_experiment(trend_config(0.2, 72));
  TrendMeans tm;
  for (const auto& r : table.rows) tm.add(r);
  auto inlier_mean = [&](double delta, Method m) {
    return TrendMeans::mean(tm.inliers.at({delta, m}));
  };
  auto outlier_mean = [&](double delta, Method m) {
    return TrendMeans::mean(tm.outliers.at({delta, m}));
  };
  bool ok = true;
  for (double delta : {0.0, 1.0, 2.0}) {
    const double fused_s = inlier_mean(delta, Method::Fused);
    const double stl_s = inlier_mean(delta, Method::Stl);
    CHECK(fused_s <= 1.1 * stl_s);
    ok = ok && fused_s <= 1.1 * stl_s;
    const double fused_sc = outlier_mean(delta, Method::Fused);
    const double stl_sc = outlier_mean(delta, Method::Stl);
    CHECK(fused_sc <= 1.2 * stl_sc);
    ok = ok && fused_sc <= 1.2 * stl_sc;
  }
  const double fused_s2 = inlier_mean(2.0, Method::Fused);
  const double dp_s2 = inlier_mean(2.0, Method::Dp);
  CHECK(dp_s2 >= 2.0 * fused_s2);
  ok = ok && dp_s2 >= 2.0 * fused_s2;
  std::printf("  c08 means over S at delta=2: fused %.3f dp %.3f stl %.3f\n", fused_s2, dp_s2,
              inlier_mean(2.0, Method::Stl));
  crit.finish(ok);
}

TEST_CASE("criterion 9: infimal convolution identity on the guaranteed ball", "[c09]") {
  Criterion crit("c09 infconv-identity", 5.0);
  bool ok = true;
  auto half_square = [](double x) { return 0.5 * x * x; };  // rho = L = 1, minimizer 0
  for (double lambda : {0.5, 1.0, 2.0}) {
    for (int i = 0; i <= 100; ++i) {
      const double x = (-0.999 + 1.998 * i / 100.0) * lambda;  // inside |x| <= lambda / L
      const double got =
          infimal_convolution_1d(half_square, lambda, x, {-4.0 - lambda, 4.0 + lambda});
      const bool pass = std::abs(got - half_square(x)) <= 2e-9;
      if (!pass) CHECK(got == Catch::Approx(half_square(x)).margin(2e-9));
      ok = ok && pass;
    }
    // outside the ball the identity must break: Huber linear branch instead
    const double outside = infimal_convolution_1d(half_square, lambda, 2.5 * lambda,
                                                  {-4.0 - 3.0 * lambda, 4.0 + 3.0 * lambda});
    const double huber = lambda * 2.5 * lambda - 0.5 * lambda * lambda;
    CHECK(outside == Catch::Approx(huber).margin(1e-8));
    ok = ok && std::abs(outside - huber) <= 1e-8;
  }
  crit.finish(ok);
}

TEST_CASE("criterion 10: experiment runs are byte-identical across thread counts", "[c10]") {
  Criterion crit("c10 pipeline-determinism", 120.0);
  fs::path dir = fs::temp_directory_path() / "fusion_acceptance_c10";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "cfg.json");
    cfg << R"({"mode":"synthetic","epsilon_grid":[0.0],"delta_grid":[0.0,1.0],"tasks":6,)"
        << R"("samples":40,"dim":3,"tau":0.9,"noise_sd":0.5,"replications":4,)"
        << R"("methods":["fused","stl","dp"],"cv":{"c_grid":[0.3,0.8],"folds":5},"seed":11})";
  }
  auto run = [&](const std::string& out, int threads) {
    const std::string cmd = std::string(FUSION_CLI_PATH) + " experiment --config " +
                            (dir / "cfg.json").string() + " --out " + (dir / out).string() +
                            " --threads " + std::to_string(threads) + " >/dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
  };
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  bool ok = run("t1", 1) == 0 && run("t2", 2) == 0 && run("t1b", 1) == 0;
  const std::string a = slurp(dir / "t1" / "results.csv");
  ok = ok && !a.empty();
  ok = ok && a == slurp(dir / "t2" / "results.csv");
  ok = ok && a == slurp(dir / "t1b" / "results.csv");
  CHECK(ok);
  crit.finish(ok);
}

TEST_CASE("criterion 11: newsvendor fixture trend at the smallest window", "[c11]") {
  Criterion crit("c11 newsvendor-trend", 600.0);
  LossSpec loss = LossSpec::check(tau_from_costs(9.0, 1.0));
  CvPlan plan;  // default C grid, 80/20 time-ordered holdout
  int wins = 0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    BakeryFixtureSpec spec;
    spec.stores = 16;
    spec.history_months = 8;
    spec.test_months = 2;
    spec.days_per_month = 28;
    spec.seed = seed_combine(2026, s);
    BakeryFixture fixture = generate_bakery_fixture(spec);
    ResultsTable table = run_newsvendor_experiment(fixture.timed, fixture.first_test_month, {1},
                                                   loss, plan);
    double fused = 0.0, stl = 0.0, dp = 0.0;
    for (const auto& r : table.rows) {
      REQUIRE(r.status == "ok");
      if (r.method == Method::Fused) fused = r.metrics.avg_test_loss;
      if (r.method == Method::Stl) stl = r.metrics.avg_test_loss;
      if (r.method == Method::Dp) dp = r.metrics.avg_test_loss;
    }
    if (fused <= 1.05 * std::min(stl, dp)) ++wins;
  }
  std::printf("  c11: fused within 1.05x of best baseline in %d/%d seeds\n", wins, seeds);
  const bool ok = wins >= 16;  // >= 80%
  CHECK(ok);
  crit.finish(ok);
}
