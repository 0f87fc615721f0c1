#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fusion/pipeline.hpp"
#include "support/test_util.hpp"

using namespace fusion;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("fusion_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

IngestSchema demo_schema() {
  IngestSchema schema;
  schema.task_column = "store";
  schema.response_column = "demand";
  schema.covariate_columns = {"a", "b"};
  return schema;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace

TEST_CASE("csv ingestion") {
  fs::path dir = temp_dir("ingest");

  SECTION("groups by task, keeps order, adds intercept") {
    write_file(dir / "d.csv",
               "store,demand,a,b\n"
               "s1,10,1,2\n"
               "s2,20,3,4\n"
               "s1,11,5,6\n");
    MultiTaskDataset data = ingest_csv((dir / "d.csv").string(), demo_schema());
    CHECK(data.num_tasks() == 2);
    CHECK(data.dim == 3);
    CHECK(data.tasks[0].task_id == "s1");
    CHECK(data.tasks[0].size() == 2);
    CHECK(data.tasks[1].size() == 1);
    CHECK(data.tasks[0].samples[0].covariates[0] == 1.0);
    CHECK(data.tasks[0].samples[1].covariates[1] == 5.0);
    CHECK(data.tasks[0].samples[1].response == 11.0);

    IngestSchema raw = demo_schema();
    raw.add_intercept = false;
    CHECK(ingest_csv((dir / "d.csv").string(), raw).dim == 2);
  }

  SECTION("missing column names the column") {
    write_file(dir / "m.csv", "store,a,b\ns1,1,2\n");
    try {
      ingest_csv((dir / "m.csv").string(), demo_schema());
      FAIL("expected SchemaError");
    } catch (const SchemaError& e) {
      CHECK(e.column == "demand");
    }
  }

  SECTION("non-numeric cell reports the row") {
    write_file(dir / "p.csv", "store,demand,a,b\ns1,10,1,2\ns1,abc,3,4\n");
    try {
      ingest_csv((dir / "p.csv").string(), demo_schema());
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.row == 2);
    }
  }

  SECTION("time column round trip") {
    write_file(dir / "t.csv", "store,demand,a,b,month\ns1,10,1,2,1\ns1,11,3,4,2\n");
    IngestSchema schema = demo_schema();
    schema.time_column = "month";
    TimedDataset timed = ingest_csv_timed((dir / "t.csv").string(), schema);
    REQUIRE(timed.time.size() == 1);
    CHECK(timed.time[0] == std::vector<double>{1.0, 2.0});
  }

  SECTION("missing file") {
    CHECK_THROWS_AS(ingest_csv((dir / "nope.csv").string(), demo_schema()), IoError);
  }
}

TEST_CASE("metrics") {
  RelatednessSpec spec;
  spec.m = 5;
  spec.dim = 3;
  spec.delta = 1.0;
  spec.epsilon = 0.4;  // 2 outliers
  spec.seed = 3;
  GroundTruth truth = generate_related_coefficients(spec);
  generate_quantile_tasks(truth, 3, 0.9, 0.5, 1);  // fills theta_star

  SECTION("zero error at the truth") {
    MetricsReport r = evaluate_metrics(truth.theta_star, truth);
    CHECK(r.max_error_all == 0.0);
    CHECK(r.max_error_inliers == 0.0);
    CHECK(r.max_error_outliers == 0.0);
  }

  SECTION("single perturbed inlier column") {
    Mat est = truth.theta_star;
    const int j = truth.inlier_set[0];
    Vec bump = Vec::Zero(est.rows());
    bump[1] = 0.7;
    est.col(j) += bump;
    MetricsReport r = evaluate_metrics(est, truth);
    CHECK(r.max_error_inliers == Catch::Approx(0.7));
    CHECK(r.max_error_all == std::max(r.max_error_inliers, r.max_error_outliers));
  }

  SECTION("no outliers means no outlier metric") {
    RelatednessSpec all_in = spec;
    all_in.epsilon = 0.0;
    GroundTruth t2 = generate_related_coefficients(all_in);
    generate_quantile_tasks(t2, 3, 0.9, 0.5, 1);
    MetricsReport r = evaluate_metrics(t2.theta_star, t2);
    CHECK(std::isnan(r.max_error_outliers));
    CHECK(r.max_error_all == r.max_error_inliers);
  }

  SECTION("test-loss path") {
    MultiTaskDataset data = generate_quantile_tasks(truth, 50, 0.9, 0.5, 4);
    MetricsReport r = evaluate_metrics(LossSpec::check(0.9), truth.theta_star, data);
    CHECK(r.avg_test_loss > 0.0);
    CHECK(std::isnan(r.max_error_all));
  }
}

TEST_CASE("synthetic experiment and report emission") {
  ExperimentConfig cfg;
  cfg.epsilon_grid = {0.0};
  cfg.delta_grid = {0.0, 2.0};
  cfg.tasks = 4;
  cfg.samples = 25;
  cfg.dim = 3;
  cfg.replications = 2;
  cfg.cv.c_grid = {0.3, 0.9};
  cfg.cv.folds = 5;
  cfg.master_seed = 42;

  SECTION("row shape for a single method") {
    ExperimentConfig stl_only = cfg;
    stl_only.methods = {Method::Stl};
    stl_only.replications = 1;
    ResultsTable table = run_synthetic_experiment(stl_only);
    CHECK(table.rows.size() == 2);  // |delta grid| rows
    for (const auto& r : table.rows) {
      CHECK(r.status == "ok");
      CHECK(r.metrics.max_error_all >= r.metrics.max_error_inliers);
    }
  }

  SECTION("full determinism across thread counts") {
    ResultsTable t1 = run_synthetic_experiment(cfg);
    ExperimentConfig threaded = cfg;
    threaded.threads = 2;
    ResultsTable t2 = run_synthetic_experiment(threaded);
    fs::path d1 = temp_dir("emit1"), d2 = temp_dir("emit2");
    emit_report(t1, d1.string());
    emit_report(t2, d2.string());
    for (const char* f : {"results.csv", "summary.csv", "plotdata.csv"}) {
      CHECK(slurp(d1 / f) == slurp(d2 / f));
      CHECK(!slurp(d1 / f).empty());
    }
    // rerun in place: byte-identical overwrite
    const std::string before = slurp(d1 / "results.csv");
    emit_report(t1, d1.string());
    CHECK(slurp(d1 / "results.csv") == before);
  }

  SECTION("empty table emits headers only") {
    fs::path dir = temp_dir("empty");
    emit_report(ResultsTable{}, dir.string());
    const std::string results = slurp(dir / "results.csv");
    CHECK(results.substr(0, 4) == "mode");
    CHECK(std::count(results.begin(), results.end(), '\n') == 1);
  }
}

TEST_CASE("dataset csv round trip") {
  RelatednessSpec spec;
  spec.m = 3;
  spec.dim = 4;
  spec.delta = 0.5;
  spec.seed = 8;
  GroundTruth truth = generate_related_coefficients(spec);
  MultiTaskDataset data = generate_quantile_tasks(truth, 12, 0.9, 0.5, 9);

  fs::path dir = temp_dir("roundtrip");
  write_dataset_csv((dir / "synth.csv").string(), data, true);

  IngestSchema schema;
  schema.task_column = "task";
  schema.response_column = "y";
  for (int c = 1; c <= 4; ++c) schema.covariate_columns.push_back("x" + std::to_string(c));
  MultiTaskDataset back = ingest_csv((dir / "synth.csv").string(), schema);
  REQUIRE(back.num_tasks() == 3);
  REQUIRE(back.dim == 5);
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 12; ++i) {
      CHECK(back.tasks[j].samples[i].response == data.tasks[j].samples[i].response);
      CHECK((back.tasks[j].samples[i].covariates - data.tasks[j].samples[i].covariates).norm() ==
            0.0);
    }
}

TEST_CASE("bakery fixture and newsvendor pipeline") {
  BakeryFixtureSpec spec;
  spec.stores = 4;
  spec.history_months = 5;
  spec.test_months = 2;
  spec.days_per_month = 21;
  spec.seed = 17;
  BakeryFixture fixture = generate_bakery_fixture(spec);
  CHECK(fixture.timed.data.num_tasks() == 4);
  CHECK(fixture.timed.data.dim == 7);
  CHECK(fixture.first_test_month == 6);
  for (const auto& t : fixture.timed.data.tasks) CHECK(t.size() == 7 * 21);

  LossSpec loss = LossSpec::check(tau_from_costs(9.0, 1.0));
  CvPlan plan;
  plan.c_grid = {0.2, 0.8};

  SECTION("row shape on a window grid") {
    ResultsTable table = run_newsvendor_experiment(fixture.timed, fixture.first_test_month,
                                                   {1, 2, 3}, loss, plan);
    CHECK(table.rows.size() == 9);
    for (const auto& r : table.rows) {
      INFO(r.message);
      CHECK(r.status == "ok");
      CHECK(r.metrics.avg_test_loss > 0.0);
    }
    // train/test hygiene is structural: training months < first_test_month;
    // determinism: rerun matches
    ResultsTable again = run_newsvendor_experiment(fixture.timed, fixture.first_test_month,
                                                   {1, 2, 3}, loss, plan);
    for (std::size_t i = 0; i < table.rows.size(); ++i)
      CHECK(table.rows[i].metrics.avg_test_loss == again.rows[i].metrics.avg_test_loss);
  }

  SECTION("window exceeding history is rejected") {
    CHECK_THROWS_AS(run_newsvendor_experiment(fixture.timed, fixture.first_test_month, {99}, loss,
                                              plan),
                    InvalidInputError);
  }

  SECTION("unsorted time labels are rejected") {
    TimedDataset bad = fixture.timed;
    std::swap(bad.time[0][0], bad.time[0][bad.time[0].size() - 1]);
    CHECK_THROWS_AS(
        run_newsvendor_experiment(bad, fixture.first_test_month, {1}, loss, plan),
        InvalidInputError);
  }
}
