#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cola/config.hpp"
#include "cola/experiment.hpp"
#include "cola/task.hpp"
#include "oracles.hpp"

using namespace cola;

namespace {

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.task.d = c.task.k = 8;
  c.task.target_delta_rank = 3;
  c.task.n_train = 32;
  c.task.n_eval = 16;
  c.task.n_test = 16;
  c.task.seed = 2;
  c.schedule.total_epochs = 2;
  c.schedule.knots = {1};
  c.schedule.rank_per_segment = {2, 1};
  c.schedule.alpha = 4.0;
  c.lr_grid = {5e-3, 1e-3};
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Task, SameSeedSameTask) {
  TaskSpec ts;
  ts.d = ts.k = 12;
  ts.target_delta_rank = 4;
  ts.n_train = 20;
  ts.seed = 9;
  const Task a = generate_task(ts), b = generate_task(ts);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.train.targets, b.train.targets);
  EXPECT_EQ(a.delta_star[0], b.delta_star[0]);
  ts.seed = 10;
  EXPECT_NE(generate_task(ts).delta_star[0], a.delta_star[0]);
}

TEST(Task, TeacherDeltaHasExactRank) {
  TaskSpec ts;  // 64 x 64, rank 8
  const Task t = generate_task(ts);
  const auto sv = oracle::gram_singular_values(t.delta_star[0]);
  EXPECT_GT(sv[7], 1e-3);
  EXPECT_LT(sv[8], 1e-6 * sv[0]);
  EXPECT_EQ(numerical_rank(t.delta_star[0], 1e-9), 8u);
}

TEST(Task, TeacherTargetsComeFromTheShiftedWeights) {
  TaskSpec ts;
  ts.d = 6;
  ts.k = 5;
  ts.target_delta_rank = 2;
  ts.n_train = 5;
  const Task t = generate_task(ts);
  const DenseMatrix teacher = add_scaled(t.pretrained[0], t.delta_star[0], 1.0);
  EXPECT_LE(oracle::max_abs_diff(t.train.targets, matmul_nt(t.train.inputs, teacher)), 1e-12);
}

TEST(Task, MatrixCompletionUsesBasisInputsAndDisjointMasks) {
  TaskSpec ts;
  ts.kind = TaskKind::matrix_completion;
  ts.d = 10;
  ts.k = 8;
  ts.target_delta_rank = 2;
  ts.observed_fraction = 0.5;
  ts.eval_fraction = 0.2;
  ts.test_fraction = 0.2;
  const Task t = generate_task(ts);
  EXPECT_EQ(t.train.inputs, DenseMatrix::identity(8));
  const DenseMatrix full = add_scaled(t.pretrained[0], t.delta_star[0], 1.0);
  EXPECT_LE(oracle::max_abs_diff(t.train.targets, transpose(full)), 1e-15);
  double obs = 0, ev = 0, te = 0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 10; ++j) {
      const double a = (*t.train.mask)(i, j), b = (*t.eval.mask)(i, j), c = (*t.test.mask)(i, j);
      EXPECT_LE(a + b + c, 1.0);
      obs += a, ev += b, te += c;
    }
  EXPECT_EQ(obs, 40.0);
  EXPECT_EQ(ev, 16.0);
  EXPECT_EQ(te, 16.0);
}

TEST(Task, ClassificationLabelsAreInRange) {
  TaskSpec ts;
  ts.kind = TaskKind::synthetic_classification;
  ts.k = 10;
  ts.hidden = 12;
  ts.classes = 3;
  ts.target_delta_rank = 2;
  ts.n_train = 50;
  const Task t = generate_task(ts);
  ASSERT_EQ(t.skeleton.layers.size(), 2u);
  for (std::size_t y : t.train.labels) EXPECT_LT(y, 3u);
  EXPECT_EQ(t.delta_star.size(), 2u);
}

TEST(Task, TailEnergyMatchesOracleSpectrum) {
  TaskSpec ts;
  const Task t = generate_task(ts);
  const auto sv = oracle::gram_singular_values(t.delta_star[0]);
  double want = 0.0;
  for (std::size_t i = 2; i < 8; ++i) want += sv[i] * sv[i];
  EXPECT_NEAR(rank_r_tail_energy(t.delta_star[0], 2), 0.5 * want, 1e-9);
  EXPECT_NEAR(rank_r_tail_energy(t.delta_star[0], 8), 0.0, 1e-12);
}

TEST(Config, ParsesKeysAndRejectsUnknownOnes) {
  const ConfigMap m = parse_config_text("# comment\ntask.d = 16\nseeds = 1..3\noptim.lr_grid = 1e-3, 5e-4\n");
  const ExperimentConfig c = parse_experiment_config(m);
  EXPECT_EQ(c.task.d, 16u);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(c.lr_grid, (std::vector<double>{1e-3, 5e-4}));
  try {
    parse_experiment_config(parse_config_text("task.dd = 3\n"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("task.dd"), std::string::npos);
  }
  EXPECT_THROW(parse_config_text("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config(parse_config_text("task.d = -4\n")), ConfigError);
}

TEST(Config, RoundTripsThroughResultsJson) {
  ExperimentConfig c = tiny_experiment();
  c.adamw.weight_decay = 0.01;
  c.lr_grid = {1e-3, 1.0 / 3.0};
  c.schedule.unit = KnotUnit::step;
  c.schedule.knots = {5};
  c.seeds = {4, 9};
  ExperimentResult res;
  res.raw.push_back(ResultRow{});
  res.raw_traces.emplace_back();
  res.best = {0};
  const auto j = nlohmann::json::parse(results_json(res, c).dump());
  EXPECT_EQ(config_from_results_json(j), c);
}

TEST(Config, FwKeys) {
  const FwDemoConfig c = parse_fw_config(parse_config_text("fw.d = 12\nfw.horizon = 50\n"));
  EXPECT_EQ(c.d, 12u);
  EXPECT_EQ(c.horizon, 50);
  EXPECT_THROW(parse_fw_config(parse_config_text("fw.nope = 1\n")), ConfigError);
}

TEST(Results, MeanAndSampleStd) {
  const auto [m, s] = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_DOUBLE_EQ(s, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(mean_std({7.0}).second, 0.0);
}

TEST(Results, SummaryOfFiveSeeds) {
  // Hand computation: mean 56.53, deviations -1.2 0.4 0.9 -0.6 0.5, sum of squares 3.02.
  const std::vector<double> xs{55.33, 56.93, 57.43, 55.93, 57.03};
  const auto [m, s] = mean_std(xs);
  EXPECT_NEAR(m, 56.53, 1e-12);
  EXPECT_NEAR(s, std::sqrt(3.02 / 4.0), 1e-12);

  ExperimentResult res;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    ResultRow r;
    r.task = "teacher_student";
    r.method = "cola";
    r.seed = i + 1;
    r.lr = 1e-3;
    r.batch_size = 8;
    r.final_eval = xs[i];
    r.test = xs[i] + 1.0;
    res.raw.push_back(r);
    res.best.push_back(i);
  }
  const auto summary = summarize(res);
  ASSERT_EQ(summary.size(), 2u);
  for (const SummaryRow& row : summary) {
    EXPECT_EQ(row.n, 5u);
    EXPECT_NEAR(row.mean_eval, 56.53, 1e-12);
    EXPECT_NEAR(row.std_eval, std::sqrt(3.02 / 4.0), 1e-12);
    EXPECT_NEAR(row.mean_test, 57.53, 1e-12);
  }
}

TEST(Results, SingleRowCsvHasHeaderAndOneLine) {
  ResultRow r;
  r.task = "teacher_student";
  r.method = "cola";
  r.schedule = "cola(8,6)@[3]";
  r.seed = 3;
  r.final_eval = 0.5;
  const std::string csv = results_csv({r});
  EXPECT_EQ(line_count(csv), 2u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,method,schedule,seed,eval,test,flops,wall_time");
  // The descriptor holds commas, so it must be quoted to keep eight columns.
  EXPECT_NE(csv.find(",\"cola(8,6)@[3]\",3,"), std::string::npos);
}

TEST(Results, OneBestRowPerMethodAndSeed) {
  const ExperimentConfig c = tiny_experiment();
  const ExperimentResult res = run_experiment(c);
  EXPECT_EQ(res.raw.size(), 2u * 5u * 2u);
  ASSERT_EQ(res.best.size(), 10u);
  for (std::size_t idx : res.best) {
    const ResultRow& b = res.raw[idx];
    for (const ResultRow& r : res.raw) {
      if (r.method == b.method && r.seed == b.seed) {
        EXPECT_LE(b.final_eval, r.final_eval);
      }
    }
  }
  const auto summary = summarize(res);
  EXPECT_EQ(summary.size(), 4u);

  const auto dir = std::filesystem::temp_directory_path() / "cola_harness_test";
  std::filesystem::remove_all(dir);
  emit_results(res, c, dir);
  EXPECT_EQ(line_count(slurp(dir / "results.csv")), 11u);
  EXPECT_EQ(line_count(slurp(dir / "raw.csv")), 21u);
  EXPECT_TRUE(std::filesystem::exists(dir / "results.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "traces" / "cola_seed1.csv"));
  std::filesystem::remove_all(dir);
}

TEST(Results, RerunsAreDeterministicApartFromWallTime) {
  ExperimentConfig c = tiny_experiment();
  c.seeds = {1, 2};
  auto strip = [](std::vector<ResultRow> rows) {
    for (auto& r : rows) r.wall_time = 0.0;
    return results_csv(rows);
  };
  const std::string a = strip(run_experiment(c).raw);
  c.jobs = 3;
  EXPECT_EQ(a, strip(run_experiment(c).raw));
}

TEST(FwDemo, QuadraticDemoPasses) {
  FwDemoConfig c;
  c.d = c.k = 8;
  c.radius = 4.0;
  c.target_rank = 2;
  c.horizon = 400;
  const FwDemoResult r = run_fw_demo(c);
  EXPECT_TRUE(r.report.pass);
  EXPECT_LE(r.descent_violation, 1e-8);
  const std::string csv = fw_trace_csv(r.trace);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "t,loss,gap,eta,oracle_residual");
  EXPECT_EQ(line_count(csv), 401u);
}
