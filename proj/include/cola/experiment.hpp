// Seed x grid sweeps, best-by-eval selection, CSV/JSON emitters, and the
// Frank-Wolfe demo runner.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "cola/cola.hpp"
#include "cola/config.hpp"
#include "cola/frankwolfe.hpp"
#include "cola/task.hpp"

namespace cola {

/// Metrics are losses on the eval/test splits (lower is better).
struct ResultRow {
  std::string task;
  std::string method;
  std::string schedule;
  std::uint64_t seed = 0;
  double lr = 0.0;
  std::size_t batch_size = 0;
  double final_eval = 0.0;
  double test = 0.0;
  double flops = 0.0;
  double wall_time = 0.0;
  std::string status = "ok";  // "ok" or "diverged: <reason>"

  bool ok() const { return status == "ok"; }
};

struct ExperimentResult {
  std::vector<ResultRow> raw;      // one per (method, seed, grid point)
  std::vector<RunTrace> raw_traces;
  std::vector<std::size_t> best;   // indices into raw, one per (method, seed)
};

struct SummaryRow {
  std::string task;
  std::string method;
  std::string schedule;
  std::string aggregation;  // per_seed_best | best_grid_point_mean
  std::size_t n = 0;
  double mean_eval = 0.0;
  double std_eval = 0.0;
  double mean_test = 0.0;
  double std_test = 0.0;
  std::string grid_point;  // lr/batch for best_grid_point_mean, "-" otherwise
};

/// Mean and sample standard deviation (n - 1 denominator; 0 for n = 1).
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {NAN, NAN};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() == 1) return {m, 0.0};
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(xs.size() - 1))};
}

inline ColaSchedule schedule_for(const ExperimentConfig& cfg, Method m) {
  if (m == Method::cola) return cfg.schedule;
  ColaSchedule s;
  s.total_epochs = cfg.schedule.total_epochs;
  s.rank_per_segment = {cfg.schedule.rank_per_segment.front()};
  s.alpha = cfg.schedule.alpha;
  s.unit = cfg.schedule.unit;
  return s;
}

namespace detail {

struct GridPoint {
  Method method;
  std::uint64_t seed;
  double lr;
  std::size_t batch;
};

inline std::pair<ResultRow, RunTrace> run_grid_point(const Task& task, const ExperimentConfig& cfg,
                                                     const GridPoint& gp) {
  const auto t0 = std::chrono::steady_clock::now();
  const ColaSchedule sched = schedule_for(cfg, gp.method);
  ResultRow row;
  row.task = to_string(task.spec.kind);
  row.method = to_string(gp.method);
  row.schedule = sched.descriptor();
  row.seed = gp.seed;
  row.lr = gp.lr;
  row.batch_size = gp.batch;

  SeededRng rng(gp.seed);
  LoraLinearModel model = task.skeleton;
  attach_adapters(model, rng, sched.rank_per_segment.front(), sched.alpha, cfg.init_std);
  TrainConfig tc;
  tc.adamw = cfg.adamw;
  tc.lr0 = gp.lr;
  tc.batch_size = gp.batch;
  tc.restart_lr_at_knots = cfg.restart_lr_at_knots;
  tc.init_std = cfg.init_std;

  RunTrace trace;
  try {
    ColaRun run = run_cola(std::move(model), Dataset{task.train, task.eval}, sched, tc, rng);
    row.final_eval = run.trace.final_eval();
    row.test = loss(run.model, task.test);
    row.flops = run.trace.flops_total;
    trace = std::move(run.trace);
  } catch (const DivergenceError& e) {
    row.status = std::string("diverged: ") + e.what();
    row.final_eval = NAN;
    row.test = NAN;
    trace = e.trace();
  } catch (const NonFiniteGradient& e) {
    row.status = std::string("diverged: ") + e.what();
    row.final_eval = NAN;
    row.test = NAN;
  }
  row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(row), std::move(trace)};
}

}  // namespace detail

/// Trains every (method, seed, lr, batch) combination and picks, per
/// (method, seed), the grid point with the lowest final eval loss. Test
/// losses are never consulted for selection.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const Task task = generate_task(cfg.task);
  std::vector<detail::GridPoint> grid;
  for (Method m : cfg.methods)
    for (std::uint64_t s : cfg.seeds)
      for (std::size_t b : cfg.batch_sizes)
        for (double lr : cfg.lr_grid) grid.push_back({m, s, lr, b});

  ExperimentResult res;
  res.raw.resize(grid.size());
  res.raw_traces.resize(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      auto [row, trace] = detail::run_grid_point(task, cfg, grid[i]);
      res.raw[i] = std::move(row);
      res.raw_traces[i] = std::move(trace);
    }
  };
  const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(grid.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }

  const std::size_t per_seed = cfg.batch_sizes.size() * cfg.lr_grid.size();
  for (std::size_t start = 0; start < grid.size(); start += per_seed) {
    std::size_t best = start;
    for (std::size_t i = start; i < start + per_seed; ++i) {
      const ResultRow& r = res.raw[i];
      const ResultRow& b = res.raw[best];
      if (r.ok() && (!b.ok() || r.final_eval < b.final_eval)) best = i;
    }
    res.best.push_back(best);
  }
  return res;
}

/// Both aggregations over seeds, per (task, method):
///  per_seed_best         - mean/std of each seed's best-by-eval row;
///  best_grid_point_mean  - the grid point whose seed-mean eval is lowest.
inline std::vector<SummaryRow> summarize(const ExperimentResult& res) {
  std::vector<SummaryRow> out;
  std::vector<std::string> methods;
  for (std::size_t i : res.best) {
    if (std::find(methods.begin(), methods.end(), res.raw[i].method) == methods.end()) {
      methods.push_back(res.raw[i].method);
    }
  }
  for (const std::string& m : methods) {
    SummaryRow s;
    std::vector<double> ev, te;
    for (std::size_t i : res.best) {
      const ResultRow& r = res.raw[i];
      if (r.method != m) continue;
      s.task = r.task;
      s.schedule = r.schedule;
      if (r.ok()) ev.push_back(r.final_eval), te.push_back(r.test);
    }
    s.method = m;
    s.aggregation = "per_seed_best";
    s.n = ev.size();
    std::tie(s.mean_eval, s.std_eval) = mean_std(ev);
    std::tie(s.mean_test, s.std_test) = mean_std(te);
    s.grid_point = "-";
    out.push_back(s);

    std::map<std::pair<double, std::size_t>, std::pair<std::vector<double>, std::vector<double>>> by_point;
    std::vector<std::pair<double, std::size_t>> order;
    for (const ResultRow& r : res.raw) {
      if (r.method != m) continue;
      const auto key = std::make_pair(r.lr, r.batch_size);
      if (!by_point.contains(key)) order.push_back(key);
      auto& [e, t] = by_point[key];
      if (r.ok()) e.push_back(r.final_eval), t.push_back(r.test);
    }
    SummaryRow g = s;
    g.aggregation = "best_grid_point_mean";
    bool found = false;
    for (const auto& key : order) {
      const auto& [e, t] = by_point[key];
      if (e.empty()) continue;
      auto [me, se] = mean_std(e);
      if (!found || me < g.mean_eval) {
        found = true;
        g.n = e.size();
        g.mean_eval = me;
        g.std_eval = se;
        std::tie(g.mean_test, g.std_test) = mean_std(t);
        std::ostringstream gp;
        gp << "lr=" << detail::fmt_real(key.first) << " batch=" << key.second;
        g.grid_point = gp.str();
      }
    }
    if (!found) g.n = 0, g.mean_eval = g.std_eval = g.mean_test = g.std_test = NAN;
    out.push_back(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Emitters

enum class OutputFormat { csv, json };

inline const char* kResultsHeader = "task,method,schedule,seed,eval,test,flops,wall_time";

namespace detail {

inline std::string num(double x) {
  std::ostringstream s;
  s.precision(12);
  s << x;
  return s.str();
}

/// Quotes a CSV field when it holds a comma, quote or newline; schedule
/// descriptors such as cola(8,6)@[3] need it.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  return f;
}

inline nlohmann::json row_json(const ResultRow& r) {
  return {{"task", r.task},           {"method", r.method}, {"schedule", r.schedule},
          {"seed", r.seed},           {"lr", r.lr},         {"batch_size", r.batch_size},
          {"eval", r.final_eval},     {"test", r.test},     {"flops", r.flops},
          {"wall_time", r.wall_time}, {"status", r.status}};
}

}  // namespace detail

inline std::string results_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream o;
  o << kResultsHeader << "\n";
  for (const auto& r : rows) {
    o << detail::csv_field(r.task) << "," << detail::csv_field(r.method) << ","
      << detail::csv_field(r.schedule) << "," << r.seed << ","
      << detail::num(r.final_eval) << "," << detail::num(r.test) << "," << detail::num(r.flops)
      << "," << detail::num(r.wall_time) << "\n";
  }
  return o.str();
}

inline std::string raw_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream o;
  o << "task,method,schedule,seed,lr,batch_size,eval,test,flops,wall_time,status\n";
  for (const auto& r : rows) {
    o << detail::csv_field(r.task) << "," << detail::csv_field(r.method) << ","
      << detail::csv_field(r.schedule) << "," << r.seed << ","
      << detail::num(r.lr) << "," << r.batch_size << "," << detail::num(r.final_eval) << ","
      << detail::num(r.test) << "," << detail::num(r.flops) << "," << detail::num(r.wall_time)
      << "," << detail::csv_field(r.status) << "\n";
  }
  return o.str();
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream o;
  o << "task,method,schedule,aggregation,n,eval_mean,eval_std,test_mean,test_std,grid_point\n";
  for (const auto& s : rows) {
    o << detail::csv_field(s.task) << "," << detail::csv_field(s.method) << ","
      << detail::csv_field(s.schedule) << "," << s.aggregation << "," << s.n
      << "," << detail::num(s.mean_eval) << "," << detail::num(s.std_eval) << ","
      << detail::num(s.mean_test) << "," << detail::num(s.std_test) << "," << detail::csv_field(s.grid_point) << "\n";
  }
  return o.str();
}

inline std::string trace_csv(const RunTrace& t) {
  std::ostringstream o;
  o << "global_step,epoch,segment,lr,train_loss\n";
  for (const auto& s : t.steps) {
    o << s.global_step << "," << s.epoch << "," << s.segment << "," << detail::num(s.lr) << ","
      << detail::num(s.train_loss) << "\n";
  }
  return o.str();
}

inline std::vector<ResultRow> best_rows(const ExperimentResult& res) {
  std::vector<ResultRow> out;
  for (std::size_t i : res.best) out.push_back(res.raw[i]);
  return out;
}

inline nlohmann::json results_json(const ExperimentResult& res, const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["config"] = nlohmann::json::object();
  for (const auto& [k, v] : to_config_map(cfg)) j["config"][k] = v;
  j["rows"] = nlohmann::json::array();
  for (std::size_t i : res.best) j["rows"].push_back(detail::row_json(res.raw[i]));
  j["raw"] = nlohmann::json::array();
  for (const auto& r : res.raw) j["raw"].push_back(detail::row_json(r));
  j["summary"] = nlohmann::json::array();
  for (const auto& s : summarize(res)) {
    j["summary"].push_back({{"task", s.task}, {"method", s.method}, {"schedule", s.schedule},
                            {"aggregation", s.aggregation}, {"n", s.n},
                            {"eval_mean", s.mean_eval}, {"eval_std", s.std_eval},
                            {"test_mean", s.mean_test}, {"test_std", s.std_test},
                            {"grid_point", s.grid_point}});
  }
  return j;
}

/// Config echoed in a results JSON document, back in parsed form.
inline ExperimentConfig config_from_results_json(const nlohmann::json& j) {
  ConfigMap m;
  for (const auto& [k, v] : j.at("config").items()) m[k] = v.get<std::string>();
  return parse_experiment_config(m);
}

/// Writes results.csv (best row per method and seed), raw.csv, summary.csv
/// and traces/ for CSV; results.json for JSON.
inline void emit_results(const ExperimentResult& res, const ExperimentConfig& cfg,
                         const std::filesystem::path& dir, std::vector<OutputFormat> formats = {
                             OutputFormat::csv, OutputFormat::json}) {
  if (res.best.empty()) throw std::invalid_argument("emit_results: no rows");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + dir.string() + "': " + ec.message());
  for (OutputFormat f : formats) {
    if (f == OutputFormat::csv) {
      detail::open_out(dir / "results.csv") << results_csv(best_rows(res));
      detail::open_out(dir / "raw.csv") << raw_csv(res.raw);
      detail::open_out(dir / "summary.csv") << summary_csv(summarize(res));
      std::filesystem::create_directories(dir / "traces", ec);
      for (std::size_t i : res.best) {
        const ResultRow& r = res.raw[i];
        detail::open_out(dir / "traces" / (r.method + "_seed" + std::to_string(r.seed) + ".csv"))
            << trace_csv(res.raw_traces[i]);
      }
    } else {
      detail::open_out(dir / "results.json") << results_json(res, cfg).dump(2) << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Frank-Wolfe demo

struct FwDemoResult {
  FwTrace trace;
  BoundReport report;
  double descent_violation = 0.0;
  std::string objective;
};

namespace detail {

/// Random rank-r matrix rescaled to the given nuclear norm.
inline DenseMatrix scaled_low_rank(SeededRng& rng, std::size_t d, std::size_t k, std::size_t r,
                                   double nuclear) {
  DenseMatrix m = matmul(gaussian(rng, d, r, 1.0), gaussian(rng, r, k, 1.0));
  return scaled(m, nuclear / nuclear_norm(m));
}

}  // namespace detail

inline FwDemoResult run_fw_demo(const FwDemoConfig& c) {
  SeededRng rng(c.seed);
  const TraceNormBall ball{c.radius, c.d, c.k};
  FwConfig fc;
  fc.horizon = c.horizon;
  fc.step_mode = c.step_mode;
  fc.custom_steps = c.steps;
  fc.oracle = {c.oracle_tol, c.oracle_max_iter};
  fc.oracle_eps = c.oracle_eps;
  fc.feasibility_check_every = c.feasibility_check_every;

  FwDemoResult out;
  const DenseMatrix target =
      detail::scaled_low_rank(rng, c.d, c.k, c.target_rank, c.target_nuclear_fraction * c.radius);
  if (c.objective == FwObjectiveKind::quadratic) {
    QuadraticObjective obj{target, c.noise_std};
    fc.beta = obj.smoothness();
    fc.value_bound = obj.value_bound(ball);
    out.objective = "quadratic";
    out.trace = run_fw(obj, ball, fc, rng);
  } else {
    MatrixCompletionObjective obj;
    obj.observed_values = target;
    std::vector<std::size_t> cells(c.d * c.k);
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    rng.shuffle(cells);
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(c.observed_fraction * cells.size())));
    for (std::size_t i = 0; i < n; ++i) obj.entries.emplace_back(cells[i] / c.k, cells[i] % c.k);
    obj.batch = c.batch;
    fc.beta = obj.smoothness();
    fc.value_bound = obj.value_bound(ball);
    out.objective = "matrix_completion";
    out.trace = run_fw(obj, ball, fc, rng);
  }
  out.report = verify_theorem_bound(out.trace);
  out.descent_violation = max_descent_violation(out.trace);
  return out;
}

inline std::string fw_trace_csv(const FwTrace& t) {
  std::ostringstream o;
  o << "t,loss,gap,eta,oracle_residual\n";
  for (const auto& s : t.steps) {
    o << s.t << "," << detail::num(s.loss) << "," << detail::num(s.gap) << "," << detail::num(s.eta)
      << "," << detail::num(s.oracle_residual) << "\n";
  }
  return o.str();
}

}  // namespace cola
