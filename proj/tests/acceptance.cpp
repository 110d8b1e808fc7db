// End-to-end acceptance checks. Prints one [PASS]/[FAIL] line per criterion
// and exits nonzero if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cola/cola.hpp"
#include "cola/experiment.hpp"
#include "cola/frankwolfe.hpp"
#include "cola/task.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cola;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

Outcome merge_equivalence() {
  SeededRng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 2 + rng.below(10), k = 2 + rng.below(10);
    const std::size_t r = 1 + rng.below(std::min(d, k) - 1);
    LoraAdapter ad = init_adapter(rng, d, k, r, 2.0 * static_cast<double>(r), 0.5);
    ad.b = gaussian(rng, d, r, 0.5);
    const DenseMatrix w = gaussian(rng, d, k, 1.0);
    const DenseMatrix x = gaussian(rng, 3, k, 1.0);
    const DenseMatrix split = add_scaled(matmul_nt(x, w), matmul_nt(matmul_nt(x, ad.a), ad.b), ad.scale());
    worst = std::max(worst, oracle::max_abs_diff(split, matmul_nt(x, merge_into(w, ad))));
  }
  return {worst <= 1e-10, "100 pairs, max abs diff " + fmt(worst)};
}

Outcome finite_differences() {
  double worst = 0.0;
  int models = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SeededRng rng(1000 + seed);
    for (LossKind kind : {LossKind::mse, LossKind::softmax_cross_entropy}) {
      const LoraLinearModel m = fixtures::random_model(rng, {5, 4, 3}, Activation::tanh, kind, 2);
      worst = std::max(worst, fixtures::fd_gradient_error(m, fixtures::random_batch(rng, m, 4), 1e-5));
      ++models;
    }
  }
  return {worst <= 1e-5, std::to_string(models) + " models, max rel err " + fmt(worst)};
}

Outcome zero_start() {
  TaskSpec ts;
  ts.seed = 3;
  const Task t = generate_task(ts);
  SeededRng rng(5);
  LoraLinearModel m = t.skeleton;
  attach_adapters(m, rng, 8, 16.0);
  const bool init_exact = forward(m, t.eval.inputs) == forward(t.skeleton, t.eval.inputs) &&
                          loss(m, t.eval) == loss(t.skeleton, t.eval);

  // Give the adapter a delta, tie it in, and re-initialize at a new rank.
  m.layers[0].adapter->b = gaussian(rng, 64, 8, 0.1);
  AdamW opt;
  const LoraLinearModel tied = tie_knot(m);
  const LoraLinearModel extended = extend_chain(tied, rng, 4, opt);
  const bool reinit_exact = loss(extended, t.eval) == loss(frozen_only(extended), t.eval);
  return {init_exact && reinit_exact, std::string("init ") + (init_exact ? "bit-exact" : "differs") +
                                          ", reinit " + (reinit_exact ? "bit-exact" : "differs")};
}

Outcome knot_transparency() {
  TaskSpec ts;
  ts.seed = 4;
  ts.n_train = 200;
  const Task t = generate_task(ts);
  SeededRng rng(6);
  LoraLinearModel m = t.skeleton;
  attach_adapters(m, rng, 4, 16.0);
  ColaSchedule s;
  s.total_epochs = 3;
  s.knots = {1, 2};
  s.rank_per_segment = {4, 4, 2};
  TrainConfig cfg;
  cfg.lr0 = 5e-3;
  const ColaRun run = run_cola(m, {t.train, t.eval}, s, cfg, rng);
  double worst = 0.0;
  bool cleared = true;
  for (const KnotEvent& e : run.trace.knot_events) {
    worst = std::max(worst, std::abs(e.eval_after - e.eval_before));
    cleared = cleared && e.optimizer_cleared;
  }
  const bool ok = run.trace.knot_events.size() == 2 && worst <= 1e-10 && cleared;
  return {ok, std::to_string(run.trace.knot_events.size()) + " knots, max eval jump " + fmt(worst)};
}

// The bound and descent criteria share one instance and one run.
struct FwInstance {
  TraceNormBall ball{10.0, 20, 20};
  QuadraticObjective obj;
  FwConfig cfg;
  FwTrace trace;
};

const FwInstance& fw_instance() {
  static const FwInstance inst = [] {
    FwInstance in;
    SeededRng rng(2718);
    DenseMatrix target = matmul(gaussian(rng, 20, 5, 1.0), gaussian(rng, 5, 20, 1.0));
    in.obj.target = scaled(target, 0.5 * in.ball.radius / nuclear_norm(target));
    in.cfg.horizon = 10000;
    in.cfg.beta = in.obj.smoothness();
    in.cfg.value_bound = in.obj.value_bound(in.ball);
    in.cfg.feasibility_check_every = 1000;
    in.trace = run_fw(in.obj, in.ball, in.cfg, rng);
    return in;
  }();
  return inst;
}

Outcome fw_bound() {
  const FwInstance& in = fw_instance();
  const FwTrace& tr = in.trace;
  const BoundReport rep = verify_theorem_bound(tr);
  bool feasible = true;
  for (const FwStep& s : tr.steps) {
    if (s.nuclear_norm >= 0.0) feasible = feasible && s.nuclear_norm <= in.ball.radius * (1.0 + 1e-9);
  }
  // rank(W_t) <= t - 1 from W_1 = 0: replay the first steps with the same step size.
  bool low_rank = true;
  for (long t = 1; t <= 21 && low_rank; ++t) {
    FwConfig short_run = in.cfg;
    short_run.horizon = t;
    short_run.step_mode = StepMode::custom;
    short_run.custom_steps = {tr.steps.front().eta};
    short_run.feasibility_check_every = 0;
    SeededRng unused(0);
    const FwTrace p = run_fw(in.obj, in.ball, short_run, unused);
    low_rank = numerical_rank(p.final_iterate, 1e-9) <= static_cast<std::size_t>(t);
  }
  for (const FwStep& s : tr.steps) low_rank = low_rank && s.factors <= static_cast<std::size_t>(s.t);
  return {rep.pass && low_rank && feasible && !tr.step_clamped,
          "T=10000, avg gap " + fmt(rep.lhs) + " <= " + fmt(rep.rhs) + (low_rank ? "" : ", rank bound broken") +
              (feasible ? "" : ", left the ball")};
}

Outcome fw_descent() {
  const double v = max_descent_violation(fw_instance().trace);
  return {v <= 1e-8, "max violation " + fmt(v)};
}

Outcome teacher_student_ordering() {
  TaskSpec ts;
  ts.seed = 7;
  const Task task = generate_task(ts);
  TrainConfig cfg;
  cfg.lr0 = 1e-3;
  std::vector<std::vector<double>> finals(3);
  for (std::size_t length = 1; length <= 3; ++length) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      SeededRng rng(seed);
      LoraLinearModel m = task.skeleton;
      attach_adapters(m, rng, 2, 16.0);
      ColaSchedule s;
      s.total_epochs = 5;
      s.knots = even_knots(5, length);
      s.rank_per_segment.assign(length, 2);
      finals[length - 1].push_back(run_cola(m, {task.train, task.eval}, s, cfg, rng).trace.final_eval());
    }
  }
  std::vector<double> mean(3), var(3);
  for (int i = 0; i < 3; ++i) {
    auto [mu, sd] = mean_std(finals[i]);
    mean[i] = mu;
    var[i] = sd * sd;
  }
  const double pooled = std::sqrt((var[0] + var[1] + var[2]) / 3.0);
  int inversions = 0;
  bool small = true;
  for (int i = 0; i < 2; ++i) {
    if (mean[i + 1] > mean[i]) {
      ++inversions;
      small = small && mean[i + 1] - mean[i] <= pooled;
    }
  }
  const bool ok = mean[2] < mean[0] && (inversions == 0 || (inversions == 1 && small));
  return {ok, "eval means " + fmt(mean[0]) + " / " + fmt(mean[1]) + " / " + fmt(mean[2]) +
                  " (pooled std " + fmt(pooled) + ")"};
}

Outcome flops_linearity() {
  const std::vector<LayerShape> dims{{64, 64, true}};
  auto saved = [&](std::size_t r2) {
    ColaSchedule s;
    s.total_epochs = 5;
    s.knots = {3};
    s.rank_per_segment = {8, r2};
    return training_flops(s, dims, 1000, 8).saved_vs_fixed_rank;
  };
  const double s6 = saved(6);
  const bool ok = saved(8) == 0.0 && s6 > 0.0 && saved(4) == 2.0 * s6 && saved(2) == 3.0 * s6;
  return {ok, "saved(8,6)=" + fmt(s6) + " saved(8,4)=" + fmt(saved(4)) + " saved(8,2)=" + fmt(saved(2))};
}

Outcome relative_gains() {
  struct Cell { double lora, cola, gain; };
  const std::vector<Cell> cells{{93.16, 93.32, 0.17}, {56.53, 60.19, 6.47}, {75.35, 76.42, 1.42},
                                {63.47, 64.26, 1.24}, {70.70, 72.08, 1.95}, {68.94, 70.63, 2.45},
                                {72.49, 74.15, 2.29}};
  double worst = 0.0;
  for (const Cell& c : cells) worst = std::max(worst, std::abs(relative_gain(c.lora, c.cola) - c.gain));
  return {worst <= 0.01, "7 cells, max deviation " + fmt(worst)};
}

std::string without_wall_time(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::string line, out;
  std::size_t wall_col = std::string::npos;
  bool header = true;
  while (std::getline(f, line)) {
    // Quote-aware split: schedule descriptors contain commas.
    std::vector<std::string> cells(1);
    bool quoted = false;
    for (char ch : line) {
      if (ch == '"') quoted = !quoted;
      else if (ch == ',' && !quoted) cells.emplace_back();
      else cells.back() += ch;
    }
    if (header) {
      wall_col = static_cast<std::size_t>(std::find(cells.begin(), cells.end(), "wall_time") - cells.begin());
      header = false;
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i != wall_col) out += cells[i] + ",";
    }
    out += "\n";
  }
  return out;
}

Outcome cli_determinism() {
  const auto base = std::filesystem::temp_directory_path() / "cola_acceptance_cli";
  std::filesystem::remove_all(base);
  std::vector<std::string> contents;
  for (const char* run : {"a", "b"}) {
    const auto dir = base / run;
    const std::string cmd = std::string("\"") + COLA_CLI_PATH + "\" run \"" + COLA_CONFIG_DIR +
                            "/teacher_student.cfg\" --output-dir \"" + dir.string() + "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "cola_cli run failed: " + cmd};
    contents.push_back(without_wall_time(dir / "results.csv") + without_wall_time(dir / "raw.csv"));
  }
  std::filesystem::remove_all(base);
  const bool same = contents[0] == contents[1] && !contents[0].empty();
  return {same, same ? "results.csv and raw.csv identical" : "outputs differ"};
}

}  // namespace

int main() {
  struct Criterion {
    std::string name;
    std::function<Outcome()> check;
    double time_limit;  // seconds
  };
  const double none = 1e9;
  const std::vector<Criterion> criteria{
      {"merge equivalence", merge_equivalence, 5},
      {"adapter gradients match finite differences", finite_differences, 30},
      {"zero-start identity", zero_start, none},
      {"knot transparency", knot_transparency, none},
      {"frank-wolfe averaged gap bound", fw_bound, 60},
      {"frank-wolfe per-step descent inequality", fw_descent, none},
      {"longer chains help on teacher-student", teacher_student_ordering, 300},
      {"flops saving linear in rank drop", flops_linearity, none},
      {"relative gains reproduce the published table", relative_gains, none},
      {"cli runs are deterministic", cli_determinism, none},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > criteria[i].time_limit) {
      o.pass = false;
      o.detail += ", over the " + fmt(criteria[i].time_limit) + " s limit";
    }
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << i + 1 << ". " << criteria[i].name << ": " << o.detail
              << " (" << fmt(secs) << " s)" << std::endl;
    if (!o.pass) ++failed;
  }
  std::cout << criteria.size() - static_cast<std::size_t>(failed) << "/" << criteria.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
