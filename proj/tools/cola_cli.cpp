// cola_cli: experiment runner, Frank-Wolfe demo, FLOPs table and self-test.
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cola/cola.hpp"
#include "cola/config.hpp"
#include "cola/experiment.hpp"
#include "cola/selftest.hpp"

namespace {

int cmd_run(const std::string& path, const std::optional<long>& seed,
            const std::optional<std::string>& out_dir, const std::optional<int>& jobs) {
  cola::ExperimentConfig cfg = cola::parse_experiment_config(cola::load_config_file(path));
  if (seed) cfg.seeds = {static_cast<std::uint64_t>(*seed)};
  if (out_dir) cfg.output_dir = *out_dir;
  if (jobs) cfg.jobs = *jobs;

  const cola::ExperimentResult res = cola::run_experiment(cfg);
  cola::emit_results(res, cfg, cfg.output_dir);

  std::cout << "wrote " << res.raw.size() << " runs to " << cfg.output_dir << "\n";
  for (const auto& s : cola::summarize(res)) {
    std::cout << std::left << std::setw(14) << s.method << std::setw(22) << s.schedule
              << std::setw(22) << s.aggregation << "eval " << s.mean_eval << " +- " << s.std_eval
              << "  test " << s.mean_test << " +- " << s.std_test << "\n";
  }
  for (const auto& r : res.raw) {
    if (!r.ok()) std::cerr << "warning: " << r.method << " seed " << r.seed << " lr " << r.lr << ": " << r.status << "\n";
  }
  return 0;
}

int cmd_fw(const std::string& path, const std::optional<long>& seed,
           const std::optional<std::string>& out_dir) {
  cola::FwDemoConfig cfg = cola::parse_fw_config(cola::load_config_file(path));
  if (seed) cfg.seed = static_cast<std::uint64_t>(*seed);
  if (out_dir) cfg.output_dir = *out_dir;

  const cola::FwDemoResult r = cola::run_fw_demo(cfg);
  std::filesystem::create_directories(cfg.output_dir);
  {
    std::ofstream f(std::filesystem::path(cfg.output_dir) / "fw_trace.csv", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write fw_trace.csv in " + cfg.output_dir);
    f << cola::fw_trace_csv(r.trace);
  }
  const auto& tr = r.trace;
  std::cout << std::setprecision(10);
  std::cout << "objective      " << r.objective << "\n"
            << "T              " << tr.steps.size() << "\n"
            << "radius         " << tr.ball.radius << "  (D = " << tr.ball.diameter() << ")\n"
            << "beta           " << tr.beta << "\n"
            << "M              " << tr.value_bound << "\n"
            << "eps            " << tr.eps << "\n"
            << "eta            " << tr.steps.front().eta << (tr.step_clamped ? " (clamped)" : "") << "\n"
            << "final loss     " << tr.steps.back().next_loss << "\n"
            << "lhs avg gap    " << r.report.lhs << "\n"
            << "rhs bound      " << r.report.rhs << "\n"
            << "descent slack  " << r.descent_violation << "\n"
            << "verdict        " << (r.report.pass ? "PASS" : "FAIL") << " (lhs <= rhs)\n";
  return r.report.pass ? 0 : 1;
}

int cmd_flops(std::size_t d, std::size_t k, std::size_t layers, std::size_t n, std::size_t batch,
              int epochs, const std::vector<long>& knots, const std::vector<std::string>& rank_lists) {
  std::vector<cola::LayerShape> dims(layers, cola::LayerShape{d, k, true});
  std::cout << std::left << std::setw(22) << "schedule" << std::setw(18) << "train FLOPs"
            << "FLOPs saved\n";
  for (const std::string& spec : rank_lists) {
    cola::ColaSchedule s;
    s.total_epochs = epochs;
    s.knots = knots;
    s.rank_per_segment.clear();
    for (const auto& tok : cola::detail::split_list(spec)) s.rank_per_segment.push_back(std::stoul(tok));
    if (s.rank_per_segment.size() == 1) s.knots.clear();
    const cola::FlopsReport r = cola::training_flops(s, dims, n, batch);
    std::ostringstream total, saved;
    total << std::scientific << std::setprecision(3) << r.total;
    saved << std::scientific << std::setprecision(3) << r.saved_vs_fixed_rank;
    std::cout << std::setw(22) << s.descriptor() << std::setw(18) << total.str()
              << (r.saved_vs_fixed_rank == 0.0 ? "-" : saved.str()) << "\n";
  }
  return 0;
}

int cmd_selftest() {
  bool all = true;
  for (const auto& c : cola::run_selftest()) {
    std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name;
    if (!c.detail.empty()) std::cout << " (" << c.detail << ")";
    std::cout << "\n";
    all = all && c.pass;
  }
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chain-of-LoRA experiments and Frank-Wolfe over the trace-norm ball"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<long> seed;
  std::optional<std::string> out_dir;
  std::optional<int> jobs;

  auto* run = app.add_subcommand("run", "Run a seed x grid experiment from a config file");
  run->add_option("config", config_path, "Config file")->required();
  run->add_option("--seed", seed, "Run a single seed instead of the configured list");
  run->add_option("--output-dir", out_dir, "Override output_dir");
  run->add_option("--jobs", jobs, "Concurrent runs");

  auto* fw = app.add_subcommand("fw-demo", "Frank-Wolfe run with averaged-gap bound verification");
  fw->add_option("config", config_path, "Config file")->required();
  fw->add_option("--seed", seed, "Override fw.seed");
  fw->add_option("--output-dir", out_dir, "Override output_dir");

  std::size_t d = 64, k = 64, layers = 1, n = 1000, batch = 8;
  int epochs = 5;
  std::vector<long> knots{3};
  std::vector<std::string> ranks;
  auto* flops = app.add_subcommand("flops", "Training FLOPs for rank schedules");
  flops->add_option("--d", d, "Layer output dim")->capture_default_str();
  flops->add_option("--k", k, "Layer input dim")->capture_default_str();
  flops->add_option("--layers", layers, "Adapted layers")->capture_default_str();
  flops->add_option("--dataset-size", n, "Training examples")->capture_default_str();
  flops->add_option("--batch-size", batch, "Batch size")->capture_default_str();
  flops->add_option("--epochs", epochs, "Total epochs")->capture_default_str();
  flops->add_option("--knots", knots, "Knot epochs")->delimiter(',')->capture_default_str();
  flops->add_option("--ranks", ranks, "Rank schedule, e.g. 8,6 (repeatable)");

  auto* selftest = app.add_subcommand("selftest", "Run the built-in invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*run) return cmd_run(config_path, seed, out_dir, jobs);
    if (*fw) return cmd_fw(config_path, seed, out_dir);
    if (*flops) {
      if (ranks.empty()) ranks = {"8,8", "8,6", "8,4", "8,2"};
      return cmd_flops(d, k, layers, n, batch, epochs, knots, ranks);
    }
    if (*selftest) return cmd_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
