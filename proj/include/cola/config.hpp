// Flat "key = value" configuration files.
//
// One assignment per line, '#' starts a comment, blank lines are ignored.
// Lists are comma separated; integer lists also accept "a..b" ranges.
// Every key is typed and documented in configs/README.md; an unknown key is
// an error that names the key.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cola/cola.hpp"
#include "cola/frankwolfe.hpp"
#include "cola/task.hpp"

namespace cola {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (out.contains(key)) throw ConfigError("config key '" + key + "' given twice");
    out[key] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline ConfigMap load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

/// Typed access to a ConfigMap that remembers which keys were consumed.
class ConfigReader {
 public:
  ConfigReader(const ConfigMap& map, std::set<std::string> allowed)
      : map_(map), allowed_(std::move(allowed)) {
    for (const auto& [k, v] : map_) {
      if (!allowed_.contains(k)) throw ConfigError("unknown config key '" + k + "'");
    }
  }

  bool has(const std::string& key) const { return map_.contains(key); }

  std::string str(const std::string& key, const std::string& def) const {
    auto it = map_.find(key);
    return it == map_.end() ? def : it->second;
  }

  double real(const std::string& key, double def) const {
    auto it = map_.find(key);
    if (it == map_.end()) return def;
    return parse_real(key, it->second);
  }

  long integer(const std::string& key, long def) const {
    auto it = map_.find(key);
    if (it == map_.end()) return def;
    return parse_int(key, it->second);
  }

  std::size_t count(const std::string& key, std::size_t def) const {
    const long v = integer(key, static_cast<long>(def));
    if (v < 0) throw ConfigError("config key '" + key + "' must be nonnegative");
    return static_cast<std::size_t>(v);
  }

  bool boolean(const std::string& key, bool def) const {
    auto it = map_.find(key);
    if (it == map_.end()) return def;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + it->second + "'");
  }

  std::vector<double> reals(const std::string& key, std::vector<double> def) const {
    auto it = map_.find(key);
    if (it == map_.end()) return def;
    std::vector<double> out;
    for (const auto& s : detail::split_list(it->second)) out.push_back(parse_real(key, s));
    return out;
  }

  std::vector<long> integers(const std::string& key, std::vector<long> def) const {
    auto it = map_.find(key);
    if (it == map_.end()) return def;
    std::vector<long> out;
    for (const auto& s : detail::split_list(it->second)) {
      if (auto dots = s.find(".."); dots != std::string::npos) {
        const long a = parse_int(key, s.substr(0, dots));
        const long b = parse_int(key, s.substr(dots + 2));
        if (b < a) throw ConfigError("config key '" + key + "': empty range '" + s + "'");
        for (long x = a; x <= b; ++x) out.push_back(x);
      } else {
        out.push_back(parse_int(key, s));
      }
    }
    return out;
  }

 private:
  static double parse_real(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
    }
  }

  static long parse_int(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(detail::trim(s), &pos);
      if (pos != detail::trim(s).size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + s + "' is not an integer");
    }
  }

  const ConfigMap& map_;
  std::set<std::string> allowed_;
};

// ---------------------------------------------------------------------------
// Experiment configuration

enum class Method { lora_baseline, cola };

inline std::string to_string(Method m) { return m == Method::cola ? "cola" : "lora_baseline"; }

struct ExperimentConfig {
  TaskSpec task;
  std::vector<Method> methods{Method::lora_baseline, Method::cola};
  ColaSchedule schedule;  // lora_baseline uses total_epochs and the first rank only
  AdamWHyper adamw;
  std::vector<double> lr_grid{1e-3, 8e-4, 5e-4, 1e-4, 5e-5};
  std::vector<std::size_t> batch_sizes{8};
  bool restart_lr_at_knots = false;
  double init_std = kDefaultInitStd;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "results";
  int jobs = 1;

  bool operator==(const ExperimentConfig& o) const {
    return task == o.task && methods == o.methods && schedule.total_epochs == o.schedule.total_epochs &&
           schedule.knots == o.schedule.knots && schedule.rank_per_segment == o.schedule.rank_per_segment &&
           schedule.alpha == o.schedule.alpha && schedule.unit == o.schedule.unit &&
           adamw.beta1 == o.adamw.beta1 && adamw.beta2 == o.adamw.beta2 && adamw.eps == o.adamw.eps &&
           adamw.weight_decay == o.adamw.weight_decay && lr_grid == o.lr_grid &&
           batch_sizes == o.batch_sizes && restart_lr_at_knots == o.restart_lr_at_knots &&
           init_std == o.init_std && seeds == o.seeds && output_dir == o.output_dir && jobs == o.jobs;
  }
};

inline const std::set<std::string>& experiment_keys() {
  static const std::set<std::string> keys{
      "task.kind", "task.d", "task.k", "task.hidden", "task.classes", "task.target_delta_rank",
      "task.delta_scale", "task.noise_std", "task.n_train", "task.n_eval", "task.n_test",
      "task.observed_fraction", "task.eval_fraction", "task.test_fraction", "task.seed",
      "methods", "schedule.total_epochs", "schedule.knots", "schedule.knot_unit", "schedule.ranks",
      "schedule.alpha", "optim.lr_grid", "optim.batch_sizes", "optim.beta1", "optim.beta2",
      "optim.eps", "optim.weight_decay", "optim.restart_lr_at_knots", "lora.init_std", "seeds",
      "output_dir", "jobs"};
  return keys;
}

inline ExperimentConfig parse_experiment_config(const ConfigMap& map) {
  ConfigReader r(map, experiment_keys());
  ExperimentConfig c;

  const std::string kind = r.str("task.kind", "teacher_student");
  if (kind == "teacher_student") c.task.kind = TaskKind::teacher_student;
  else if (kind == "matrix_completion") c.task.kind = TaskKind::matrix_completion;
  else if (kind == "synthetic_classification") c.task.kind = TaskKind::synthetic_classification;
  else throw ConfigError("config key 'task.kind': unknown task '" + kind + "'");
  c.task.d = r.count("task.d", c.task.d);
  c.task.k = r.count("task.k", c.task.k);
  c.task.hidden = r.count("task.hidden", c.task.hidden);
  c.task.classes = r.count("task.classes", c.task.classes);
  c.task.target_delta_rank = r.count("task.target_delta_rank", c.task.target_delta_rank);
  c.task.delta_scale = r.real("task.delta_scale", c.task.delta_scale);
  c.task.noise_std = r.real("task.noise_std", c.task.noise_std);
  c.task.n_train = r.count("task.n_train", c.task.n_train);
  c.task.n_eval = r.count("task.n_eval", c.task.n_eval);
  c.task.n_test = r.count("task.n_test", c.task.n_test);
  c.task.observed_fraction = r.real("task.observed_fraction", c.task.observed_fraction);
  c.task.eval_fraction = r.real("task.eval_fraction", c.task.eval_fraction);
  c.task.test_fraction = r.real("task.test_fraction", c.task.test_fraction);
  c.task.seed = static_cast<std::uint64_t>(r.integer("task.seed", 0));

  if (r.has("methods")) {
    c.methods.clear();
    for (const auto& m : detail::split_list(r.str("methods", ""))) {
      if (m == "cola") c.methods.push_back(Method::cola);
      else if (m == "lora_baseline") c.methods.push_back(Method::lora_baseline);
      else throw ConfigError("config key 'methods': unknown method '" + m + "'");
    }
    if (c.methods.empty()) throw ConfigError("config key 'methods': empty list");
  }

  c.schedule.total_epochs = static_cast<int>(r.integer("schedule.total_epochs", 5));
  c.schedule.knots = r.integers("schedule.knots", {3});
  const std::string unit = r.str("schedule.knot_unit", "epoch");
  if (unit == "epoch") c.schedule.unit = KnotUnit::epoch;
  else if (unit == "step") c.schedule.unit = KnotUnit::step;
  else throw ConfigError("config key 'schedule.knot_unit': expected epoch or step");
  c.schedule.rank_per_segment.clear();
  for (long x : r.integers("schedule.ranks", {8, 8})) {
    if (x <= 0) throw ConfigError("config key 'schedule.ranks': ranks must be positive");
    c.schedule.rank_per_segment.push_back(static_cast<std::size_t>(x));
  }
  c.schedule.alpha = r.real("schedule.alpha", 16.0);
  try {
    c.schedule.validate(1L << 40);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config keys 'schedule.*': ") + e.what());
  }

  c.lr_grid = r.reals("optim.lr_grid", c.lr_grid);
  if (c.lr_grid.empty()) throw ConfigError("config key 'optim.lr_grid': empty list");
  for (double lr : c.lr_grid) {
    if (!(lr > 0.0)) throw ConfigError("config key 'optim.lr_grid': learning rates must be positive");
  }
  c.batch_sizes.clear();
  for (long b : r.integers("optim.batch_sizes", {8})) {
    if (b <= 0) throw ConfigError("config key 'optim.batch_sizes': sizes must be positive");
    c.batch_sizes.push_back(static_cast<std::size_t>(b));
  }
  c.adamw.beta1 = r.real("optim.beta1", c.adamw.beta1);
  c.adamw.beta2 = r.real("optim.beta2", c.adamw.beta2);
  c.adamw.eps = r.real("optim.eps", c.adamw.eps);
  c.adamw.weight_decay = r.real("optim.weight_decay", c.adamw.weight_decay);
  c.restart_lr_at_knots = r.boolean("optim.restart_lr_at_knots", false);
  c.init_std = r.real("lora.init_std", c.init_std);
  if (!(c.init_std > 0.0)) throw ConfigError("config key 'lora.init_std' must be positive");

  c.seeds.clear();
  for (long s : r.integers("seeds", {1, 2, 3, 4, 5})) {
    if (s < 0) throw ConfigError("config key 'seeds': seeds must be nonnegative");
    c.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  if (c.seeds.empty()) throw ConfigError("config key 'seeds': empty list");
  c.output_dir = r.str("output_dir", c.output_dir);
  c.jobs = static_cast<int>(r.integer("jobs", 1));
  if (c.jobs < 1) throw ConfigError("config key 'jobs' must be >= 1");
  return c;
}

namespace detail {

inline std::string fmt_real(double x) {
  std::ostringstream s;
  s.precision(17);
  s << x;
  return s.str();
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s << ",";
    if constexpr (std::is_floating_point_v<T>) s << fmt_real(v[i]);
    else s << v[i];
  }
  return s.str();
}

}  // namespace detail

/// Canonical key/value form; parse_experiment_config(to_config_map(c)) == c.
inline ConfigMap to_config_map(const ExperimentConfig& c) {
  using detail::fmt_real;
  ConfigMap m;
  m["task.kind"] = to_string(c.task.kind);
  m["task.d"] = std::to_string(c.task.d);
  m["task.k"] = std::to_string(c.task.k);
  m["task.hidden"] = std::to_string(c.task.hidden);
  m["task.classes"] = std::to_string(c.task.classes);
  m["task.target_delta_rank"] = std::to_string(c.task.target_delta_rank);
  m["task.delta_scale"] = fmt_real(c.task.delta_scale);
  m["task.noise_std"] = fmt_real(c.task.noise_std);
  m["task.n_train"] = std::to_string(c.task.n_train);
  m["task.n_eval"] = std::to_string(c.task.n_eval);
  m["task.n_test"] = std::to_string(c.task.n_test);
  m["task.observed_fraction"] = fmt_real(c.task.observed_fraction);
  m["task.eval_fraction"] = fmt_real(c.task.eval_fraction);
  m["task.test_fraction"] = fmt_real(c.task.test_fraction);
  m["task.seed"] = std::to_string(c.task.seed);
  std::vector<std::string> methods;
  for (Method x : c.methods) methods.push_back(to_string(x));
  m["methods"] = detail::join(methods);
  m["schedule.total_epochs"] = std::to_string(c.schedule.total_epochs);
  m["schedule.knots"] = detail::join(c.schedule.knots);
  m["schedule.knot_unit"] = c.schedule.unit == KnotUnit::epoch ? "epoch" : "step";
  m["schedule.ranks"] = detail::join(c.schedule.rank_per_segment);
  m["schedule.alpha"] = fmt_real(c.schedule.alpha);
  m["optim.lr_grid"] = detail::join(c.lr_grid);
  m["optim.batch_sizes"] = detail::join(c.batch_sizes);
  m["optim.beta1"] = fmt_real(c.adamw.beta1);
  m["optim.beta2"] = fmt_real(c.adamw.beta2);
  m["optim.eps"] = fmt_real(c.adamw.eps);
  m["optim.weight_decay"] = fmt_real(c.adamw.weight_decay);
  m["optim.restart_lr_at_knots"] = c.restart_lr_at_knots ? "true" : "false";
  m["lora.init_std"] = fmt_real(c.init_std);
  m["seeds"] = detail::join(c.seeds);
  m["output_dir"] = c.output_dir;
  m["jobs"] = std::to_string(c.jobs);
  return m;
}

// ---------------------------------------------------------------------------
// Frank-Wolfe demo configuration

enum class FwObjectiveKind { quadratic, matrix_completion };

struct FwDemoConfig {
  FwObjectiveKind objective = FwObjectiveKind::quadratic;
  std::size_t d = 20;
  std::size_t k = 20;
  double radius = 10.0;
  /// quadratic: ||target||_* as a fraction of the radius (< 1 keeps it interior)
  double target_nuclear_fraction = 0.5;
  std::size_t target_rank = 5;
  double observed_fraction = 0.5;  // matrix completion
  std::size_t batch = 0;           // stochastic gradient sample size, 0 = exact
  double noise_std = 0.0;          // quadratic gradient noise
  long horizon = 10000;
  StepMode step_mode = StepMode::theorem;
  std::vector<double> steps;
  double oracle_tol = 1e-10;
  int oracle_max_iter = 5000;
  double oracle_eps = 0.0;
  long feasibility_check_every = 0;
  std::uint64_t seed = 0;
  std::string output_dir = "fw_results";
};

inline const std::set<std::string>& fw_keys() {
  static const std::set<std::string> keys{
      "fw.objective", "fw.d", "fw.k", "fw.radius", "fw.target_nuclear_fraction", "fw.target_rank",
      "fw.observed_fraction", "fw.batch", "fw.noise_std", "fw.horizon", "fw.step_mode", "fw.steps",
      "fw.oracle_tol", "fw.oracle_max_iter", "fw.oracle_eps", "fw.feasibility_check_every",
      "fw.seed", "output_dir"};
  return keys;
}

inline FwDemoConfig parse_fw_config(const ConfigMap& map) {
  ConfigReader r(map, fw_keys());
  FwDemoConfig c;
  const std::string obj = r.str("fw.objective", "quadratic");
  if (obj == "quadratic") c.objective = FwObjectiveKind::quadratic;
  else if (obj == "matrix_completion") c.objective = FwObjectiveKind::matrix_completion;
  else throw ConfigError("config key 'fw.objective': unknown objective '" + obj + "'");
  c.d = r.count("fw.d", c.d);
  c.k = r.count("fw.k", c.k);
  if (c.d == 0 || c.k == 0) throw ConfigError("config keys 'fw.d'/'fw.k' must be positive");
  c.radius = r.real("fw.radius", c.radius);
  if (!(c.radius > 0.0)) throw ConfigError("config key 'fw.radius' must be positive");
  c.target_nuclear_fraction = r.real("fw.target_nuclear_fraction", c.target_nuclear_fraction);
  c.target_rank = r.count("fw.target_rank", c.target_rank);
  if (c.target_rank == 0 || c.target_rank > std::min(c.d, c.k)) {
    throw ConfigError("config key 'fw.target_rank' must lie in [1, min(d, k)]");
  }
  c.observed_fraction = r.real("fw.observed_fraction", c.observed_fraction);
  c.batch = r.count("fw.batch", c.batch);
  c.noise_std = r.real("fw.noise_std", c.noise_std);
  c.horizon = r.integer("fw.horizon", c.horizon);
  if (c.horizon < 1) throw ConfigError("config key 'fw.horizon' must be >= 1");
  const std::string mode = r.str("fw.step_mode", "theorem");
  if (mode == "theorem") c.step_mode = StepMode::theorem;
  else if (mode == "custom") c.step_mode = StepMode::custom;
  else throw ConfigError("config key 'fw.step_mode': expected theorem or custom");
  c.steps = r.reals("fw.steps", {});
  if (c.step_mode == StepMode::custom && c.steps.empty()) {
    throw ConfigError("config key 'fw.steps' is required in custom step mode");
  }
  c.oracle_tol = r.real("fw.oracle_tol", c.oracle_tol);
  c.oracle_max_iter = static_cast<int>(r.integer("fw.oracle_max_iter", c.oracle_max_iter));
  c.oracle_eps = r.real("fw.oracle_eps", c.oracle_eps);
  c.feasibility_check_every = r.integer("fw.feasibility_check_every", 0);
  c.seed = static_cast<std::uint64_t>(r.integer("fw.seed", 0));
  c.output_dir = r.str("output_dir", c.output_dir);
  return c;
}

}  // namespace cola
