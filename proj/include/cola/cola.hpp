// Chain of LoRA training driver.
//
// Training runs in segments. Each segment tunes a fresh set of adapters on
// top of the current frozen weights; at a knot the adapters are merged into
// the frozen weights ("tie"), new zero-delta adapters are created and the
// optimizer state is cleared ("extend"). With no knots the run is plain LoRA.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cola/linalg.hpp"
#include "cola/lora.hpp"
#include "cola/model.hpp"
#include "cola/optim.hpp"

namespace cola {

enum class KnotUnit { epoch, step };

struct ColaSchedule {
  int total_epochs = 1;
  /// Boundaries after which a knot fires, in `unit`s: knot 3 with epoch units
  /// ties after epoch 3 completes, so segment 2 starts at epoch 4.
  std::vector<long> knots;
  std::vector<std::size_t> rank_per_segment{8};
  double alpha = 16.0;
  KnotUnit unit = KnotUnit::epoch;

  std::size_t chain_length() const { return knots.size() + 1; }

  /// Throws std::invalid_argument naming the violated rule.
  void validate(long steps_per_epoch = 1) const {
    if (total_epochs < 1) throw std::invalid_argument("schedule: total_epochs must be >= 1");
    if (rank_per_segment.size() != knots.size() + 1) {
      throw std::invalid_argument("schedule: " + std::to_string(knots.size()) + " knots need " +
                                  std::to_string(knots.size() + 1) + " segment ranks, got " +
                                  std::to_string(rank_per_segment.size()));
    }
    for (std::size_t r : rank_per_segment) {
      if (r == 0) throw std::invalid_argument("schedule: segment ranks must be positive");
    }
    if (!(alpha > 0.0)) throw std::invalid_argument("schedule: alpha must be positive");
    const long last = unit == KnotUnit::epoch ? total_epochs - 1
                                              : static_cast<long>(total_epochs) * steps_per_epoch - 1;
    for (std::size_t i = 0; i < knots.size(); ++i) {
      if (knots[i] < 1 || knots[i] > last) {
        throw std::invalid_argument("schedule: knot " + std::to_string(knots[i]) +
                                    " outside [1, " + std::to_string(last) + "]");
      }
      if (i > 0 && knots[i] <= knots[i - 1]) {
        throw std::invalid_argument("schedule: knots must be strictly increasing");
      }
    }
  }

  /// e.g. "cola(8,6)@[3]" or "lora(8)".
  std::string descriptor() const {
    std::ostringstream s;
    s << (knots.empty() ? "lora(" : "cola(");
    for (std::size_t i = 0; i < rank_per_segment.size(); ++i) s << (i ? "," : "") << rank_per_segment[i];
    s << ")";
    if (!knots.empty()) {
      s << "@[";
      for (std::size_t i = 0; i < knots.size(); ++i) s << (i ? " " : "") << knots[i];
      s << "]" << (unit == KnotUnit::step ? "s" : "");
    }
    return s.str();
  }
};

/// Epoch knots splitting `total_epochs` into `chain_length` near-equal segments.
inline std::vector<long> even_knots(int total_epochs, std::size_t chain_length) {
  if (chain_length == 0 || chain_length > static_cast<std::size_t>(total_epochs)) {
    throw std::invalid_argument("even_knots: chain length " + std::to_string(chain_length) +
                                " does not fit in " + std::to_string(total_epochs) + " epochs");
  }
  std::vector<long> k;
  for (std::size_t i = 1; i < chain_length; ++i) {
    k.push_back(std::lround(static_cast<double>(i) * total_epochs / static_cast<double>(chain_length)));
  }
  return k;
}

struct TrainConfig {
  AdamWHyper adamw;
  double lr0 = 1e-3;
  std::size_t batch_size = 8;
  /// Restart the linear decay at every knot instead of decaying over the whole run.
  bool restart_lr_at_knots = false;
  double init_std = kDefaultInitStd;
  /// Keep each merged delta in the knot events.
  bool record_deltas = false;
};

struct Dataset {
  Batch train;
  Batch eval;
};

struct StepRecord {
  long global_step = 0;  // 1-based
  int epoch = 0;         // 1-based
  std::size_t segment = 0;
  double lr = 0.0;
  double train_loss = 0.0;
};

struct KnotEvent {
  long global_step = 0;  // steps completed when the knot fired
  int epoch = 0;         // epochs completed (partial epochs for step knots)
  std::size_t new_segment = 0;
  double merged_delta_frobenius = 0.0;
  double eval_before = 0.0;
  double eval_after = 0.0;
  bool optimizer_cleared = false;
  std::vector<DenseMatrix> merged_deltas;  // per adapted layer, if recorded
};

struct RunTrace {
  std::vector<StepRecord> steps;
  std::vector<double> eval_per_epoch;
  std::vector<KnotEvent> knot_events;
  double flops_total = 0.0;

  double final_eval() const { return eval_per_epoch.empty() ? NAN : eval_per_epoch.back(); }
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, RunTrace partial)
      : std::runtime_error(what), trace_(std::move(partial)) {}
  const RunTrace& trace() const { return trace_; }

 private:
  RunTrace trace_;
};

// ---------------------------------------------------------------------------
// Adapter plumbing

/// Attaches fresh adapters to `layers` (all layers when empty).
inline void attach_adapters(LoraLinearModel& m, SeededRng& rng, std::size_t rank, double alpha,
                            double init_std = kDefaultInitStd,
                            const std::vector<std::size_t>& layers = {}) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (!layers.empty() && std::find(layers.begin(), layers.end(), i) == layers.end()) continue;
    Layer& l = m.layers[i];
    l.adapter = init_adapter(rng, l.out_dim(), l.in_dim(), rank, alpha, init_std);
  }
}

inline std::vector<DenseMatrix*> adapter_params(LoraLinearModel& m) {
  std::vector<DenseMatrix*> out;
  for (Layer& l : m.layers) {
    if (l.adapter) {
      out.push_back(&l.adapter->a);
      out.push_back(&l.adapter->b);
    }
  }
  return out;
}

inline std::vector<ParamSlot> adapter_slots(LoraLinearModel& m, const GradSet& g) {
  std::vector<ParamSlot> out;
  for (const AdapterGrad& ag : g.per_layer) {
    LoraAdapter& ad = *m.layers.at(ag.layer).adapter;
    const std::string tag = "layer " + std::to_string(ag.layer);
    out.push_back({&ad.a, &ag.grad_a, tag + " A"});
    out.push_back({&ad.b, &ag.grad_b, tag + " B"});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Knots

/// Folds every adapter into its frozen weight and zeroes B, leaving the
/// adapter as a zero-delta shell. Predictions are unchanged up to rounding.
inline LoraLinearModel tie_knot(LoraLinearModel m) {
  for (Layer& l : m.layers) {
    if (!l.adapter) continue;
    l.frozen = merge_into(l.frozen, *l.adapter);
    std::fill(l.adapter->b.data().begin(), l.adapter->b.data().end(), 0.0);
  }
  return m;
}

/// Fresh adapters of `new_rank` on every adapted layer, and an optimizer
/// re-bound to them with zero state. Requires tie_knot to have run first.
inline LoraLinearModel extend_chain(LoraLinearModel m, SeededRng& rng, std::size_t new_rank,
                                    AdamW& optimizer, double init_std = kDefaultInitStd) {
  for (Layer& l : m.layers) {
    if (!l.adapter) continue;
    if (!l.adapter->b.is_zero()) {
      throw std::logic_error("extend_chain: adapter still carries a delta; tie_knot first");
    }
    l.adapter = reinit(*l.adapter, rng, new_rank, init_std);
  }
  optimizer.reset(adapter_params(m));
  return m;
}

// ---------------------------------------------------------------------------
// FLOPs ledger

struct LayerShape {
  std::size_t d = 0;
  std::size_t k = 0;
  bool adapted = true;
};

inline std::vector<LayerShape> layer_shapes(const LoraLinearModel& m) {
  std::vector<LayerShape> out;
  for (const Layer& l : m.layers) out.push_back({l.out_dim(), l.in_dim(), l.adapter.has_value()});
  return out;
}

struct FlopsReport {
  double total = 0.0;
  double saved_vs_fixed_rank = 0.0;
};

namespace detail {

inline long steps_per_epoch(std::size_t dataset_size, std::size_t batch_size) {
  return static_cast<long>((dataset_size + batch_size - 1) / batch_size);
}

/// Samples processed in each segment of the schedule.
inline std::vector<double> segment_samples(const ColaSchedule& s, std::size_t n, std::size_t bs) {
  std::vector<double> out(s.chain_length(), 0.0);
  const long spe = steps_per_epoch(n, bs);
  std::size_t seg = 0;
  long step = 0;
  for (int e = 1; e <= s.total_epochs; ++e) {
    for (long j = 0; j < spe; ++j) {
      ++step;
      const std::size_t begin = static_cast<std::size_t>(j) * bs;
      out[seg] += static_cast<double>(std::min(bs, n - begin));
      if (s.unit == KnotUnit::step && seg < s.knots.size() && step == s.knots[seg]) ++seg;
    }
    if (s.unit == KnotUnit::epoch && seg < s.knots.size() && e == s.knots[seg]) ++seg;
  }
  return out;
}

/// Forward multiply-adds counted as 2 FLOPs; backward costs twice the forward.
inline double flops_for(const std::vector<double>& samples, const std::vector<std::size_t>& ranks,
                        const std::vector<LayerShape>& dims) {
  double total = 0.0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    double per_sample = 0.0;
    for (const LayerShape& l : dims) {
      per_sample += 2.0 * static_cast<double>(l.d * l.k);
      if (l.adapted) per_sample += 2.0 * static_cast<double>(ranks[s] * (l.d + l.k));
    }
    total += 3.0 * per_sample * samples[s];
  }
  return total;
}

}  // namespace detail

/// Analytic training cost of a schedule and the saving against running the
/// whole schedule at the first segment's rank.
inline FlopsReport training_flops(const ColaSchedule& schedule, const std::vector<LayerShape>& dims,
                                  std::size_t dataset_size, std::size_t batch_size) {
  if (batch_size == 0 || dataset_size == 0) {
    throw std::invalid_argument("training_flops: dataset and batch sizes must be positive");
  }
  schedule.validate(detail::steps_per_epoch(dataset_size, batch_size));
  const auto samples = detail::segment_samples(schedule, dataset_size, batch_size);
  FlopsReport r;
  r.total = detail::flops_for(samples, schedule.rank_per_segment, dims);
  const std::vector<std::size_t> fixed(samples.size(), schedule.rank_per_segment.front());
  r.saved_vs_fixed_rank = detail::flops_for(samples, fixed, dims) - r.total;
  return r;
}

/// (ours - baseline) / baseline * 100, rounded to two decimals.
inline double relative_gain(double baseline, double ours) {
  if (!(baseline > 0.0)) throw std::invalid_argument("relative_gain: baseline must be positive");
  return std::round((ours - baseline) / baseline * 100.0 * 100.0) / 100.0;
}

// ---------------------------------------------------------------------------
// Training

struct ColaRun {
  RunTrace trace;
  LoraLinearModel model;
};

namespace detail {

inline bool optimizer_is_clear(const AdamW& opt) {
  if (opt.step_count() != 0) return false;
  for (const auto& m : opt.first_moments()) if (!m.is_zero()) return false;
  for (const auto& v : opt.second_moments()) if (!v.is_zero()) return false;
  return true;
}

inline double delta_frobenius(const LoraLinearModel& m, std::vector<DenseMatrix>* keep) {
  double s = 0.0;
  for (const Layer& l : m.layers) {
    if (!l.adapter) continue;
    DenseMatrix d = effective_delta(*l.adapter);
    const double f = frobenius_norm(d);
    s += f * f;
    if (keep) keep->push_back(std::move(d));
  }
  return std::sqrt(s);
}

}  // namespace detail

/// Runs the full chained schedule. `model` must already carry adapters of
/// rank `schedule.rank_per_segment[0]` on the layers to be tuned. The last
/// segment's adapters are left unmerged; use merged() for deployment.
inline ColaRun run_cola(LoraLinearModel model, const Dataset& data, const ColaSchedule& schedule,
                        const TrainConfig& cfg, SeededRng& rng) {
  model.validate();
  if (data.train.size() == 0) throw std::invalid_argument("run_cola: empty training set");
  if (cfg.batch_size == 0) throw std::invalid_argument("run_cola: batch size must be positive");
  const long spe = detail::steps_per_epoch(data.train.size(), cfg.batch_size);
  schedule.validate(spe);
  for (const Layer& l : model.layers) {
    if (l.adapter && l.adapter->rank != schedule.rank_per_segment.front()) {
      throw std::invalid_argument("run_cola: adapters have rank " + std::to_string(l.adapter->rank) +
                                  " but the first segment expects " +
                                  std::to_string(schedule.rank_per_segment.front()));
    }
  }

  // Segment boundaries in global steps, for the restarting LR mode.
  const long total_steps = spe * schedule.total_epochs;
  std::vector<long> seg_start{0};
  for (long k : schedule.knots) seg_start.push_back(schedule.unit == KnotUnit::epoch ? k * spe : k);
  seg_start.push_back(total_steps);

  ColaRun run;
  RunTrace& trace = run.trace;
  AdamW opt(cfg.adamw);
  std::size_t segment = 0;
  long step = 0;

  auto knot = [&](int epoch) {
    KnotEvent ev;
    ev.global_step = step;
    ev.epoch = epoch;
    ev.eval_before = loss(model, data.eval);
    ev.merged_delta_frobenius =
        detail::delta_frobenius(model, cfg.record_deltas ? &ev.merged_deltas : nullptr);
    ++segment;
    model = tie_knot(std::move(model));
    model = extend_chain(std::move(model), rng, schedule.rank_per_segment[segment], opt, cfg.init_std);
    ev.new_segment = segment;
    ev.optimizer_cleared = detail::optimizer_is_clear(opt);
    ev.eval_after = loss(model, data.eval);
    trace.knot_events.push_back(std::move(ev));
  };

  std::vector<std::size_t> order(data.train.size());
  for (int epoch = 1; epoch <= schedule.total_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (long j = 0; j < spe; ++j) {
      const std::size_t begin = static_cast<std::size_t>(j) * cfg.batch_size;
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const Batch batch =
          gather(data.train, std::span<const std::size_t>(order.data() + begin, end - begin));

      double lr;
      if (cfg.restart_lr_at_knots) {
        lr = lr_at({cfg.lr0, seg_start[segment + 1] - seg_start[segment]}, step - seg_start[segment]);
      } else {
        lr = lr_at({cfg.lr0, total_steps}, step);
      }
      LossAndGrads lg = backward(model, batch);
      ++step;
      trace.steps.push_back({step, epoch, segment, lr, lg.loss});
      if (!std::isfinite(lg.loss)) {
        throw DivergenceError("run_cola: non-finite training loss at step " + std::to_string(step),
                              std::move(trace));
      }
      const auto slots = adapter_slots(model, lg.grads);
      opt.step(slots, lr);

      if (schedule.unit == KnotUnit::step && segment < schedule.knots.size() &&
          step == schedule.knots[segment]) {
        knot(epoch - 1);
      }
    }
    const double ev = loss(model, data.eval);
    trace.eval_per_epoch.push_back(ev);
    if (!std::isfinite(ev)) {
      throw DivergenceError("run_cola: non-finite eval loss after epoch " + std::to_string(epoch),
                            std::move(trace));
    }
    if (schedule.unit == KnotUnit::epoch && segment < schedule.knots.size() &&
        epoch == schedule.knots[segment]) {
      knot(epoch);
    }
  }

  trace.flops_total =
      training_flops(schedule, layer_shapes(model), data.train.size(), cfg.batch_size).total;
  run.model = std::move(model);
  return run;
}

/// Plain LoRA: one adapter set, no knots.
inline ColaRun run_lora(LoraLinearModel model, const Dataset& data, int epochs, std::size_t rank,
                        double alpha, const TrainConfig& cfg, SeededRng& rng) {
  ColaSchedule s;
  s.total_epochs = epochs;
  s.rank_per_segment = {rank};
  s.alpha = alpha;
  return run_cola(std::move(model), data, s, cfg, rng);
}

}  // namespace cola
