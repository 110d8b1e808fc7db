// Fast invariant checks behind `cola_cli selftest`.
#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cola/cola.hpp"
#include "cola/frankwolfe.hpp"
#include "cola/model.hpp"
#include "cola/task.hpp"

namespace cola {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline LoraLinearModel random_model(SeededRng& rng, std::vector<std::size_t> dims,
                                    Activation hidden_act, LossKind kind, std::size_t rank) {
  LoraLinearModel m;
  m.loss_kind = kind;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    Layer l;
    l.frozen = gaussian(rng, dims[i + 1], dims[i], 0.5);
    l.activation = i + 2 < dims.size() ? hidden_act : Activation::identity;
    l.adapter = init_adapter(rng, dims[i + 1], dims[i], rank, 2.0 * static_cast<double>(rank), 0.3);
    l.adapter->b = gaussian(rng, dims[i + 1], rank, 0.3);
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline Batch random_batch(SeededRng& rng, const LoraLinearModel& m, std::size_t n) {
  Batch b;
  b.inputs = gaussian(rng, n, m.in_dim(), 1.0);
  if (m.loss_kind == LossKind::mse) {
    b.targets = gaussian(rng, n, m.out_dim(), 1.0);
  } else {
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(rng.below(m.out_dim()));
  }
  return b;
}

inline std::string fmt(double x) {
  std::ostringstream s;
  s.precision(3);
  s << x;
  return s.str();
}

}  // namespace detail

inline std::vector<CheckResult> run_selftest() {
  std::vector<CheckResult> out;
  SeededRng rng(20240101);

  {
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      LoraLinearModel m = detail::random_model(rng, {6, 5, 4}, Activation::tanh, LossKind::mse, 2);
      const DenseMatrix x = gaussian(rng, 3, 6, 1.0);
      const DenseMatrix a = forward(m, x);
      const DenseMatrix b = forward(merged(m), x);
      for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a.data()[j] - b.data()[j]));
    }
    out.push_back({"merge equivalence", worst <= 1e-10, "max abs diff " + detail::fmt(worst)});
  }

  {
    double worst = 0.0;
    for (LossKind kind : {LossKind::mse, LossKind::softmax_cross_entropy}) {
      LoraLinearModel m = detail::random_model(rng, {4, 3, 3}, Activation::tanh, kind, 2);
      const Batch b = detail::random_batch(rng, m, 5);
      const GradSet g = backward(m, b).grads;
      for (const AdapterGrad& ag : g.per_layer) {
        for (int which = 0; which < 2; ++which) {
          const DenseMatrix& analytic = which ? ag.grad_b : ag.grad_a;
          for (std::size_t e = 0; e < analytic.size(); ++e) {
            auto probe = [&](double h) {
              LoraLinearModel p = m;
              LoraAdapter& ad = *p.layers[ag.layer].adapter;
              (which ? ad.b : ad.a).data()[e] += h;
              return loss(p, b);
            };
            const double fd = (probe(1e-5) - probe(-1e-5)) / 2e-5;
            const double rel = std::abs(fd - analytic.data()[e]) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, rel);
          }
        }
      }
    }
    out.push_back({"adapter gradients vs finite differences", worst <= 1e-5, "max rel err " + detail::fmt(worst)});
  }

  {
    TaskSpec ts;
    ts.d = ts.k = 12;
    ts.target_delta_rank = 4;
    ts.n_train = 64;
    ts.n_eval = 32;
    ts.n_test = 32;
    const Task task = generate_task(ts);
    LoraLinearModel m = task.skeleton;
    attach_adapters(m, rng, 2, 4.0);
    const bool zero_start = loss(m, task.eval) == loss(task.skeleton, task.eval);
    out.push_back({"zero-start identity", zero_start, zero_start ? "bit-exact" : "losses differ"});

    ColaSchedule s;
    s.total_epochs = 3;
    s.knots = {1, 2};
    s.rank_per_segment = {2, 2, 1};
    s.alpha = 4.0;
    TrainConfig tc;
    tc.lr0 = 5e-3;
    tc.batch_size = 8;
    const ColaRun run = run_cola(m, Dataset{task.train, task.eval}, s, tc, rng);
    double worst = 0.0;
    bool cleared = true;
    for (const KnotEvent& e : run.trace.knot_events) {
      worst = std::max(worst, std::abs(e.eval_after - e.eval_before));
      cleared = cleared && e.optimizer_cleared;
    }
    out.push_back({"knot transparency", worst <= 1e-10 && cleared && run.trace.knot_events.size() == 2,
                   "max eval jump " + detail::fmt(worst)});
  }

  {
    const std::vector<LayerShape> dims{{64, 64, true}};
    auto saved = [&](std::size_t r2) {
      ColaSchedule s;
      s.total_epochs = 5;
      s.knots = {3};
      s.rank_per_segment = {8, r2};
      return training_flops(s, dims, 1000, 8).saved_vs_fixed_rank;
    };
    const double s6 = saved(6);
    const bool ok = saved(8) == 0.0 && saved(4) == 2.0 * s6 && saved(2) == 3.0 * s6;
    out.push_back({"flops step-down linearity", ok, "saved(8->6) = " + detail::fmt(s6)});
  }

  {
    const bool ok = relative_gain(56.53, 60.19) == 6.47 && relative_gain(93.16, 93.32) == 0.17;
    out.push_back({"relative gain", ok, ""});
  }

  {
    SeededRng r(7);
    const TraceNormBall ball{5.0, 8, 8};
    DenseMatrix target = matmul(gaussian(r, 8, 3, 1.0), gaussian(r, 3, 8, 1.0));
    target = scaled(target, 0.5 * ball.radius / nuclear_norm(target));
    QuadraticObjective obj{target, 0.0};
    FwConfig cfg;
    cfg.horizon = 500;
    cfg.beta = 1.0;
    cfg.value_bound = obj.value_bound(ball);
    const FwTrace tr = run_fw(obj, ball, cfg, r);
    const BoundReport rep = verify_theorem_bound(tr);
    out.push_back({"frank-wolfe averaged gap bound", rep.pass,
                   "lhs " + detail::fmt(rep.lhs) + " <= rhs " + detail::fmt(rep.rhs)});
  }
  return out;
}

}  // namespace cola
