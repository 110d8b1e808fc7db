// Stochastic nonconvex Frank-Wolfe over the trace-norm ball
//   K = { W : ||W||_* <= radius },
// with a rank-one linear minimization oracle, Frank-Wolfe gap tracking and a
// check of the averaged-gap guarantee
//   (1/T) sum_t g_t <= 2 sqrt(M beta) D / sqrt(T) + eps.
//
// Gap convention: g_t = max_{V in K} <grad L(W_t), W_t - V>
//                     = <grad, W_t> + radius * sigma_1(grad),
// which is nonnegative on K and zero exactly at first-order stationary points.
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <iostream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cola/linalg.hpp"

namespace cola {

struct TraceNormBall {
  double radius = 1.0;
  std::size_t rows = 1;
  std::size_t cols = 1;

  /// Frobenius diameter; ||X - Y||_F <= ||X||_* + ||Y||_* <= 2 radius.
  double diameter() const { return 2.0 * radius; }

  bool contains(const DenseMatrix& w, double rel_slack = 1e-8) const {
    return nuclear_norm(w) <= radius * (1.0 + rel_slack);
  }
};

struct OracleSettings {
  double tol = 1e-10;
  int max_iter = 5000;
};

/// V = -radius u1 v1^T stored as a factor. `moves` is false for a zero
/// gradient, in which case the caller keeps the current iterate.
struct LmoResult {
  bool moves = false;
  double scale = 0.0;  // V = scale * u v^T, scale = -radius
  std::vector<double> u;
  std::vector<double> v;
  double sigma = 0.0;
  /// <V, grad> = -radius * u^T grad v.
  double value = 0.0;
  double residual = 0.0;
  /// radius * residual: certified slack on <V, grad> versus the exact minimum.
  double certified_eps = 0.0;
  bool converged = true;

  DenseMatrix dense() const {
    if (!moves) throw std::logic_error("LmoResult::dense: no-move result has no vertex");
    return outer(u, v, scale);
  }
};

/// Rank-one linear minimization over the ball. A power iteration that runs
/// out of iterations is accepted and its residual folded into certified_eps.
inline LmoResult lmo(const TraceNormBall& ball, const DenseMatrix& grad,
                     OracleSettings oracle = {}, std::span<const double> warm_start = {}) {
  if (grad.rows() != ball.rows || grad.cols() != ball.cols) {
    throw ShapeError("lmo: gradient " + grad.shape_string() + " vs ball " +
                     std::to_string(ball.rows) + "x" + std::to_string(ball.cols));
  }
  if (!grad.all_finite()) throw std::invalid_argument("lmo: non-finite gradient");
  LmoResult r;
  if (grad.is_zero()) return r;

  SingularTriple st;
  try {
    st = top_singular_pair(grad, oracle.tol, oracle.max_iter, warm_start);
  } catch (const ConvergenceError& e) {
    st = e.last();
    r.converged = false;
  }
  r.moves = true;
  r.scale = -ball.radius;
  r.sigma = st.sigma;
  r.u = std::move(st.u);
  r.v = std::move(st.v);
  r.value = -ball.radius * st.sigma;  // u^T grad v == sigma since grad v = sigma u
  r.residual = st.residual;
  r.certified_eps = ball.radius * st.residual;
  return r;
}

class InfeasibleIterate : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// <grad, w> + radius * sigma_1(grad). Throws InfeasibleIterate when w lies
/// outside the ball beyond a 1e-8 relative trace-norm slack.
inline double fw_gap(const TraceNormBall& ball, const DenseMatrix& w, const DenseMatrix& grad,
                     OracleSettings oracle = {}) {
  detail::require_same_shape(w, grad, "fw_gap");
  const double nn = nuclear_norm(w);
  if (nn > ball.radius * (1.0 + 1e-8)) {
    throw InfeasibleIterate("fw_gap: ||w||_* = " + std::to_string(nn) + " exceeds radius " +
                            std::to_string(ball.radius));
  }
  const LmoResult v = lmo(ball, grad, oracle);
  return dot(grad, w) + ball.radius * v.sigma;
}

// ---------------------------------------------------------------------------
// Objectives

/// Exact loss and gradient, plus a stochastic gradient used by the oracle.
template <typename O>
concept FwObjective = requires(const O& o, const DenseMatrix& w, SeededRng& rng) {
  { o.loss(w) } -> std::convertible_to<double>;
  { o.gradient(w) } -> std::convertible_to<DenseMatrix>;
  { o.stochastic_gradient(w, rng) } -> std::convertible_to<DenseMatrix>;
  { o.is_stochastic() } -> std::convertible_to<bool>;
};

/// 1/2 ||W - target||_F^2, optionally with N(0, noise_std^2) gradient noise.
/// beta = 1.
struct QuadraticObjective {
  DenseMatrix target;
  double noise_std = 0.0;

  double loss(const DenseMatrix& w) const {
    const double f = frobenius_norm(add_scaled(w, target, -1.0));
    return 0.5 * f * f;
  }
  DenseMatrix gradient(const DenseMatrix& w) const { return add_scaled(w, target, -1.0); }
  DenseMatrix stochastic_gradient(const DenseMatrix& w, SeededRng& rng) const {
    DenseMatrix g = gradient(w);
    if (noise_std > 0.0) add_scaled_inplace(g, gaussian(rng, g.rows(), g.cols(), noise_std), 1.0);
    return g;
  }
  bool is_stochastic() const { return noise_std > 0.0; }

  double smoothness() const { return 1.0; }

  /// max over the ball of the loss. The loss is convex, so the maximum sits
  /// on a rank-one extreme point radius * x y^T, where it equals
  /// 1/2 (radius^2 - 2 radius x^T target y + ||target||^2); the inner
  /// product is minimized at -sigma_1(target).
  double value_bound(const TraceNormBall& ball) const {
    const double s1 = target.is_zero() ? 0.0 : top_singular_pair(target, 1e-12, 100000).sigma;
    const double f = frobenius_norm(target);
    return 0.5 * (ball.radius * ball.radius + 2.0 * ball.radius * s1 + f * f);
  }
};

/// <C, W>. Smooth with beta = 0; the loss ranges over [-radius sigma_1(C), radius sigma_1(C)].
struct LinearObjective {
  DenseMatrix cost;

  double loss(const DenseMatrix& w) const { return dot(cost, w); }
  DenseMatrix gradient(const DenseMatrix&) const { return cost; }
  DenseMatrix stochastic_gradient(const DenseMatrix& w, SeededRng&) const { return gradient(w); }
  bool is_stochastic() const { return false; }
};

/// 1/2 mean over observed entries of (W_ij - M_ij)^2. Stochastic gradients
/// sample `batch` entries with replacement.
struct MatrixCompletionObjective {
  DenseMatrix observed_values;  // M, read only where the mask is set
  std::vector<std::pair<std::size_t, std::size_t>> entries;
  std::size_t batch = 0;  // 0: full gradient

  double loss(const DenseMatrix& w) const {
    double s = 0.0;
    for (auto [i, j] : entries) {
      const double r = w(i, j) - observed_values(i, j);
      s += r * r;
    }
    return 0.5 * s / static_cast<double>(entries.size());
  }
  DenseMatrix gradient(const DenseMatrix& w) const {
    DenseMatrix g(w.rows(), w.cols());
    const double inv = 1.0 / static_cast<double>(entries.size());
    for (auto [i, j] : entries) g(i, j) = (w(i, j) - observed_values(i, j)) * inv;
    return g;
  }
  DenseMatrix stochastic_gradient(const DenseMatrix& w, SeededRng& rng) const {
    if (batch == 0) return gradient(w);
    DenseMatrix g(w.rows(), w.cols());
    const double inv = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      auto [i, j] = entries[rng.below(entries.size())];
      g(i, j) += (w(i, j) - observed_values(i, j)) * inv;
    }
    return g;
  }
  bool is_stochastic() const { return batch != 0; }

  double smoothness() const { return 1.0 / static_cast<double>(entries.size()); }

  /// Upper bound on the loss over the ball: (a - b)^2 <= 2a^2 + 2b^2 and
  /// sum_ij W_ij^2 <= ||W||_*^2.
  double value_bound(const TraceNormBall& ball) const {
    double s = 0.0;
    for (auto [i, j] : entries) s += observed_values(i, j) * observed_values(i, j);
    return (ball.radius * ball.radius + s) / static_cast<double>(entries.size());
  }
};

// ---------------------------------------------------------------------------
// Runs

enum class StepMode { theorem, custom };

struct FwConfig {
  long horizon = 1000;           // T
  double beta = 1.0;             // smoothness
  double value_bound = 1.0;      // M
  double oracle_eps = 0.0;       // declared oracle slack, added to certified slack
  StepMode step_mode = StepMode::theorem;
  std::vector<double> custom_steps;  // used cyclically in custom mode
  OracleSettings oracle;
  /// Also compute the true nuclear norm of W_t every this many steps (0: never).
  long feasibility_check_every = 0;
};

/// sqrt(M) / (D sqrt(beta T)), clamped into (0, 1].
inline double theorem_step(const FwConfig& cfg, double diameter, bool* clamped = nullptr) {
  const double eta = std::sqrt(cfg.value_bound) /
                     (diameter * std::sqrt(cfg.beta * static_cast<double>(cfg.horizon)));
  if (clamped) *clamped = eta > 1.0;
  return std::clamp(eta, std::numeric_limits<double>::min(), 1.0);
}

struct FwStep {
  long t = 0;  // 1-based
  double loss = 0.0;       // L(W_t)
  double next_loss = 0.0;  // L(W_{t+1})
  double gap = 0.0;        // g_t with the exact gradient
  double eta = 0.0;
  double oracle_residual = 0.0;
  double certified_eps = 0.0;
  std::size_t factors = 0;     // rank-one terms in W_{t+1} (beyond W_1)
  double nuclear_bound = 0.0;  // sum of |coefficients| bound on ||W_{t+1}||_*
  double nuclear_norm = -1.0;  // exact ||W_{t+1}||_*, when checked
};

/// Rank-one term c * u v^T of an iterate.
struct RankOneTerm {
  double coeff = 0.0;
  std::vector<double> u;
  std::vector<double> v;
};

struct FwTrace {
  std::vector<FwStep> steps;
  TraceNormBall ball;
  double beta = 0.0;
  double value_bound = 0.0;
  double eps = 0.0;  // declared + max certified
  bool step_clamped = false;

  DenseMatrix initial;              // W_1
  double initial_coeff = 1.0;       // weight of W_1 in the final iterate
  std::vector<RankOneTerm> terms;   // the rest of the final iterate
  DenseMatrix final_iterate;        // dense W_{T+1}

  double average_gap() const {
    double s = 0.0;
    for (const auto& st : steps) s += st.gap;
    return steps.empty() ? 0.0 : s / static_cast<double>(steps.size());
  }

  double theorem_rhs() const {
    const double T = static_cast<double>(steps.size());
    return 2.0 * std::sqrt(value_bound * beta) * ball.diameter() / std::sqrt(T) + eps;
  }
};

/// Algorithm: for t = 1..T, V_t = lmo(stochastic grad at W_t),
/// W_{t+1} = W_t + eta_t (V_t - W_t). Gaps are measured with exact gradients.
template <FwObjective Objective>
FwTrace run_fw(const Objective& objective, const TraceNormBall& ball, const FwConfig& cfg,
               SeededRng& rng, std::optional<DenseMatrix> initial = std::nullopt) {
  if (cfg.horizon < 1) throw std::invalid_argument("run_fw: horizon must be >= 1");
  if (cfg.step_mode == StepMode::custom && cfg.custom_steps.empty()) {
    throw std::invalid_argument("run_fw: custom step mode needs at least one step size");
  }
  for (double s : cfg.custom_steps) {
    if (!(s > 0.0 && s <= 1.0)) throw std::invalid_argument("run_fw: step sizes must lie in (0, 1]");
  }
  DenseMatrix w = initial ? *initial : DenseMatrix(ball.rows, ball.cols);
  if (w.rows() != ball.rows || w.cols() != ball.cols) {
    throw ShapeError("run_fw: initial iterate " + w.shape_string() + " does not match the ball");
  }
  if (!ball.contains(w)) throw InfeasibleIterate("run_fw: initial iterate lies outside the ball");

  FwTrace tr;
  tr.ball = ball;
  tr.beta = cfg.beta;
  tr.value_bound = cfg.value_bound;
  tr.initial = w;
  const double initial_nuclear = initial ? nuclear_norm(w) : 0.0;

  bool clamped = false;
  const double theorem_eta = theorem_step(cfg, ball.diameter(), &clamped);
  if (cfg.step_mode == StepMode::theorem && clamped) {
    tr.step_clamped = true;
    std::clog << "warning: theorem step size exceeds 1 and is clamped to 1\n";
  }

  std::vector<double> warm;
  std::vector<double> warm_gap;
  double max_certified = 0.0;
  double loss_now = objective.loss(w);
  for (long t = 1; t <= cfg.horizon; ++t) {
    const DenseMatrix grad = objective.gradient(w);
    if (!grad.all_finite()) {
      throw std::runtime_error("run_fw: non-finite gradient at step " + std::to_string(t));
    }
    const DenseMatrix sgrad = objective.is_stochastic() ? objective.stochastic_gradient(w, rng) : grad;
    if (!sgrad.all_finite()) {
      throw std::runtime_error("run_fw: non-finite stochastic gradient at step " + std::to_string(t));
    }

    LmoResult v = lmo(ball, sgrad, cfg.oracle, warm);
    if (v.moves) warm = v.v;

    FwStep st;
    st.t = t;
    st.loss = loss_now;
    if (objective.is_stochastic()) {
      const LmoResult exact = lmo(ball, grad, cfg.oracle, warm_gap);
      if (exact.moves) warm_gap = exact.v;
      st.gap = dot(grad, w) + ball.radius * exact.sigma;
    } else {
      st.gap = dot(grad, w) + ball.radius * v.sigma;
    }
    st.eta = cfg.step_mode == StepMode::theorem
                 ? theorem_eta
                 : cfg.custom_steps[static_cast<std::size_t>(t - 1) % cfg.custom_steps.size()];
    st.oracle_residual = v.residual;
    st.certified_eps = v.certified_eps;
    max_certified = std::max(max_certified, v.certified_eps);

    // W <- (1 - eta) W + eta V; a no-move step keeps W.
    if (v.moves) {
      const double keep = 1.0 - st.eta;
      for (double& x : w.data()) x *= keep;
      for (std::size_t i = 0; i < w.rows(); ++i) {
        const double ui = st.eta * v.scale * v.u[i];
        auto row = w.row(i);
        for (std::size_t j = 0; j < w.cols(); ++j) row[j] += ui * v.v[j];
      }
      tr.initial_coeff *= keep;
      for (auto& term : tr.terms) term.coeff *= keep;
      tr.terms.push_back({st.eta * v.scale, std::move(v.u), std::move(v.v)});
    }

    double bound = std::abs(tr.initial_coeff) * initial_nuclear;
    for (const auto& term : tr.terms) bound += std::abs(term.coeff);
    st.factors = tr.terms.size();
    st.nuclear_bound = bound;
    if (cfg.feasibility_check_every > 0 && t % cfg.feasibility_check_every == 0) {
      st.nuclear_norm = nuclear_norm(w);
    }

    loss_now = objective.loss(w);
    st.next_loss = loss_now;
    if (!std::isfinite(loss_now)) {
      throw std::runtime_error("run_fw: non-finite loss after step " + std::to_string(t));
    }
    tr.steps.push_back(std::move(st));
  }
  tr.eps = cfg.oracle_eps + max_certified;
  tr.final_iterate = std::move(w);
  return tr;
}

struct BoundReport {
  double lhs = 0.0;  // (1/T) sum g_t
  double rhs = 0.0;  // 2 sqrt(M beta) D / sqrt(T) + eps
  bool pass = false;
};

inline BoundReport verify_theorem_bound(const FwTrace& trace) {
  BoundReport r;
  r.lhs = trace.average_gap();
  r.rhs = trace.theorem_rhs();
  r.pass = r.lhs <= r.rhs * (1.0 + 1e-6);
  return r;
}

/// Largest violation of the per-step smoothness inequality
///   L(W_{t+1}) <= L(W_t) - eta_t g_t + eta_t^2 beta D^2 / 2
/// over the trace (<= 0 means it holds everywhere).
inline double max_descent_violation(const FwTrace& trace) {
  const double d2 = trace.ball.diameter() * trace.ball.diameter();
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& s : trace.steps) {
    const double rhs = s.loss - s.eta * s.gap + 0.5 * s.eta * s.eta * trace.beta * d2;
    worst = std::max(worst, s.next_loss - rhs);
  }
  return worst;
}

}  // namespace cola
