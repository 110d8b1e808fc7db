// Synthetic tasks with a known optimal update.
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cola/linalg.hpp"
#include "cola/model.hpp"

namespace cola {

enum class TaskKind { teacher_student, matrix_completion, synthetic_classification };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::teacher_student: return "teacher_student";
    case TaskKind::matrix_completion: return "matrix_completion";
    case TaskKind::synthetic_classification: return "synthetic_classification";
  }
  return "?";
}

struct TaskSpec {
  TaskKind kind = TaskKind::teacher_student;
  std::size_t d = 64;       // output dim (matrix rows)
  std::size_t k = 64;       // input dim (matrix cols)
  std::size_t hidden = 64;  // classification hidden width
  std::size_t classes = 4;
  std::size_t target_delta_rank = 8;
  double delta_scale = 1.0;
  double noise_std = 0.0;
  std::size_t n_train = 1000;
  std::size_t n_eval = 500;
  std::size_t n_test = 1000;
  // matrix completion: fractions of the d*k entries in each disjoint mask
  double observed_fraction = 0.5;
  double eval_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct Task {
  TaskSpec spec;
  LoraLinearModel skeleton;  // frozen at the pretrained weights, no adapters
  Batch train;
  Batch eval;
  Batch test;
  std::vector<DenseMatrix> pretrained;  // per layer
  std::vector<DenseMatrix> delta_star;  // per layer, teacher minus pretrained
};

namespace detail {

/// delta_scale * P Q / sqrt(rank * k) with Gaussian factors: exact rank
/// `rank` with probability one, entries of variance delta_scale^2 / k.
inline DenseMatrix low_rank_delta(SeededRng& rng, std::size_t d, std::size_t k, std::size_t rank,
                                  double delta_scale) {
  const DenseMatrix p = gaussian(rng, d, rank, 1.0);
  const DenseMatrix q = gaussian(rng, rank, k, 1.0);
  return scaled(matmul(p, q), delta_scale / std::sqrt(static_cast<double>(rank * k)));
}

inline void check_rank_feasible(std::size_t rank, std::size_t d, std::size_t k) {
  if (rank == 0 || rank > std::min(d, k)) {
    throw std::invalid_argument("task: target_delta_rank " + std::to_string(rank) +
                                " infeasible for " + std::to_string(d) + "x" + std::to_string(k));
  }
}

inline Batch teacher_batch(SeededRng& rng, const LoraLinearModel& teacher, std::size_t n,
                           double noise_std) {
  Batch b;
  b.inputs = gaussian(rng, n, teacher.in_dim(), 1.0);
  b.targets = forward(teacher, b.inputs);
  if (noise_std > 0.0) {
    add_scaled_inplace(b.targets, gaussian(rng, n, teacher.out_dim(), noise_std), 1.0);
  }
  return b;
}

inline Batch classification_batch(SeededRng& rng, const LoraLinearModel& teacher, std::size_t n,
                                  double noise_std) {
  Batch b;
  b.inputs = gaussian(rng, n, teacher.in_dim(), 1.0);
  DenseMatrix logits = forward(teacher, b.inputs);
  if (noise_std > 0.0) add_scaled_inplace(logits, gaussian(rng, n, logits.cols(), noise_std), 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = logits.row(i);
    b.labels.push_back(static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin()));
  }
  return b;
}

}  // namespace detail

/// Builds the frozen student, the datasets and the ground-truth deltas.
/// Everything is a function of `spec` (including spec.seed).
inline Task generate_task(const TaskSpec& spec) {
  if (spec.d == 0 || spec.k == 0) throw std::invalid_argument("task: dimensions must be positive");
  SeededRng rng(spec.seed);
  Task t;
  t.spec = spec;
  switch (spec.kind) {
    case TaskKind::teacher_student: {
      detail::check_rank_feasible(spec.target_delta_rank, spec.d, spec.k);
      if (spec.n_train == 0 || spec.n_eval == 0 || spec.n_test == 0) {
        throw std::invalid_argument("task: split sizes must be positive");
      }
      DenseMatrix w0 = gaussian(rng, spec.d, spec.k, 1.0 / std::sqrt(static_cast<double>(spec.k)));
      DenseMatrix delta = detail::low_rank_delta(rng, spec.d, spec.k, spec.target_delta_rank, spec.delta_scale);
      t.skeleton.layers.push_back({w0, std::nullopt, Activation::identity});
      t.skeleton.loss_kind = LossKind::mse;
      LoraLinearModel teacher = t.skeleton;
      teacher.layers[0].frozen = add_scaled(w0, delta, 1.0);
      t.train = detail::teacher_batch(rng, teacher, spec.n_train, spec.noise_std);
      t.eval = detail::teacher_batch(rng, teacher, spec.n_eval, spec.noise_std);
      t.test = detail::teacher_batch(rng, teacher, spec.n_test, spec.noise_std);
      t.pretrained = {std::move(w0)};
      t.delta_star = {std::move(delta)};
      break;
    }
    case TaskKind::matrix_completion: {
      detail::check_rank_feasible(spec.target_delta_rank, spec.d, spec.k);
      const double total = spec.observed_fraction + spec.eval_fraction + spec.test_fraction;
      if (spec.observed_fraction <= 0.0 || spec.eval_fraction <= 0.0 || spec.test_fraction <= 0.0 ||
          total > 1.0) {
        throw std::invalid_argument("task: mask fractions must be positive and sum to at most 1");
      }
      DenseMatrix w0 = gaussian(rng, spec.d, spec.k, 1.0 / std::sqrt(static_cast<double>(spec.k)));
      DenseMatrix delta = detail::low_rank_delta(rng, spec.d, spec.k, spec.target_delta_rank, spec.delta_scale);
      const DenseMatrix full = add_scaled(w0, delta, 1.0);

      // Entry (i, j) of the matrix is output i of sample j (input e_j).
      const std::size_t cells = spec.d * spec.k;
      std::vector<std::size_t> perm(cells);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      rng.shuffle(perm);
      const auto n_obs = static_cast<std::size_t>(std::llround(spec.observed_fraction * cells));
      const auto n_ev = static_cast<std::size_t>(std::llround(spec.eval_fraction * cells));
      const auto n_te = static_cast<std::size_t>(std::llround(spec.test_fraction * cells));
      if (n_obs == 0 || n_ev == 0 || n_te == 0) throw std::invalid_argument("task: empty mask");

      Batch base;
      base.inputs = DenseMatrix::identity(spec.k);
      base.targets = transpose(full);  // k x d
      if (spec.noise_std > 0.0) {
        add_scaled_inplace(base.targets, gaussian(rng, spec.k, spec.d, spec.noise_std), 1.0);
      }
      auto masked = [&](std::size_t from, std::size_t count) {
        Batch b = base;
        b.mask = DenseMatrix(spec.k, spec.d);
        for (std::size_t c = from; c < from + count; ++c) {
          const std::size_t i = perm[c] / spec.k;
          const std::size_t j = perm[c] % spec.k;
          (*b.mask)(j, i) = 1.0;
        }
        return b;
      };
      t.train = masked(0, n_obs);
      t.eval = masked(n_obs, n_ev);
      t.test = masked(n_obs + n_ev, n_te);
      t.skeleton.layers.push_back({w0, std::nullopt, Activation::identity});
      t.skeleton.loss_kind = LossKind::mse;
      t.pretrained = {std::move(w0)};
      t.delta_star = {std::move(delta)};
      break;
    }
    case TaskKind::synthetic_classification: {
      if (spec.classes < 2) throw std::invalid_argument("task: need at least two classes");
      detail::check_rank_feasible(spec.target_delta_rank, spec.hidden, spec.k);
      const std::size_t r2 = std::min(spec.target_delta_rank, std::min(spec.classes, spec.hidden));
      DenseMatrix w1 = gaussian(rng, spec.hidden, spec.k, 1.0 / std::sqrt(static_cast<double>(spec.k)));
      DenseMatrix w2 = gaussian(rng, spec.classes, spec.hidden, 1.0 / std::sqrt(static_cast<double>(spec.hidden)));
      DenseMatrix d1 = detail::low_rank_delta(rng, spec.hidden, spec.k, spec.target_delta_rank, spec.delta_scale);
      DenseMatrix d2 = detail::low_rank_delta(rng, spec.classes, spec.hidden, r2, spec.delta_scale);
      t.skeleton.layers.push_back({w1, std::nullopt, Activation::tanh});
      t.skeleton.layers.push_back({w2, std::nullopt, Activation::identity});
      t.skeleton.loss_kind = LossKind::softmax_cross_entropy;
      LoraLinearModel teacher = t.skeleton;
      teacher.layers[0].frozen = add_scaled(w1, d1, 1.0);
      teacher.layers[1].frozen = add_scaled(w2, d2, 1.0);
      t.train = detail::classification_batch(rng, teacher, spec.n_train, spec.noise_std);
      t.eval = detail::classification_batch(rng, teacher, spec.n_eval, spec.noise_std);
      t.test = detail::classification_batch(rng, teacher, spec.n_test, spec.noise_std);
      t.pretrained = {std::move(w1), std::move(w2)};
      t.delta_star = {std::move(d1), std::move(d2)};
      break;
    }
  }
  return t;
}

/// Eckart-Young: the smallest achievable 1/2 ||delta* - X||_F^2 over rank-r X.
inline double rank_r_tail_energy(const DenseMatrix& delta_star, std::size_t r) {
  const auto sv = singular_values(delta_star);
  double s = 0.0;
  for (std::size_t i = r; i < sv.size(); ++i) s += sv[i] * sv[i];
  return 0.5 * s;
}

}  // namespace cola
