// AdamW with decoupled weight decay, a linear-decay learning rate, and full
// state reset.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cola/linalg.hpp"

namespace cola {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One trainable matrix and its gradient, labelled for diagnostics.
struct ParamSlot {
  DenseMatrix* param = nullptr;
  const DenseMatrix* grad = nullptr;
  std::string label;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AdamW {
 public:
  explicit AdamW(AdamWHyper hyper = {}) : hyper_(hyper) {}

  const AdamWHyper& hyper() const { return hyper_; }
  long step_count() const { return step_count_; }
  const std::vector<DenseMatrix>& first_moments() const { return m_; }
  const std::vector<DenseMatrix>& second_moments() const { return v_; }

  /// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
  /// p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
  /// The moment buffers bind to `slots` on the first step after construction
  /// or reset and must keep the same shapes afterwards.
  void step(std::span<const ParamSlot> slots, double lr) {
    if (lr < 0.0) throw std::invalid_argument("AdamW::step: negative learning rate");
    if (m_.empty()) bind(slots);
    if (slots.size() != m_.size()) {
      throw ShapeError("AdamW::step: " + std::to_string(slots.size()) +
                       " parameters, state holds " + std::to_string(m_.size()));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const ParamSlot& s = slots[i];
      if (!s.param->same_shape(*s.grad) || !s.param->same_shape(m_[i])) {
        throw ShapeError("AdamW::step: " + s.label + " param " + s.param->shape_string() +
                         ", grad " + s.grad->shape_string() + ", state " + m_[i].shape_string());
      }
      if (!s.grad->all_finite()) {
        throw NonFiniteGradient("AdamW::step: non-finite gradient in " + s.label);
      }
    }

    ++step_count_;
    const double t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(hyper_.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper_.beta2, t);
    for (std::size_t i = 0; i < slots.size(); ++i) {
      auto p = slots[i].param->data();
      auto g = slots[i].grad->data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * g[j];
        v[j] = hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * g[j] * g[j];
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        p[j] -= lr * (m_hat / (std::sqrt(v_hat) + hyper_.eps) + hyper_.weight_decay * p[j]);
      }
    }
  }

  /// Zeroes moments and the step counter in place; hyperparameters stay.
  void reset() {
    for (auto& m : m_) std::fill(m.data().begin(), m.data().end(), 0.0);
    for (auto& v : v_) std::fill(v.data().begin(), v.data().end(), 0.0);
    step_count_ = 0;
  }

  /// Resets and re-binds zero moments to `params`, whose shapes may differ
  /// from the previous binding (rank step-down).
  void reset(std::span<DenseMatrix* const> params) {
    m_.clear();
    v_.clear();
    for (const DenseMatrix* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
    step_count_ = 0;
  }

 private:
  void bind(std::span<const ParamSlot> slots) {
    m_.clear();
    v_.clear();
    for (const ParamSlot& s : slots) {
      m_.emplace_back(s.param->rows(), s.param->cols());
      v_.emplace_back(s.param->rows(), s.param->cols());
    }
  }

  AdamWHyper hyper_;
  std::vector<DenseMatrix> m_;
  std::vector<DenseMatrix> v_;
  long step_count_ = 0;
};

struct LrSchedule {
  double lr0 = 1e-3;
  long total_steps = 1;
};

/// lr0 * max(0, 1 - t / total_steps).
inline double lr_at(const LrSchedule& s, long t) {
  if (s.total_steps <= 0) return 0.0;
  const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(s.total_steps);
  return s.lr0 * std::max(0.0, frac);
}

}  // namespace cola
