// Random models and batches shared by the unit and acceptance suites.
#pragma once

#include <cstddef>
#include <vector>

#include "cola/cola.hpp"
#include "cola/linalg.hpp"
#include "cola/model.hpp"

namespace fixtures {

/// Dense model through `dims` with adapters of `rank` on every layer. When
/// `live_b` is set, B is drawn at random so gradients wrt A are nonzero.
inline cola::LoraLinearModel random_model(cola::SeededRng& rng, const std::vector<std::size_t>& dims,
                                          cola::Activation hidden, cola::LossKind kind,
                                          std::size_t rank, bool live_b = true) {
  cola::LoraLinearModel m;
  m.loss_kind = kind;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    cola::Layer l;
    l.frozen = cola::gaussian(rng, dims[i + 1], dims[i], 0.5);
    l.activation = i + 2 < dims.size() ? hidden : cola::Activation::identity;
    l.adapter = cola::init_adapter(rng, dims[i + 1], dims[i], rank, 2.0 * static_cast<double>(rank), 0.3);
    if (live_b) l.adapter->b = cola::gaussian(rng, dims[i + 1], rank, 0.3);
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline cola::Batch random_batch(cola::SeededRng& rng, const cola::LoraLinearModel& m, std::size_t n) {
  cola::Batch b;
  b.inputs = cola::gaussian(rng, n, m.in_dim(), 1.0);
  if (m.loss_kind == cola::LossKind::mse) {
    b.targets = cola::gaussian(rng, n, m.out_dim(), 1.0);
  } else {
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(rng.below(m.out_dim()));
  }
  return b;
}

/// Worst relative error of analytic adapter gradients against central
/// differences with step h; relative to max(1, |fd|).
inline double fd_gradient_error(const cola::LoraLinearModel& m, const cola::Batch& b, double h = 1e-5) {
  const cola::GradSet g = cola::backward(m, b).grads;
  double worst = 0.0;
  for (const auto& ag : g.per_layer) {
    for (int which = 0; which < 2; ++which) {
      const cola::DenseMatrix& analytic = which ? ag.grad_b : ag.grad_a;
      for (std::size_t e = 0; e < analytic.size(); ++e) {
        auto probe = [&](double step) {
          cola::LoraLinearModel p = m;
          cola::LoraAdapter& ad = *p.layers[ag.layer].adapter;
          (which ? ad.b : ad.a).data()[e] += step;
          return cola::loss(p, b);
        };
        const double fd = (probe(h) - probe(-h)) / (2.0 * h);
        const double rel = std::abs(fd - analytic.data()[e]) / std::max(1.0, std::abs(fd));
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

}  // namespace fixtures
