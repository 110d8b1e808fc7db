// Stacks of frozen dense layers with optional LoRA adapters, exact forward
// passes, mean losses, and hand-derived gradients for adapter parameters.
//
// Data is row-per-sample: a batch of n inputs is an n x k matrix and a layer
// with frozen weight W (d x k) produces Z = X W^T + s (X A^T) B^T.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cola/linalg.hpp"
#include "cola/lora.hpp"

namespace cola {

enum class Activation { identity, relu, tanh };
enum class LossKind { mse, softmax_cross_entropy };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline std::string to_string(LossKind k) {
  return k == LossKind::mse ? "mse" : "softmax_cross_entropy";
}

struct Layer {
  DenseMatrix frozen;  // d x k
  std::optional<LoraAdapter> adapter;
  Activation activation = Activation::identity;

  std::size_t out_dim() const { return frozen.rows(); }
  std::size_t in_dim() const { return frozen.cols(); }
};

struct LoraLinearModel {
  std::vector<Layer> layers;
  LossKind loss_kind = LossKind::mse;

  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("LoraLinearModel: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      if (i + 1 < layers.size() && l.out_dim() != layers[i + 1].in_dim()) {
        throw ShapeError("LoraLinearModel: layer " + std::to_string(i) + " outputs " +
                         std::to_string(l.out_dim()) + " but layer " + std::to_string(i + 1) +
                         " expects " + std::to_string(layers[i + 1].in_dim()));
      }
      if (l.adapter) {
        l.adapter->validate();
        if (l.adapter->out_dim() != l.out_dim() || l.adapter->in_dim() != l.in_dim()) {
          throw ShapeError("LoraLinearModel: adapter on layer " + std::to_string(i) +
                           " does not match weight " + l.frozen.shape_string());
        }
      }
    }
  }
};

/// Model with every adapter folded into its frozen weight.
inline LoraLinearModel merged(const LoraLinearModel& m) {
  LoraLinearModel out = m;
  for (Layer& l : out.layers) {
    if (l.adapter) {
      l.frozen = merge_into(l.frozen, *l.adapter);
      l.adapter.reset();
    }
  }
  return out;
}

/// Model with adapters dropped, i.e. the frozen path only.
inline LoraLinearModel frozen_only(const LoraLinearModel& m) {
  LoraLinearModel out = m;
  for (Layer& l : out.layers) l.adapter.reset();
  return out;
}

/// Inputs are n x in_dim. For mse, `targets` is n x out_dim and an optional
/// 0/1 `mask` of the same shape restricts which entries are scored. For
/// softmax cross-entropy, `labels` holds one class index per row.
struct Batch {
  DenseMatrix inputs;
  DenseMatrix targets;
  std::vector<std::size_t> labels;
  std::optional<DenseMatrix> mask;

  std::size_t size() const { return inputs.rows(); }
};

/// Rows `idx` of a batch, in order.
inline Batch gather(const Batch& src, std::span<const std::size_t> idx) {
  Batch out;
  out.inputs = DenseMatrix(idx.size(), src.inputs.cols());
  const bool has_targets = !src.targets.empty();
  if (has_targets) out.targets = DenseMatrix(idx.size(), src.targets.cols());
  if (src.mask) out.mask = DenseMatrix(idx.size(), src.mask->cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const std::size_t i = idx[r];
    std::copy_n(src.inputs.row(i).begin(), src.inputs.cols(), out.inputs.row(r).begin());
    if (has_targets) {
      std::copy_n(src.targets.row(i).begin(), src.targets.cols(), out.targets.row(r).begin());
    }
    if (src.mask) std::copy_n(src.mask->row(i).begin(), src.mask->cols(), out.mask->row(r).begin());
    if (!src.labels.empty()) out.labels.push_back(src.labels[i]);
  }
  return out;
}

struct AdapterGrad {
  std::size_t layer = 0;
  DenseMatrix grad_a;  // rank x k
  DenseMatrix grad_b;  // d x rank
};

struct GradSet {
  std::vector<AdapterGrad> per_layer;
};

namespace detail {

inline void apply_activation(DenseMatrix& z, Activation act) {
  switch (act) {
    case Activation::identity: return;
    case Activation::relu:
      for (double& x : z.data()) x = x > 0.0 ? x : 0.0;
      return;
    case Activation::tanh:
      for (double& x : z.data()) x = std::tanh(x);
      return;
  }
}

/// Multiplies `g` in place by the activation derivative evaluated at pre-activation `z`.
inline void apply_activation_grad(DenseMatrix& g, const DenseMatrix& z, Activation act) {
  auto gd = g.data();
  auto zd = z.data();
  switch (act) {
    case Activation::identity: return;
    case Activation::relu:
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] = zd[i] > 0.0 ? gd[i] : 0.0;
      return;
    case Activation::tanh:
      for (std::size_t i = 0; i < gd.size(); ++i) {
        const double t = std::tanh(zd[i]);
        gd[i] *= 1.0 - t * t;
      }
      return;
  }
}

inline DenseMatrix layer_preactivation(const Layer& l, const DenseMatrix& x) {
  DenseMatrix z = matmul_nt(x, l.frozen);
  if (l.adapter) {
    const DenseMatrix xa = matmul_nt(x, l.adapter->a);  // n x r
    add_scaled_inplace(z, matmul_nt(xa, l.adapter->b), l.adapter->scale());
  }
  return z;
}

inline void check_input(const LoraLinearModel& m, const DenseMatrix& x) {
  if (x.cols() != m.in_dim()) {
    throw ShapeError("forward: input " + x.shape_string() + " but model expects " +
                     std::to_string(m.in_dim()) + " features");
  }
}

inline void check_batch(const LoraLinearModel& m, const Batch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("batch is empty");
  check_input(m, batch.inputs);
  if (m.loss_kind == LossKind::mse) {
    if (batch.targets.rows() != batch.size() || batch.targets.cols() != m.out_dim()) {
      throw ShapeError("mse targets " + batch.targets.shape_string() + " vs expected " +
                       std::to_string(batch.size()) + "x" + std::to_string(m.out_dim()));
    }
    if (batch.mask && !batch.mask->same_shape(batch.targets)) {
      throw ShapeError("mask " + batch.mask->shape_string() + " vs targets " +
                       batch.targets.shape_string());
    }
  } else {
    if (batch.labels.size() != batch.size()) {
      throw ShapeError("cross-entropy needs one label per row (" +
                       std::to_string(batch.labels.size()) + " labels, " +
                       std::to_string(batch.size()) + " rows)");
    }
    for (std::size_t c : batch.labels) {
      if (c >= m.out_dim()) {
        throw std::out_of_range("class index " + std::to_string(c) + " out of range [0, " +
                                std::to_string(m.out_dim()) + ")");
      }
    }
  }
}

/// Loss value and dL/d(pred) for a prediction matrix.
inline double loss_and_grad(LossKind kind, const DenseMatrix& pred, const Batch& batch,
                            DenseMatrix* dpred) {
  const std::size_t n = pred.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  if (dpred) *dpred = DenseMatrix(pred.rows(), pred.cols());
  double total = 0.0;
  if (kind == LossKind::mse) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < pred.cols(); ++j) {
        const double w = batch.mask ? (*batch.mask)(i, j) : 1.0;
        const double r = pred(i, j) - batch.targets(i, j);
        s += w * r * r;
        if (dpred) (*dpred)(i, j) = w * r * inv_n;
      }
      total += 0.5 * s;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto z = pred.row(i);
      double zmax = z[0];
      for (double v : z) zmax = std::max(zmax, v);
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - zmax);
      const double lse = zmax + std::log(sum);
      const std::size_t c = batch.labels[i];
      total += lse - z[c];
      if (dpred) {
        for (std::size_t j = 0; j < z.size(); ++j) {
          (*dpred)(i, j) = (std::exp(z[j] - lse) - (j == c ? 1.0 : 0.0)) * inv_n;
        }
      }
    }
  }
  return total * inv_n;
}

}  // namespace detail

/// Output of the last layer (logits for cross-entropy models).
inline DenseMatrix forward(const LoraLinearModel& m, const DenseMatrix& x) {
  detail::check_input(m, x);
  DenseMatrix h = x;
  for (const Layer& l : m.layers) {
    h = detail::layer_preactivation(l, h);
    detail::apply_activation(h, l.activation);
  }
  return h;
}

/// Mean over samples of 1/2 ||pred - target||^2 (mse) or of the negative
/// log-likelihood (softmax cross-entropy).
inline double loss(const LoraLinearModel& m, const Batch& batch) {
  detail::check_batch(m, batch);
  return detail::loss_and_grad(m.loss_kind, forward(m, batch.inputs), batch, nullptr);
}

struct LossAndGrads {
  double loss = 0.0;
  GradSet grads;
};

/// Gradients with respect to adapter A and B only; frozen weights get none.
/// With G = dL/dZ for a layer and input X, dL/dW_eff = G^T X and
///   grad_B = s (G^T X) A^T,  grad_A = s B^T (G^T X).
inline LossAndGrads backward(const LoraLinearModel& m, const Batch& batch) {
  detail::check_batch(m, batch);
  const std::size_t L = m.layers.size();
  std::vector<DenseMatrix> inputs(L);
  std::vector<DenseMatrix> pre(L);
  DenseMatrix h = batch.inputs;
  for (std::size_t i = 0; i < L; ++i) {
    inputs[i] = h;
    pre[i] = detail::layer_preactivation(m.layers[i], h);
    h = pre[i];
    detail::apply_activation(h, m.layers[i].activation);
  }

  LossAndGrads out;
  DenseMatrix g;
  out.loss = detail::loss_and_grad(m.loss_kind, h, batch, &g);

  for (std::size_t li = L; li-- > 0;) {
    const Layer& l = m.layers[li];
    detail::apply_activation_grad(g, pre[li], l.activation);
    if (l.adapter) {
      const LoraAdapter& ad = *l.adapter;
      const DenseMatrix gw = matmul_tn(g, inputs[li]);  // d x k
      AdapterGrad ag;
      ag.layer = li;
      ag.grad_b = scaled(matmul_nt(gw, ad.a), ad.scale());
      ag.grad_a = scaled(matmul_tn(ad.b, gw), ad.scale());
      out.grads.per_layer.push_back(std::move(ag));
    }
    if (li > 0) {
      DenseMatrix gx = matmul(g, l.frozen);  // n x k
      if (l.adapter) {
        add_scaled_inplace(gx, matmul(matmul(g, l.adapter->b), l.adapter->a), l.adapter->scale());
      }
      g = std::move(gx);
    }
  }
  std::reverse(out.grads.per_layer.begin(), out.grads.per_layer.end());
  return out;
}

}  // namespace cola
