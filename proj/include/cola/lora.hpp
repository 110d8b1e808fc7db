// Low-rank adapters: delta = (alpha / rank) * B A, with B zero at initialization.
#pragma once

#include <cstddef>
#include <iostream>
#include <stdexcept>
#include <string>

#include "cola/linalg.hpp"

namespace cola {

inline constexpr double kDefaultInitStd = 0.02;

/// A is rank x k, B is d x rank. The adapter maps R^k -> R^d like the frozen
/// weight it is attached to.
struct LoraAdapter {
  DenseMatrix a;
  DenseMatrix b;
  std::size_t rank = 0;
  double alpha = 1.0;

  std::size_t out_dim() const { return b.rows(); }
  std::size_t in_dim() const { return a.cols(); }
  double scale() const { return alpha / static_cast<double>(rank); }

  void validate() const {
    if (rank == 0 || a.rows() != rank || b.cols() != rank) {
      throw ShapeError("LoraAdapter: rank " + std::to_string(rank) + " inconsistent with A " +
                       a.shape_string() + ", B " + b.shape_string());
    }
    if (!(alpha > 0.0)) throw std::invalid_argument("LoraAdapter: alpha must be positive");
  }
};

namespace detail {

inline void check_rank(std::size_t d, std::size_t k, std::size_t rank, const char* who) {
  if (rank < 1 || rank > std::min(d, k)) {
    throw std::invalid_argument(std::string(who) + ": rank " + std::to_string(rank) +
                                " outside [1, min(" + std::to_string(d) + ", " +
                                std::to_string(k) + ")]");
  }
}

}  // namespace detail

inline LoraAdapter init_adapter(SeededRng& rng, std::size_t d, std::size_t k, std::size_t rank,
                                double alpha, double init_std = kDefaultInitStd) {
  detail::check_rank(d, k, rank, "init_adapter");
  if (!(alpha > 0.0)) throw std::invalid_argument("init_adapter: alpha must be positive");
  if (rank == std::min(d, k)) {
    std::clog << "warning: adapter rank " << rank << " is not below min(d, k) = " << rank
              << "; the adapter is full rank\n";
  }
  LoraAdapter ad;
  ad.a = gaussian(rng, rank, k, init_std);
  ad.b = DenseMatrix(d, rank);
  ad.rank = rank;
  ad.alpha = alpha;
  return ad;
}

inline DenseMatrix effective_delta(const LoraAdapter& ad) {
  ad.validate();
  return scaled(matmul(ad.b, ad.a), ad.scale());
}

/// w + effective_delta(ad); w itself is untouched.
inline DenseMatrix merge_into(const DenseMatrix& w, const LoraAdapter& ad) {
  if (w.rows() != ad.out_dim() || w.cols() != ad.in_dim()) {
    throw ShapeError("merge_into: weight " + w.shape_string() + " vs adapter delta " +
                     std::to_string(ad.out_dim()) + "x" + std::to_string(ad.in_dim()));
  }
  return add_scaled(w, effective_delta(ad), 1.0);
}

/// Fresh adapter of `new_rank` on the same (d, k) with alpha carried over.
inline LoraAdapter reinit(const LoraAdapter& ad, SeededRng& rng, std::size_t new_rank,
                          double init_std = kDefaultInitStd) {
  return init_adapter(rng, ad.out_dim(), ad.in_dim(), new_rank, ad.alpha, init_std);
}

}  // namespace cola
