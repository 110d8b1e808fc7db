// Dense real matrices, a seeded generator, and top singular pair extraction.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cola {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-major d x k matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;

  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("DenseMatrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  bool is_zero() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return x == 0.0; });
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

}  // namespace detail

/// SplitMix64 stream (Steele, Lea, Flood 2014). Uniforms take the top 53 bits;
/// normals use Box-Muller on two consecutive uniforms, one normal per pair.
/// The integer stream is bit-exact on every platform; the normal stream is
/// bit-exact wherever std::log/std::sqrt/std::cos are correctly rounded.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("SeededRng::below: n must be positive");
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream; used to give each run its own generator.
  SeededRng split() { return SeededRng(next_u64()); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + a.shape_string() + " x " +
                     b.shape_string());
  }
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// a * b^T without materializing the transpose.
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " x (" + b.shape_string() + ")^T");
  }
  DenseMatrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

/// a^T * b without materializing the transpose.
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: (" + a.shape_string() + ")^T x " + b.shape_string());
  }
  DenseMatrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto crow = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

inline DenseMatrix transpose(const DenseMatrix& m) {
  DenseMatrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

/// a + s*b.
inline DenseMatrix add_scaled(const DenseMatrix& a, const DenseMatrix& b, double s) {
  detail::require_same_shape(a, b, "add_scaled");
  DenseMatrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] += s * bd[i];
  return c;
}

inline void add_scaled_inplace(DenseMatrix& a, const DenseMatrix& b, double s) {
  detail::require_same_shape(a, b, "add_scaled_inplace");
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += s * bd[i];
}

inline DenseMatrix scaled(const DenseMatrix& m, double s) {
  DenseMatrix c = m;
  for (double& x : c.data()) x *= s;
  return c;
}

inline double dot(const DenseMatrix& a, const DenseMatrix& b) {
  detail::require_same_shape(a, b, "dot");
  auto ad = a.data();
  auto bd = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
  return s;
}

inline double frobenius_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (double x : m.data()) s += x * x;
  return std::sqrt(s);
}

/// Rank-one outer product s * u v^T.
inline DenseMatrix outer(std::span<const double> u, std::span<const double> v, double s = 1.0) {
  DenseMatrix m(u.size(), v.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = s * u[i] * v[j];
  return m;
}

inline DenseMatrix gaussian(SeededRng& rng, std::size_t rows, std::size_t cols, double std_dev) {
  if (!(std_dev > 0.0) || !std::isfinite(std_dev)) {
    throw std::invalid_argument("gaussian: std must be positive, got " + std::to_string(std_dev));
  }
  DenseMatrix m(rows, cols);
  for (double& x : m.data()) x = std_dev * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// Top singular pair

struct SingularTriple {
  double sigma = 0.0;
  std::vector<double> u;
  std::vector<double> v;
  /// ||m^T u - sigma v||, the power-iteration residual at exit.
  double residual = 0.0;
  int iterations = 0;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, SingularTriple last)
      : std::runtime_error(what), last_(std::move(last)) {}

  double residual() const { return last_.residual; }
  const SingularTriple& last() const { return last_; }

 private:
  SingularTriple last_;
};

namespace detail {

inline double norm2(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

inline void mat_vec(const DenseMatrix& m, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) s += r[j] * x[j];
    y[i] = s;
  }
}

inline void mat_t_vec(const DenseMatrix& m, std::span<const double> x, std::span<double> y) {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const double xi = x[i];
    for (std::size_t j = 0; j < m.cols(); ++j) y[j] += r[j] * xi;
  }
}

inline constexpr std::uint64_t kPowerIterationSeed = 0xC01A5EEDULL;

}  // namespace detail

/// Power iteration on m^T m. Converged when ||m^T u - sigma v|| <= tol * sigma,
/// where u = m v / sigma, so m v == sigma u holds exactly on return.
///
/// A zero matrix returns sigma = 0 with u = e1, v = e1. Passing `start`
/// (length cols) warm-starts the iteration; otherwise the start vector comes
/// from a fixed seeded stream. Throws ConvergenceError carrying the last
/// iterate when max_iter is exhausted.
inline SingularTriple top_singular_pair(const DenseMatrix& m, double tol, int max_iter,
                                        std::span<const double> start = {}) {
  if (!(tol > 0.0)) throw std::invalid_argument("top_singular_pair: tol must be positive");
  if (m.rows() == 0 || m.cols() == 0) throw ShapeError("top_singular_pair: empty matrix");

  SingularTriple out;
  out.u.assign(m.rows(), 0.0);
  out.v.assign(m.cols(), 0.0);
  if (m.is_zero()) {
    out.u[0] = 1.0;
    out.v[0] = 1.0;
    return out;
  }

  std::vector<double> v(m.cols());
  if (start.size() == m.cols() && detail::norm2(start) > 0.0) {
    std::copy(start.begin(), start.end(), v.begin());
  } else {
    SeededRng rng(detail::kPowerIterationSeed);
    for (double& x : v) x = rng.normal();
  }
  {
    const double n = detail::norm2(v);
    for (double& x : v) x /= n;
  }

  std::vector<double> w(m.rows());
  std::vector<double> z(m.cols());
  for (int it = 1; it <= max_iter; ++it) {
    detail::mat_vec(m, v, w);
    double sigma = detail::norm2(w);
    if (sigma == 0.0) {
      // Start vector orthogonal to the row space: restart from the largest row.
      std::size_t best = 0;
      double best_norm = -1.0;
      for (std::size_t i = 0; i < m.rows(); ++i) {
        const double rn = detail::norm2(m.row(i));
        if (rn > best_norm) best_norm = rn, best = i;
      }
      auto r = m.row(best);
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = r[j] / best_norm;
      continue;
    }
    for (std::size_t i = 0; i < w.size(); ++i) out.u[i] = w[i] / sigma;
    detail::mat_t_vec(m, out.u, z);
    double res2 = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double d = z[j] - sigma * v[j];
      res2 += d * d;
    }
    out.sigma = sigma;
    out.v = v;
    out.residual = std::sqrt(res2);
    out.iterations = it;
    if (out.residual <= tol * sigma) return out;
    const double zn = detail::norm2(z);
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = z[j] / zn;
  }
  std::ostringstream msg;
  msg << "top_singular_pair: no convergence after " << max_iter
      << " iterations (residual " << out.residual << ", sigma " << out.sigma << ")";
  throw ConvergenceError(msg.str(), std::move(out));
}

/// All singular values, descending, by one-sided (Hestenes) Jacobi.
/// Used for feasibility and rank diagnostics, not on the optimization path.
inline std::vector<double> singular_values(const DenseMatrix& m, int max_sweeps = 60) {
  const bool wide = m.cols() > m.rows();
  DenseMatrix a = wide ? transpose(m) : m;  // tall: rows >= cols
  const std::size_t n = a.rows();
  const std::size_t p = a.cols();
  // Work on columns stored as rows of the transpose for contiguous access.
  DenseMatrix cols = transpose(a);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < p; ++i) {
      for (std::size_t j = i + 1; j < p; ++j) {
        auto ci = cols.row(i);
        auto cj = cols.row(j);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          alpha += ci[k] * ci[k];
          beta += cj[k] * cj[k];
          gamma += ci[k] * cj[k];
        }
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < n; ++k) {
          const double x = ci[k];
          const double y = cj[k];
          ci[k] = c * x - s * y;
          cj[k] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(p);
  for (std::size_t i = 0; i < p; ++i) sv[i] = detail::norm2(cols.row(i));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

inline double nuclear_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (double x : singular_values(m)) s += x;
  return s;
}

/// Number of singular values above `threshold`.
inline std::size_t numerical_rank(const DenseMatrix& m, double threshold) {
  const auto sv = singular_values(m);
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [&](double s) { return s > threshold; }));
}

}  // namespace cola
