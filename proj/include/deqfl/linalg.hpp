#pragma once

// Dense row-major matrices and vectors sized for desk-scale models, plus the
// two solves the fixed-point machinery needs: Gaussian elimination and the
// equality-constrained least-squares problem behind Anderson mixing.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deqfl/errors.hpp"

namespace deqfl {

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(std::string(what) + ": non-finite entry");
  }
}

inline void require_same_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": length " + std::to_string(a) + " vs " +
                         std::to_string(b));
}

}  // namespace detail

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t len, double fill = 0.0) : data_(len, fill) {}
  explicit Vector(std::vector<double> data) : data_(std::move(data)) {}
  Vector(std::initializer_list<double> values) : data_(values) {
    detail::require_finite(data_, "Vector literal");
  }

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Vector& operator+=(const Vector& o) {
    detail::require_same_size(size(), o.size(), "Vector +=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Vector& operator-=(const Vector& o) {
    detail::require_same_size(size(), o.size(), "Vector -=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Vector& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }

  // this += s * o
  void axpy(double s, const Vector& o) {
    detail::require_same_size(size(), o.size(), "axpy");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += s * o.data_[i];
  }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

inline Vector operator+(Vector a, const Vector& b) { return a += b; }
inline Vector operator-(Vector a, const Vector& b) { return a -= b; }
inline Vector operator*(double s, Vector a) { return a *= s; }

inline double dot(const Vector& a, const Vector& b) {
  detail::require_same_size(a.size(), b.size(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(const Vector& v) { return std::sqrt(dot(v, v)); }

inline double max_abs_diff(const Vector& a, const Vector& b) {
  detail::require_same_size(a.size(), b.size(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                           std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  // Nested-list literal, one inner list per row.
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix literal: ragged rows");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    detail::require_finite(data_, "Matrix literal");
  }

  static Matrix identity(std::size_t n, double scale = 1.0) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = scale;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  Matrix& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }
  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "Matrix +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "Matrix -=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  // this += s * u v^T
  void add_outer(double s, const Vector& u, const Vector& v) {
    if (u.size() != rows_ || v.size() != cols_) throw DimensionError("add_outer: shape mismatch");
    for (std::size_t i = 0; i < rows_; ++i) {
      const double su = s * u[i];
      double* r = data_.data() + i * cols_;
      for (std::size_t j = 0; j < cols_; ++j) r[j] += su * v[j];
    }
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (rows_ != o.rows_ || cols_ != o.cols_) throw DimensionError(std::string(op) + ": shape mismatch");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Vector matvec(const Matrix& a, const Vector& v) {
  if (a.cols() != v.size())
    throw DimensionError("matvec: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times length " + std::to_string(v.size()));
  Vector out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * v[j];
    out[i] = acc;
  }
  return out;
}

// A^T v without materializing the transpose.
inline Vector matvec_transposed(const Matrix& a, const Vector& v) {
  if (a.rows() != v.size()) throw DimensionError("matvec_transposed: dimension mismatch");
  Vector out(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    const double vi = v[i];
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j] * vi;
  }
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline double frobenius_norm(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  return std::sqrt(acc);
}

// Gaussian elimination with partial pivoting. Throws SingularMatrixError when
// the best available pivot has magnitude below 1e-12.
inline Vector solve_linear(Matrix a, Vector rhs) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw DimensionError("solve_linear: matrix is not square");
  if (rhs.size() != n) throw DimensionError("solve_linear: rhs length mismatch");
  constexpr double kPivotFloor = 1e-12;

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    if (!(std::abs(a(pivot, col)) >= kPivotFloor))
      throw SingularMatrixError("solve_linear: pivot below 1e-12 in column " + std::to_string(col));
    if (pivot != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(pivot, j));
      std::swap(rhs[col], rhs[pivot]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = a(r, col) / a(col, col);
      if (factor == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a(r, j) -= factor * a(col, j);
      rhs[r] -= factor * rhs[col];
    }
  }
  Vector y(n);
  for (std::size_t i = n; i-- > 0;) {
    double acc = rhs[i];
    for (std::size_t j = i + 1; j < n; ++j) acc -= a(i, j) * y[j];
    y[i] = acc / a(i, i);
  }
  return y;
}

struct AndersonWeights {
  Vector alpha;
  bool degenerate = false;  // uniform fallback was used
};

// Mixing weights for Anderson acceleration: argmin ||Q a||^2 + lambda ||a||^2
// subject to sum(a) = 1, where the columns of Q are past residuals.
//
// The constraint is eliminated by writing a = 1/m + P c with
// P = [e_j - e_m]_{j<m}, which leaves the unconstrained system
//   (D^T D / s + lambda P^T P) c = -D^T qbar / s,
// D = Q P (column differences), qbar = Q 1/m, P^T P = I + 1 1^T.
// s is the mean diagonal of Q^T Q, so lambda acts relative to the residual
// scale. Identical columns give D = 0 exactly and hence uniform weights.
inline AndersonWeights solve_anderson_alpha(const Matrix& q, double lambda) {
  const std::size_t m = q.cols();
  if (m == 0) throw DimensionError("solve_anderson_alpha: Q has no columns");
  if (!(lambda >= 0.0)) throw Error("solve_anderson_alpha: lambda must be >= 0");
  if (m == 1) return {Vector{1.0}, false};

  const auto uniform = [m] { return AndersonWeights{Vector(m, 1.0 / static_cast<double>(m)), true}; };
  const std::size_t rows = q.rows(), n = m - 1;
  const double inv_m = 1.0 / static_cast<double>(m);

  double scale = 0.0;
  for (double v : q.values()) scale += v * v;
  scale /= static_cast<double>(m);
  if (!(scale > 0.0) || !std::isfinite(scale)) return uniform();

  Matrix d(rows, n);
  Vector qbar(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += q(r, j);
    qbar[r] = acc * inv_m;
    for (std::size_t j = 0; j < n; ++j) d(r, j) = q(r, j) - q(r, n);
  }

  Matrix a(n, n);
  Vector rhs(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) acc += d(r, i) * d(r, j);
      a(i, j) = a(j, i) = acc / scale + lambda;
    }
    a(i, i) += lambda;
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) acc += d(r, i) * qbar[r];
    rhs[i] = -acc / scale;
  }

  Vector c;
  try {
    c = solve_linear(std::move(a), rhs);
  } catch (const SingularMatrixError&) {
    return uniform();
  }
  if (!c.all_finite()) return uniform();

  Vector alpha(m, inv_m);
  for (std::size_t j = 0; j < n; ++j) {
    alpha[j] += c[j];
    alpha[n] -= c[j];
  }
  // Absorb the rounding residue into the largest weight so the constraint
  // holds to the last ulp.
  const double drift = 1.0 - std::accumulate(alpha.begin(), alpha.end(), 0.0);
  const auto largest = std::max_element(alpha.begin(), alpha.end(),
                                        [](double x, double y) { return std::abs(x) < std::abs(y); });
  *largest += drift;
  return {std::move(alpha), false};
}

// Largest singular value via power iteration on A^T A.
inline double spectral_norm(const Matrix& a, std::size_t max_iters = 2000, double rel_tol = 1e-13) {
  if (a.size() == 0) return 0.0;
  Vector v(a.cols());
  // Deterministic, non-degenerate start.
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
  v *= 1.0 / norm2(v);
  double sigma = 0.0;
  for (std::size_t it = 0; it < max_iters; ++it) {
    Vector w = matvec_transposed(a, matvec(a, v));
    const double nw = norm2(w);
    if (nw == 0.0) return 0.0;
    const double next = std::sqrt(nw);
    w *= 1.0 / nw;
    v = std::move(w);
    if (std::abs(next - sigma) <= rel_tol * next) {
      sigma = next;
      break;
    }
    sigma = next;
  }
  return sigma;
}

}  // namespace deqfl
