#pragma once

// Reference computations used only by the tests. They are written directly
// in terms of loops over raw entries so they do not share code paths with
// the solvers they check.

#include <cmath>
#include <cstdint>
#include <vector>

#include "deqfl/deqfl.hpp"

namespace deqfl::testing {

// z <- act(W z + U x + b) from z = 0 until successive iterates differ by
// less than 1e-14 (or 100000 steps).
inline Vector picard_to_convergence(const DeqParams& p, const Vector& x) {
  const std::size_t n = p.d_z();
  std::vector<double> z(n, 0.0), next(n);
  for (int it = 0; it < 100000; ++it) {
    double diff = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double a = p.b[i];
      for (std::size_t j = 0; j < n; ++j) a += p.W(i, j) * z[j];
      for (std::size_t j = 0; j < p.d_x(); ++j) a += p.U(i, j) * x[j];
      next[i] = activate(p.activation, a);
      diff = std::max(diff, std::abs(next[i] - z[i]));
    }
    z.swap(next);
    if (diff < 1e-14) break;
  }
  return Vector(z);
}

// (I - W)^{-1} (U x + b): the equilibrium of the identity-activation map.
inline Vector closed_form_linear_fixed_point(const DeqParams& p, const Vector& x) {
  Matrix a = Matrix::identity(p.d_z());
  a -= p.W;
  Vector rhs = matvec(p.U, x);
  rhs += p.b;
  return solve_linear(a, rhs);
}

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (double& e : v.values()) e = scale * rng.normal();
  return v;
}

// W scaled to spectral norm `norm` exactly (as measured by power iteration).
inline DeqParams random_params(std::uint64_t seed, std::size_t d_z, std::size_t d_x, Activation act, double norm) {
  Rng rng(seed, StreamPurpose::test, 7);
  DeqParams p{random_matrix(rng, d_z, d_z), random_matrix(rng, d_z, d_x), random_vector(rng, d_z, 0.5), act};
  p.W *= norm / spectral_norm(p.W);
  return p;
}

inline double max_abs(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace deqfl::testing
