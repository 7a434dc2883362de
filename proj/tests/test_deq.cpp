#include <gtest/gtest.h>

#include <cmath>

#include "deqfl/deq.hpp"
#include "deqfl/rng.hpp"
#include "oracles.hpp"

namespace {

using deqfl::Activation;
using deqfl::DeqParams;
using deqfl::Matrix;
using deqfl::SolverConfig;
using deqfl::SolverMethod;
using deqfl::Vector;
namespace t = deqfl::testing;

DeqParams linear_half(std::size_t n) {
  return {Matrix::identity(n, 0.5), Matrix::identity(n), Vector(n), Activation::identity};
}

SolverConfig config(SolverMethod m, double tol, std::size_t iters) {
  SolverConfig c;
  c.method = m;
  c.tol = tol;
  c.max_iters = iters;
  return c;
}

TEST(ApplyF, Examples) {
  const DeqParams pass{Matrix(2, 2), Matrix::identity(2), Vector(2), Activation::identity};
  EXPECT_EQ(deqfl::apply_f(pass, Vector{7, -3}, Vector{1, 2}), (Vector{1, 2}));

  const DeqParams zero{Matrix(2, 2), Matrix(2, 3), Vector(2), Activation::tanh};
  EXPECT_EQ(deqfl::apply_f(zero, Vector{5, 5}, Vector{1, 2, 3}), (Vector{0, 0}));

  EXPECT_EQ(deqfl::apply_f(linear_half(2), Vector{2, 2}, Vector{1, 1}), (Vector{2, 2}));
}

TEST(ApplyF, DimensionMismatch) {
  EXPECT_THROW(deqfl::apply_f(linear_half(2), Vector{1, 2, 3}, Vector{1, 1}), deqfl::DimensionError);
  EXPECT_THROW(deqfl::apply_f(linear_half(2), Vector{1, 2}, Vector{1}), deqfl::DimensionError);
}

TEST(Activation, DerivativeConventions) {
  EXPECT_EQ(deqfl::activate_derivative(Activation::relu, 0.0), 0.0);
  EXPECT_EQ(deqfl::activate_derivative(Activation::relu, 1e-300), 1.0);
  EXPECT_EQ(deqfl::activate_derivative(Activation::tanh, 0.0), 1.0);
  EXPECT_EQ(deqfl::activate_derivative(Activation::identity, -4.0), 1.0);
}

TEST(SolverConfig, Validation) {
  SolverConfig c;
  EXPECT_NO_THROW(c.validate());
  c.beta = 0.0;
  EXPECT_THROW(c.validate(), deqfl::ConfigError);
  c = {};
  c.max_iters = 0;
  EXPECT_THROW(c.validate(), deqfl::ConfigError);
  c = {};
  c.anderson_m = 0;
  EXPECT_THROW(c.validate(), deqfl::ConfigError);
}

TEST(Picard, FixedPointInputConvergesImmediately) {
  const auto r = deqfl::solve_picard(linear_half(2), Vector{1, 1}, Vector{2, 2}, config(SolverMethod::picard, 1e-12, 50));
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iters_used, 1u);
  EXPECT_EQ(r.z_star, (Vector{2, 2}));
}

TEST(Picard, LinearClosedForm) {
  const Vector c{0.3, -1.2, 2.0};
  const auto r = deqfl::solve_picard(linear_half(3), c, Vector(3), config(SolverMethod::picard, 1e-8, 1000));
  ASSERT_TRUE(r.converged);
  EXPECT_LE(deqfl::norm2(r.z_star - 2.0 * c), 1e-7);
}

TEST(Picard, ExpansiveMapDoesNotConverge) {
  const DeqParams p{Matrix::identity(2, 2.0), Matrix::identity(2), Vector(2), Activation::identity};
  const auto r = deqfl::solve_picard(p, Vector{1, 1}, Vector{0.5, 0}, config(SolverMethod::picard, 1e-8, 50));
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iters_used, 50u);
  EXPECT_GT(r.residual, 1e10);
}

TEST(Picard, OverflowRaisesDivergenceWithIteration) {
  const DeqParams p{Matrix::identity(1, 1e200), Matrix::identity(1), Vector(1), Activation::identity};
  try {
    deqfl::solve_picard(p, Vector{1.0}, Vector{1.0}, config(SolverMethod::picard, 1e-8, 50));
    FAIL() << "expected divergence";
  } catch (const deqfl::DivergenceError& e) {
    EXPECT_GE(e.iteration(), 1u);
    EXPECT_LE(e.iteration(), 3u);
  }
}

TEST(Picard, FixedCountModeRunsExactlyK) {
  const DeqParams p = t::random_params(3, 6, 3, Activation::tanh, 0.9);
  const auto r = deqfl::solve_picard(p, Vector{0.1, 0.2, 0.3}, Vector(6), config(SolverMethod::picard, 0.0, 10));
  EXPECT_EQ(r.iters_used, 10u);
  EXPECT_FALSE(r.converged);
}

TEST(Anderson, WindowOneMatchesPicardIterates) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const DeqParams p = t::random_params(seed, 6, 3, Activation::tanh, 0.95);
    const Vector x{0.5, -1.0, 2.0};
    SolverConfig a = config(SolverMethod::anderson, 0.0, 30);
    a.anderson_m = 1;
    a.beta = 1.0;
    deqfl::IterateTrace ta, tp;
    deqfl::solve_anderson(p, x, Vector(6), a, &ta);
    deqfl::solve_picard(p, x, Vector(6), config(SolverMethod::picard, 0.0, 30), &tp);
    ASSERT_EQ(ta.size(), tp.size());
    for (std::size_t k = 0; k < ta.size(); ++k) EXPECT_LE(deqfl::max_abs_diff(ta[k], tp[k]), 1e-14);
  }
}

TEST(Anderson, LinearClosedFormInNoMoreIterations) {
  const Vector c{1.0, -2.0, 0.25, 4.0};
  const auto a = deqfl::solve_anderson(linear_half(4), c, Vector(4), config(SolverMethod::anderson, 1e-8, 1000));
  const auto p = deqfl::solve_picard(linear_half(4), c, Vector(4), config(SolverMethod::picard, 1e-8, 1000));
  ASSERT_TRUE(a.converged);
  EXPECT_LE(deqfl::norm2(a.z_star - 2.0 * c), 1e-7);
  EXPECT_LE(a.iters_used, p.iters_used);
}

TEST(Anderson, TanhContractionMatchesLongPicard) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const DeqParams p = t::random_params(100 + seed, 12, 5, Activation::tanh, 0.9);
    deqfl::Rng rng(seed);
    const Vector x = t::random_vector(rng, 5);
    const auto a = deqfl::solve_anderson(p, x, Vector(12), config(SolverMethod::anderson, 1e-10, 200));
    const auto ref = deqfl::solve_picard(p, x, Vector(12), config(SolverMethod::picard, 1e-14, 2000));
    ASSERT_TRUE(a.converged);
    EXPECT_LE(deqfl::norm2(a.z_star - ref.z_star), 1e-8);
  }
}

TEST(Solvers, ReportedResidualIsReproducible) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DeqParams p = t::random_params(seed, 8, 4, seed % 2 ? Activation::tanh : Activation::relu, 0.8);
    const Vector x{1, -1, 0.5, 2};
    for (auto m : {SolverMethod::picard, SolverMethod::anderson}) {
      for (double tol : {0.0, 1e-6}) {
        const auto r = deqfl::solve_anderson(p, x, Vector(8), config(m, tol, 7 + seed));
        const auto rp = deqfl::solve_picard(p, x, Vector(8), config(m, tol, 7 + seed));
        for (const auto& res : {r, rp}) {
          const double again = deqfl::norm2(deqfl::apply_f(p, res.z_star, x) - res.z_star);
          EXPECT_LE(std::abs(again - res.residual), 1e-12);
          EXPECT_LE(res.iters_used, 7 + seed);
          if (res.converged) EXPECT_LE(res.residual, tol);
        }
      }
    }
  }
}

TEST(Solvers, IdentityActivationAgreesWithClosedForm) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const DeqParams p = t::random_params(seed, 6, 3, Activation::identity, 0.7);
    deqfl::Rng rng(seed, deqfl::StreamPurpose::test);
    const Vector x = t::random_vector(rng, 3);
    const Vector exact = t::closed_form_linear_fixed_point(p, x);
    const double tol = 1e-9;
    const auto a = deqfl::solve_anderson(p, x, Vector(6), config(SolverMethod::anderson, tol, 2000));
    const auto pc = deqfl::solve_picard(p, x, Vector(6), config(SolverMethod::picard, tol, 2000));
    ASSERT_TRUE(a.converged && pc.converged);
    EXPECT_LE(deqfl::norm2(a.z_star - exact), 10 * tol);
    EXPECT_LE(deqfl::norm2(pc.z_star - exact), 10 * tol);
    EXPECT_LE(deqfl::norm2(a.z_star - pc.z_star), 100 * tol);
  }
}

TEST(Jacobian, IdentityAndZeroCases) {
  const DeqParams p = t::random_params(1, 4, 2, Activation::identity, 0.5);
  EXPECT_EQ(deqfl::jacobian_f_z(p, Vector{1, 2, 3, 4}, Vector{1, 1}), p.W);
  const DeqParams z{Matrix(3, 3), Matrix(3, 2), Vector(3), Activation::tanh};
  EXPECT_EQ(deqfl::jacobian_f_z(z, Vector{1, 2, 3}, Vector{1, 1}), Matrix(3, 3));
}

TEST(Jacobian, MatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const DeqParams p = t::random_params(seed, 7, 3, Activation::tanh, 1.5);
    deqfl::Rng rng(seed);
    const Vector z = t::random_vector(rng, 7), x = t::random_vector(rng, 3);
    const Matrix j = deqfl::jacobian_f_z(p, z, x);
    const double h = 1e-5;
    Matrix fd(7, 7);
    for (std::size_t c = 0; c < 7; ++c) {
      Vector up = z, down = z;
      up[c] += h;
      down[c] -= h;
      const Vector d = deqfl::apply_f(p, up, x) - deqfl::apply_f(p, down, x);
      for (std::size_t r = 0; r < 7; ++r) fd(r, c) = d[r] / (2 * h);
    }
    EXPECT_LE(t::max_abs(j, fd), 1e-6);
  }
}

TEST(Adjoint, ZeroRhsGivesZero) {
  const DeqParams p = t::random_params(2, 5, 2, Activation::tanh, 0.9);
  const auto r = deqfl::solve_adjoint(p, Vector(5), Vector{1, 1}, Vector(5), config(SolverMethod::anderson, 1e-12, 50));
  EXPECT_EQ(r.z_star, Vector(5));
  EXPECT_TRUE(r.converged);
}

TEST(Adjoint, LinearHalfClosedForm) {
  const Vector g{1.0, -3.0, 0.5};
  for (auto m : {SolverMethod::picard, SolverMethod::anderson}) {
    const auto r = deqfl::solve_adjoint(linear_half(3), Vector{4, 4, 4}, Vector{1, 2, 3}, g, config(m, 1e-12, 500));
    EXPECT_LE(deqfl::norm2(r.z_star - 2.0 * g), 1e-10);
  }
}

TEST(Adjoint, MatchesDirectLinearSolve) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DeqParams p = t::random_params(seed, 8, 4, Activation::tanh, 0.9);
    deqfl::Rng rng(seed, deqfl::StreamPurpose::test, 3);
    const Vector x = t::random_vector(rng, 4), dl = t::random_vector(rng, 8);
    const Vector z = t::picard_to_convergence(p, x);
    const auto r = deqfl::solve_adjoint(p, z, x, dl, config(SolverMethod::anderson, 1e-10, 500));
    Matrix a = Matrix::identity(8);
    a -= deqfl::jacobian_f_z(p, z, x).transposed();
    EXPECT_LE(deqfl::norm2(r.z_star - deqfl::solve_linear(a, dl)), 1e-6);
  }
}

TEST(Adjoint, ExpansiveJacobianBlowsUp) {
  const DeqParams p{Matrix::identity(1, 1e200), Matrix::identity(1), Vector(1), Activation::identity};
  EXPECT_THROW(deqfl::solve_adjoint(p, Vector{0.0}, Vector{0.0}, Vector{1e200}, config(SolverMethod::picard, 1e-8, 50)),
               deqfl::DivergenceError);
}

TEST(ParamGradient, ZeroGammaAndHandExample) {
  const DeqParams p = t::random_params(4, 2, 2, Activation::tanh, 0.5);
  const auto zero = deqfl::param_gradient(p, Vector{1, 0}, Vector{0, 1}, Vector(2));
  EXPECT_EQ(zero.dW, Matrix(2, 2));
  EXPECT_EQ(zero.dU, Matrix(2, 2));
  EXPECT_EQ(zero.db, Vector(2));

  DeqParams lin = p;
  lin.activation = Activation::identity;
  const auto g = deqfl::param_gradient(lin, Vector{1, 0}, Vector{0, 1}, Vector{1, 1});
  EXPECT_EQ(g.dW, (Matrix{{1, 0}, {1, 0}}));
  EXPECT_EQ(g.dU, (Matrix{{0, 1}, {0, 1}}));
  EXPECT_EQ(g.db, (Vector{1, 1}));
}

TEST(SpectralClip, BoundsNorm) {
  deqfl::Rng rng(9);
  Matrix w = t::random_matrix(rng, 10, 10);
  const double f = deqfl::clip_spectral_norm(w, 0.9);
  EXPECT_LT(f, 1.0);
  EXPECT_NEAR(deqfl::spectral_norm(w), 0.9, 1e-9);
  Matrix small = Matrix::identity(3, 0.1);
  EXPECT_EQ(deqfl::clip_spectral_norm(small, 0.9), 1.0);
}

}  // namespace
