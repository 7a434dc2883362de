#pragma once

// The equilibrium layer f(z, x) = act(W z + U x + b): forward fixed-point
// solvers and the implicit backward pass.
//
// Backward pass, for a loss l(z*) at the equilibrium z* = f(z*, x):
//
//   gamma*  solves  gamma = J^T gamma + dl/dz*,   J = df/dz at (z*, x)
//   dl/dtheta = (df/dtheta)^T gamma*
//
// so only Jacobian-vector products with J^T are ever formed. The adjoint
// equation is itself a fixed point and is handed to the same solvers.

#include <cmath>
#include <cstddef>
#include <deque>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deqfl/errors.hpp"
#include "deqfl/linalg.hpp"

namespace deqfl {

enum class Activation { tanh, relu, identity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "unknown";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("activation", "unknown activation '" + std::string(s) + "'");
}

inline double activate(Activation a, double v) noexcept {
  switch (a) {
    case Activation::tanh: return std::tanh(v);
    case Activation::relu: return v > 0.0 ? v : 0.0;
    case Activation::identity: return v;
  }
  return v;
}

// relu'(0) is taken as 0.
inline double activate_derivative(Activation a, double v) noexcept {
  switch (a) {
    case Activation::tanh: {
      const double t = std::tanh(v);
      return 1.0 - t * t;
    }
    case Activation::relu: return v > 0.0 ? 1.0 : 0.0;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

struct DeqParams {
  Matrix W;  // d_z x d_z
  Matrix U;  // d_z x d_x
  Vector b;  // d_z
  Activation activation = Activation::tanh;

  std::size_t d_z() const noexcept { return W.rows(); }
  std::size_t d_x() const noexcept { return U.cols(); }

  void validate() const {
    if (W.rows() == 0) throw DimensionError("DeqParams: d_z must be >= 1");
    if (W.cols() != W.rows()) throw DimensionError("DeqParams: W must be square");
    if (U.rows() != W.rows()) throw DimensionError("DeqParams: U rows must equal d_z");
    if (b.size() != W.rows()) throw DimensionError("DeqParams: b length must equal d_z");
    if (!W.all_finite() || !U.all_finite() || !b.all_finite())
      throw Error("DeqParams: non-finite parameter");
  }

  friend bool operator==(const DeqParams&, const DeqParams&) = default;
};

enum class SolverMethod { picard, anderson };

inline std::string_view to_string(SolverMethod m) {
  return m == SolverMethod::picard ? "picard" : "anderson";
}

inline SolverMethod solver_method_from_string(std::string_view s) {
  if (s == "picard") return SolverMethod::picard;
  if (s == "anderson") return SolverMethod::anderson;
  throw ConfigError("method", "unknown solver method '" + std::string(s) + "'");
}

// tol = 0 gives fixed-count mode: exactly max_iters updates unless an exact
// fixed point is hit first.
struct SolverConfig {
  std::size_t max_iters = 10;
  double tol = 1e-8;
  std::size_t anderson_m = 5;
  double beta = 1.0;
  double ls_lambda = 1e-8;
  SolverMethod method = SolverMethod::anderson;

  void validate() const {
    if (max_iters < 1) throw ConfigError("max_iters", "must be >= 1");
    if (!(tol >= 0.0) || !std::isfinite(tol)) throw ConfigError("tol", "must be finite and >= 0");
    if (anderson_m < 1) throw ConfigError("anderson_m", "must be >= 1");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta", "must lie in (0, 1]");
    if (!(ls_lambda >= 0.0) || !std::isfinite(ls_lambda)) throw ConfigError("ls_lambda", "must be finite and >= 0");
  }

  friend bool operator==(const SolverConfig&, const SolverConfig&) = default;
};

struct FixedPointResult {
  Vector z_star;
  double residual = 0.0;  // ||f(z*) - z*||_2
  std::size_t iters_used = 0;
  bool converged = false;
  std::size_t degenerate_alpha_solves = 0;
};

struct DeqGradient {
  Matrix dW;
  Matrix dU;
  Vector db;
};

// Receives every iterate z^(0), z^(1), ... when passed to a solver.
using IterateTrace = std::vector<Vector>;

namespace detail {

inline void require_finite_iterate(const Vector& v, std::size_t iteration, const char* solver) {
  if (!v.all_finite()) throw DivergenceError(iteration, std::string(solver) + ": non-finite iterate");
}

}  // namespace detail

// z <- g(z) until ||g(z) - z|| <= tol or max_iters updates have been made.
// tol = 0 runs exactly max_iters updates.
template <typename Map>
FixedPointResult picard_iterate(Map&& g, Vector z, const SolverConfig& cfg, IterateTrace* trace = nullptr) {
  if (trace) trace->push_back(z);
  for (std::size_t k = 0;; ++k) {
    Vector fz = g(z);
    detail::require_finite_iterate(fz, k + 1, "picard");
    const double r = norm2(fz - z);
    if (!std::isfinite(r)) throw DivergenceError(k + 1, "picard: residual overflow");
    if ((cfg.tol > 0.0 && r <= cfg.tol) || k == cfg.max_iters) return {std::move(z), r, k, r <= cfg.tol, 0};
    z = std::move(fz);
    if (trace) trace->push_back(z);
  }
}

// Anderson-mixed iteration over a window of the last m (z, g(z)) pairs:
//   z+ = sum_i a_i ((1 - beta) z_i + beta g(z_i)),
// with a from solve_anderson_alpha on the residual columns g(z_i) - z_i,
// newest first.
template <typename Map>
FixedPointResult anderson_iterate(Map&& g, Vector z, const SolverConfig& cfg, IterateTrace* trace = nullptr) {
  struct Entry {
    Vector z, fz, residual;
  };
  std::deque<Entry> window;
  std::size_t degenerate = 0;
  if (trace) trace->push_back(z);

  for (std::size_t k = 0;; ++k) {
    Vector fz = g(z);
    detail::require_finite_iterate(fz, k + 1, "anderson");
    Vector res = fz - z;
    const double r = norm2(res);
    if (!std::isfinite(r)) throw DivergenceError(k + 1, "anderson: residual overflow");
    if ((cfg.tol > 0.0 && r <= cfg.tol) || k == cfg.max_iters) return {std::move(z), r, k, r <= cfg.tol, degenerate};

    window.push_front(Entry{std::move(z), std::move(fz), std::move(res)});
    if (window.size() > cfg.anderson_m) window.pop_back();

    const std::size_t cols = window.size();
    const std::size_t dim = window.front().z.size();
    Matrix q(dim, cols);
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t r_i = 0; r_i < dim; ++r_i) q(r_i, c) = window[c].residual[r_i];
    AndersonWeights w = solve_anderson_alpha(q, cfg.ls_lambda);
    if (w.degenerate) ++degenerate;

    Vector next(dim);
    for (std::size_t c = 0; c < cols; ++c) {
      if (cfg.beta != 1.0) next.axpy(w.alpha[c] * (1.0 - cfg.beta), window[c].z);
      next.axpy(w.alpha[c] * cfg.beta, window[c].fz);
    }
    z = std::move(next);
    if (trace) trace->push_back(z);
  }
}

template <typename Map>
FixedPointResult fixed_point(Map&& g, Vector z0, const SolverConfig& cfg, IterateTrace* trace = nullptr) {
  return cfg.method == SolverMethod::picard ? picard_iterate(g, std::move(z0), cfg, trace)
                                            : anderson_iterate(g, std::move(z0), cfg, trace);
}

namespace detail {

inline void check_inputs(const DeqParams& p, const Vector& z, const Vector& x) {
  if (z.size() != p.d_z())
    throw DimensionError("z length " + std::to_string(z.size()) + " != d_z " + std::to_string(p.d_z()));
  if (x.size() != p.d_x())
    throw DimensionError("x length " + std::to_string(x.size()) + " != d_x " + std::to_string(p.d_x()));
}

// U x + b, constant across iterations for a given input.
inline Vector input_injection(const DeqParams& p, const Vector& x) {
  if (x.size() != p.d_x())
    throw DimensionError("x length " + std::to_string(x.size()) + " != d_x " + std::to_string(p.d_x()));
  Vector c = matvec(p.U, x);
  c += p.b;
  return c;
}

}  // namespace detail

inline Vector preactivation(const DeqParams& p, const Vector& z, const Vector& x) {
  detail::check_inputs(p, z, x);
  Vector a = matvec(p.W, z);
  a += detail::input_injection(p, x);
  return a;
}

inline Vector apply_f(const DeqParams& p, const Vector& z, const Vector& x) {
  Vector a = preactivation(p, z, x);
  for (double& v : a) v = activate(p.activation, v);
  return a;
}

// The forward map z -> f(z, x) with U x + b hoisted out.
class ForwardMap {
 public:
  ForwardMap(const DeqParams& p, const Vector& x) : p_(&p), injection_(detail::input_injection(p, x)) {}

  Vector operator()(const Vector& z) const {
    Vector a = matvec(p_->W, z);
    a += injection_;
    for (double& v : a) v = activate(p_->activation, v);
    return a;
  }

 private:
  const DeqParams* p_;
  Vector injection_;
};

inline FixedPointResult solve_picard(const DeqParams& p, const Vector& x, Vector z0, const SolverConfig& cfg,
                                     IterateTrace* trace = nullptr) {
  if (z0.size() != p.d_z()) throw DimensionError("solve_picard: z0 length != d_z");
  return picard_iterate(ForwardMap(p, x), std::move(z0), cfg, trace);
}

inline FixedPointResult solve_anderson(const DeqParams& p, const Vector& x, Vector z0, const SolverConfig& cfg,
                                       IterateTrace* trace = nullptr) {
  if (z0.size() != p.d_z()) throw DimensionError("solve_anderson: z0 length != d_z");
  return anderson_iterate(ForwardMap(p, x), std::move(z0), cfg, trace);
}

// Forward solve from z0 = 0 with the configured method.
inline FixedPointResult solve_forward(const DeqParams& p, const Vector& x, const SolverConfig& cfg) {
  return cfg.method == SolverMethod::picard ? solve_picard(p, x, Vector(p.d_z()), cfg)
                                            : solve_anderson(p, x, Vector(p.d_z()), cfg);
}

// df/dz = diag(act'(W z + U x + b)) W
inline Matrix jacobian_f_z(const DeqParams& p, const Vector& z, const Vector& x) {
  const Vector a = preactivation(p, z, x);
  Matrix j = p.W;
  for (std::size_t i = 0; i < j.rows(); ++i) {
    const double d = activate_derivative(p.activation, a[i]);
    for (std::size_t c = 0; c < j.cols(); ++c) j(i, c) *= d;
  }
  return j;
}

// gamma -> J^T gamma + dl_dz, evaluated as W^T (act'(a) * gamma) + dl_dz.
class AdjointMap {
 public:
  AdjointMap(const DeqParams& p, const Vector& z_star, const Vector& x, const Vector& dl_dz)
      : p_(&p), slope_(preactivation(p, z_star, x)), dl_dz_(dl_dz) {
    if (dl_dz.size() != p.d_z()) throw DimensionError("adjoint: dl_dz length != d_z");
    for (double& v : slope_) v = activate_derivative(p.activation, v);
  }

  Vector operator()(const Vector& gamma) const {
    Vector scaled = gamma;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= slope_[i];
    Vector out = matvec_transposed(p_->W, scaled);
    out += dl_dz_;
    return out;
  }

 private:
  const DeqParams* p_;
  Vector slope_;
  Vector dl_dz_;
};

// Solves gamma = J^T gamma + dl_dz from gamma = 0. z_star need not be
// converged; fixed-budget clients still take gradients at their estimate.
inline FixedPointResult solve_adjoint(const DeqParams& p, const Vector& z_star, const Vector& x, const Vector& dl_dz,
                                      const SolverConfig& cfg, IterateTrace* trace = nullptr) {
  return fixed_point(AdjointMap(p, z_star, x, dl_dz), Vector(p.d_z()), cfg, trace);
}

// (df/dtheta)^T gamma*: with delta = act'(a) * gamma*,
// dW = delta z*^T, dU = delta x^T, db = delta.
inline DeqGradient param_gradient(const DeqParams& p, const Vector& z_star, const Vector& x, const Vector& gamma_star) {
  if (gamma_star.size() != p.d_z()) throw DimensionError("param_gradient: gamma length != d_z");
  Vector delta = preactivation(p, z_star, x);
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = activate_derivative(p.activation, delta[i]) * gamma_star[i];
  DeqGradient g{Matrix(p.d_z(), p.d_z()), Matrix(p.d_z(), p.d_x()), delta};
  g.dW.add_outer(1.0, delta, z_star);
  g.dU.add_outer(1.0, delta, x);
  return g;
}

// Rescales W so its spectral norm is at most `bound`. Returns the factor applied.
inline double clip_spectral_norm(Matrix& W, double bound) {
  const double sigma = spectral_norm(W);
  if (sigma <= bound || sigma == 0.0) return 1.0;
  const double factor = bound / sigma;
  W *= factor;
  return factor;
}

}  // namespace deqfl
