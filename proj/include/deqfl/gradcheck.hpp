#pragma once

// Gradient-check harness for the implicit backward pass. For each seed a
// random contractive tanh model and one labeled sample are drawn; the
// implicit gradient is compared with
//   * central finite differences of the loss, where each loss evaluation
//     solves the forward equation by plain Picard iteration to 1e-13, and
//   * backpropagation through a fixed number of explicit layer applications.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "deqfl/deq.hpp"
#include "deqfl/linalg.hpp"
#include "deqfl/model.hpp"
#include "deqfl/rng.hpp"

namespace deqfl {

struct GradCheckOptions {
  std::size_t d_z = 8;
  std::size_t d_x = 4;
  std::size_t classes = 3;
  std::size_t seeds = 20;
  std::uint64_t base_seed = 1;
  double spectral_clip = 0.9;
  double tol = 1e-10;
  double fd_step = 1e-5;
  std::size_t unroll_depth = 100;
  double fd_threshold = 1e-4;
  double unrolled_threshold = 1e-3;
  // Test hook: multiplies the implicit dW before comparison.
  double corrupt_dw_scale = 1.0;
};

struct GradCheckCase {
  std::uint64_t seed = 0;
  double fd_rel_error = 0.0;
  double unrolled_rel_error = 0.0;
  bool forward_converged = false;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double max_fd_rel_error = 0.0;
  double max_unrolled_rel_error = 0.0;
  bool passed = false;
};

// ||a - b|| / max(||a||, ||b||), norm-wise over all parameters.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max({na, nb, 1e-300}));
  return std::sqrt(diff) / scale;
}

// Random tanh classifier with ||W||_2 <= clip, non-zero biases, and a
// tight Anderson solver for both passes.
inline DeqClassifier random_contractive_model(std::size_t d_z, std::size_t d_x, std::size_t classes, double clip,
                                              double tol, std::uint64_t seed) {
  SolverConfig solver;
  solver.method = SolverMethod::anderson;
  solver.tol = tol;
  solver.max_iters = 500;
  ModelDims dims{d_z, d_x, classes, Activation::tanh, clip};
  DeqClassifier m = init_classifier(dims, solver, seed);
  Rng rng(seed, StreamPurpose::test);
  for (double& v : m.deq.b.values()) v = rng.uniform(-0.5, 0.5);
  for (double& v : m.head_b.values()) v = rng.uniform(-0.5, 0.5);
  return m;
}

inline Example random_example(std::size_t d_x, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed, StreamPurpose::test, 1);
  Vector x(d_x);
  for (double& v : x.values()) v = rng.normal();
  return {std::move(x), static_cast<std::size_t>(rng.below(classes))};
}

// Loss with the forward equation solved by Picard iteration to 1e-13.
inline double reference_loss(const DeqClassifier& m, const std::vector<Example>& batch) {
  SolverConfig tight;
  tight.method = SolverMethod::picard;
  tight.tol = 1e-13;
  tight.max_iters = 20000;
  double total = 0.0;
  for (const Example& ex : batch) {
    const FixedPointResult fp = solve_picard(m.deq, ex.x, Vector(m.deq.d_z()), tight);
    total += cross_entropy(apply_head(m.head_W, m.head_b, fp.z_star), ex.label).value;
  }
  return total / static_cast<double>(batch.size());
}

inline std::vector<double> finite_difference_gradient(const DeqClassifier& m, const std::vector<Example>& batch,
                                                      double step) {
  const ParamVector theta = flatten(m);
  std::vector<double> g(theta.size());
  DeqClassifier probe = m;
  ParamVector shifted = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    shifted[i] = theta[i] + step;
    unflatten_into(probe, shifted);
    const double up = reference_loss(probe, batch);
    shifted[i] = theta[i] - step;
    unflatten_into(probe, shifted);
    const double down = reference_loss(probe, batch);
    shifted[i] = theta[i];
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline GradCheckReport run_gradcheck(const GradCheckOptions& opt) {
  GradCheckReport report;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    const std::uint64_t seed = opt.base_seed + s;
    const DeqClassifier m = random_contractive_model(opt.d_z, opt.d_x, opt.classes, opt.spectral_clip, opt.tol, seed);
    const std::vector<Example> batch{random_example(opt.d_x, opt.classes, seed)};

    LossAndGrad implicit = loss_and_grad(m, batch);
    implicit.grad.deq.dW *= opt.corrupt_dw_scale;
    const std::vector<double> g = flatten(implicit.grad);

    const std::vector<double> fd = finite_difference_gradient(m, batch, opt.fd_step);
    const auto unrolled = explicit_backward(ExplicitWeightTiedNet::from(m, opt.unroll_depth), batch);

    GradCheckCase c;
    c.seed = seed;
    c.fd_rel_error = relative_error(g, fd);
    c.unrolled_rel_error = relative_error(g, flatten(unrolled.grad));
    c.forward_converged = implicit.forward_residuals.front() <= opt.tol;
    report.max_fd_rel_error = std::max(report.max_fd_rel_error, c.fd_rel_error);
    report.max_unrolled_rel_error = std::max(report.max_unrolled_rel_error, c.unrolled_rel_error);
    report.cases.push_back(c);
  }
  report.passed = report.max_fd_rel_error <= opt.fd_threshold && report.max_unrolled_rel_error <= opt.unrolled_threshold;
  return report;
}

}  // namespace deqfl
