#pragma once

// Classifiers built on the equilibrium layer: z* -> head_W z* + head_b ->
// softmax cross-entropy. ExplicitWeightTiedNet is the same parameter set
// applied a fixed number of times, trained by ordinary backpropagation
// through every application; it serves as the comparison model and as the
// oracle for the implicit gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deqfl/deq.hpp"
#include "deqfl/errors.hpp"
#include "deqfl/linalg.hpp"
#include "deqfl/rng.hpp"

namespace deqfl {

struct Example {
  Vector x;
  std::size_t label = 0;
};

struct DeqClassifier {
  DeqParams deq;
  Matrix head_W;  // C x d_z
  Vector head_b;  // C
  SolverConfig solver;

  std::size_t classes() const noexcept { return head_W.rows(); }

  void validate() const {
    deq.validate();
    if (head_W.cols() != deq.d_z()) throw DimensionError("DeqClassifier: head_W cols must equal d_z");
    if (head_W.rows() == 0) throw DimensionError("DeqClassifier: need at least one class");
    if (head_b.size() != head_W.rows()) throw DimensionError("DeqClassifier: head_b length must equal C");
    solver.validate();
  }
};

struct ClassifierGradient {
  DeqGradient deq;
  Matrix head_W;
  Vector head_b;

  static ClassifierGradient zeros_like(const DeqParams& p, std::size_t classes) {
    return {DeqGradient{Matrix(p.d_z(), p.d_z()), Matrix(p.d_z(), p.d_x()), Vector(p.d_z())},
            Matrix(classes, p.d_z()), Vector(classes)};
  }

  void accumulate(const DeqGradient& g) {
    deq.dW += g.dW;
    deq.dU += g.dU;
    deq.db += g.db;
  }

  void scale(double s) {
    deq.dW *= s;
    deq.dU *= s;
    deq.db *= s;
    head_W *= s;
    head_b *= s;
  }
};

struct LossValue {
  double value = 0.0;  // mean cross-entropy, nats
};

// Numerically stable -log softmax(logits)[label].
inline LossValue cross_entropy(const Vector& logits, std::size_t label) {
  if (label >= logits.size())
    throw DimensionError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(logits.size()) + " classes");
  const double peak = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - peak);
  return {std::log(sum) + peak - logits[label]};
}

inline Vector softmax(const Vector& logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - peak));
  p *= 1.0 / sum;
  return p;
}

inline Vector apply_head(const Matrix& head_W, const Vector& head_b, const Vector& z) {
  Vector logits = matvec(head_W, z);
  logits += head_b;
  return logits;
}

struct ForwardOutput {
  Vector logits;
  FixedPointResult diag;
};

inline ForwardOutput forward(const DeqClassifier& model, const Vector& x) {
  FixedPointResult fp = solve_forward(model.deq, x, model.solver);
  Vector logits = apply_head(model.head_W, model.head_b, fp.z_star);
  return {std::move(logits), std::move(fp)};
}

inline std::size_t predict(const DeqClassifier& model, const Vector& x) {
  const Vector logits = forward(model, x).logits;
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

struct LossAndGrad {
  LossValue loss;
  ClassifierGradient grad;
  std::vector<double> forward_residuals;  // one per sample, batch order
  std::size_t degenerate_alpha_solves = 0;
};

namespace detail {

// softmax(logits) - onehot(label)
inline Vector logit_gradient(const Vector& logits, std::size_t label) {
  Vector g = softmax(logits);
  g[label] -= 1.0;
  return g;
}

inline DivergenceError tag_sample(const DivergenceError& e, std::size_t sample) {
  return DivergenceError(e.iteration(), "sample " + std::to_string(sample) + ": " + e.what());
}

}  // namespace detail

// Mean loss and gradient over the batch. Per-sample gradients are reduced in
// index order, so the result does not depend on evaluation order.
inline LossAndGrad loss_and_grad(const DeqClassifier& model, std::span<const Example> batch) {
  if (batch.empty()) throw Error("loss_and_grad: empty batch");
  LossAndGrad out{{}, ClassifierGradient::zeros_like(model.deq, model.classes()), {}, 0};
  out.forward_residuals.reserve(batch.size());
  double total = 0.0;

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example& ex = batch[i];
    try {
      ForwardOutput fwd = forward(model, ex.x);
      total += cross_entropy(fwd.logits, ex.label).value;
      const Vector dlogits = detail::logit_gradient(fwd.logits, ex.label);
      const Vector& z = fwd.diag.z_star;
      out.grad.head_W.add_outer(1.0, dlogits, z);
      out.grad.head_b += dlogits;

      const Vector dl_dz = matvec_transposed(model.head_W, dlogits);
      const FixedPointResult adj = solve_adjoint(model.deq, z, ex.x, dl_dz, model.solver);
      out.grad.accumulate(param_gradient(model.deq, z, ex.x, adj.z_star));
      out.forward_residuals.push_back(fwd.diag.residual);
      out.degenerate_alpha_solves += fwd.diag.degenerate_alpha_solves + adj.degenerate_alpha_solves;
    } catch (const DivergenceError& e) {
      throw detail::tag_sample(e, i);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss.value = total * inv;
  out.grad.scale(inv);
  return out;
}

inline double mean_loss(const DeqClassifier& model, std::span<const Example> batch) {
  double total = 0.0;
  for (const Example& ex : batch) total += cross_entropy(forward(model, ex.x).logits, ex.label).value;
  return total / static_cast<double>(batch.size());
}

inline double accuracy(const DeqClassifier& model, std::span<const Example> data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const Example& ex : data) hits += predict(model, ex.x) == ex.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

struct ExplicitWeightTiedNet {
  DeqParams deq;
  Matrix head_W;
  Vector head_b;
  std::size_t depth = 1;

  static ExplicitWeightTiedNet from(const DeqClassifier& m, std::size_t depth) {
    if (depth < 1) throw Error("ExplicitWeightTiedNet: depth must be >= 1");
    return {m.deq, m.head_W, m.head_b, depth};
  }
};

// depth applications of f from z = 0, then the head.
inline Vector explicit_forward(const ExplicitWeightTiedNet& net, const Vector& x) {
  if (net.depth < 1) throw Error("explicit_forward: depth must be >= 1");
  const ForwardMap f(net.deq, x);
  Vector z(net.deq.d_z());
  for (std::size_t i = 0; i < net.depth; ++i) z = f(z);
  return apply_head(net.head_W, net.head_b, z);
}

struct ExplicitLossAndGrad {
  LossValue loss;
  ClassifierGradient grad;
};

// Reverse-mode through every layer application; each application's
// contribution to W, U, b is summed into the shared parameters.
inline ExplicitLossAndGrad explicit_backward(const ExplicitWeightTiedNet& net, std::span<const Example> batch) {
  if (batch.empty()) throw Error("explicit_backward: empty batch");
  if (net.depth < 1) throw Error("explicit_backward: depth must be >= 1");
  const DeqParams& p = net.deq;
  ExplicitLossAndGrad out{{}, ClassifierGradient::zeros_like(p, net.head_W.rows())};
  double total = 0.0;

  std::vector<Vector> states;  // z_0 .. z_K
  std::vector<Vector> pre;     // a_1 .. a_K
  for (const Example& ex : batch) {
    states.assign(1, Vector(p.d_z()));
    pre.clear();
    const Vector injection = detail::input_injection(p, ex.x);
    for (std::size_t i = 0; i < net.depth; ++i) {
      Vector a = matvec(p.W, states.back());
      a += injection;
      Vector z = a;
      for (double& v : z) v = activate(p.activation, v);
      pre.push_back(std::move(a));
      states.push_back(std::move(z));
    }
    const Vector logits = apply_head(net.head_W, net.head_b, states.back());
    total += cross_entropy(logits, ex.label).value;
    const Vector dlogits = detail::logit_gradient(logits, ex.label);
    out.grad.head_W.add_outer(1.0, dlogits, states.back());
    out.grad.head_b += dlogits;

    Vector upstream = matvec_transposed(net.head_W, dlogits);
    for (std::size_t i = net.depth; i-- > 0;) {
      Vector delta = upstream;
      for (std::size_t r = 0; r < delta.size(); ++r) delta[r] *= activate_derivative(p.activation, pre[i][r]);
      out.grad.deq.dW.add_outer(1.0, delta, states[i]);
      out.grad.deq.dU.add_outer(1.0, delta, ex.x);
      out.grad.deq.db += delta;
      upstream = matvec_transposed(p.W, delta);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss.value = total * inv;
  out.grad.scale(inv);
  return out;
}

// Scalar-parameter counts. The transformation (W, U, b) is M; the head is H.
// A weight-tied net of any depth shares one copy of M; an untied K-layer
// net holds K copies.
struct ParamCount {
  std::size_t transform = 0;
  std::size_t head = 0;

  std::size_t total() const noexcept { return transform + head; }
  std::size_t untied(std::size_t depth) const noexcept { return depth * transform + head; }
  // (M + H) / (K M + H)
  double ratio_vs_untied(std::size_t depth) const noexcept {
    return static_cast<double>(total()) / static_cast<double>(untied(depth));
  }
  double reduction_vs_untied(std::size_t depth) const noexcept { return 1.0 - ratio_vs_untied(depth); }
};

inline ParamCount count_params(std::size_t d_z, std::size_t d_x, std::size_t classes) {
  return {d_z * d_z + d_z * d_x + d_z, classes * d_z + classes};
}

inline ParamCount count_params(const DeqClassifier& m) {
  return count_params(m.deq.d_z(), m.deq.d_x(), m.classes());
}

inline ParamCount count_params(const ExplicitWeightTiedNet& n) {
  return count_params(n.deq.d_z(), n.deq.d_x(), n.head_W.rows());
}

// Flat parameter vector in the order W, U, b, head_W, head_b (row-major).
// This is the unit transmitted and averaged by the federation.
using ParamVector = std::vector<double>;

inline ParamVector flatten(const DeqClassifier& m) {
  ParamVector v;
  v.reserve(count_params(m).total());
  for (auto part : {m.deq.W.values(), m.deq.U.values(), m.deq.b.values(), m.head_W.values(), m.head_b.values()})
    v.insert(v.end(), part.begin(), part.end());
  return v;
}

inline ParamVector flatten(const ClassifierGradient& g) {
  ParamVector v;
  for (auto part : {g.deq.dW.values(), g.deq.dU.values(), g.deq.db.values(), g.head_W.values(), g.head_b.values()})
    v.insert(v.end(), part.begin(), part.end());
  return v;
}

// Writes `flat` back into the parameter arrays of `m` (shapes unchanged).
inline void unflatten_into(DeqClassifier& m, std::span<const double> flat) {
  if (flat.size() != count_params(m).total())
    throw DimensionError("unflatten: expected " + std::to_string(count_params(m).total()) + " values, got " +
                         std::to_string(flat.size()));
  std::size_t off = 0;
  for (std::span<double> part : {m.deq.W.values(), m.deq.U.values(), m.deq.b.values(), m.head_W.values(),
                                 m.head_b.values()}) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), part.size(), part.begin());
    off += part.size();
  }
}

// theta <- theta - lr * grad
inline void sgd_step(DeqClassifier& m, const ClassifierGradient& g, double lr) {
  auto step = [lr](std::span<double> p, std::span<const double> d) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * d[i];
  };
  step(m.deq.W.values(), g.deq.dW.values());
  step(m.deq.U.values(), g.deq.dU.values());
  step(m.deq.b.values(), g.deq.db.values());
  step(m.head_W.values(), g.head_W.values());
  step(m.head_b.values(), g.head_b.values());
}

struct ModelDims {
  std::size_t d_z = 16;
  std::size_t d_x = 2;
  std::size_t classes = 3;
  Activation activation = Activation::tanh;
  std::optional<double> spectral_clip;  // bound on ||W||_2 after init

  void validate() const {
    if (d_z < 1) throw ConfigError("model.d_z", "must be >= 1");
    if (d_x < 1) throw ConfigError("model.d_x", "must be >= 1");
    if (classes < 2) throw ConfigError("model.classes", "must be >= 2");
    if (spectral_clip && !(*spectral_clip > 0.0)) throw ConfigError("model.spectral_clip", "must be > 0");
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

// W ~ U(-1/sqrt(d_z), 1/sqrt(d_z)), optionally clipped; U and head_W
// Xavier-uniform; biases zero. Deterministic in `seed`.
inline DeqClassifier init_classifier(const ModelDims& dims, const SolverConfig& solver, std::uint64_t seed) {
  dims.validate();
  Rng rng(seed, StreamPurpose::init);
  auto fill = [&rng](Matrix& m, double bound) {
    for (double& v : m.values()) v = rng.uniform(-bound, bound);
  };
  DeqClassifier m{DeqParams{Matrix(dims.d_z, dims.d_z), Matrix(dims.d_z, dims.d_x), Vector(dims.d_z), dims.activation},
                  Matrix(dims.classes, dims.d_z), Vector(dims.classes), solver};
  fill(m.deq.W, 1.0 / std::sqrt(static_cast<double>(dims.d_z)));
  fill(m.deq.U, std::sqrt(6.0 / static_cast<double>(dims.d_z + dims.d_x)));
  fill(m.head_W, std::sqrt(6.0 / static_cast<double>(dims.classes + dims.d_z)));
  if (dims.spectral_clip) clip_spectral_norm(m.deq.W, *dims.spectral_clip);
  return m;
}

}  // namespace deqfl
