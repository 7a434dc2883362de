#pragma once

// Federated training of DEQ classifiers: per-client local SGD with a
// per-client fixed-point budget k_n, server-side fusion, and per-round
// metrics including communication volume.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "deqfl/data.hpp"
#include "deqfl/errors.hpp"
#include "deqfl/model.hpp"
#include "deqfl/rng.hpp"

namespace deqfl {

struct ClientConfig {
  std::size_t id = 0;
  std::size_t k_n = 10;  // fixed-point iterations, forward and backward
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 0.05;

  void validate() const {
    const std::string at = "clients[" + std::to_string(id) + "].";
    if (k_n < 1) throw ConfigError(at + "k", "must be >= 1");
    if (epochs < 1) throw ConfigError(at + "epochs", "must be >= 1");
    if (batch_size < 1) throw ConfigError(at + "batch_size", "must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError(at + "lr", "must be finite and >= 0");
  }

  friend bool operator==(const ClientConfig&, const ClientConfig&) = default;
};

enum class Aggregation { fedavg_uniform, fedavg_sized, weighted_k };

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::fedavg_uniform: return "fedavg_uniform";
    case Aggregation::fedavg_sized: return "fedavg_sized";
    case Aggregation::weighted_k: return "weighted_k";
  }
  return "unknown";
}

inline Aggregation aggregation_from_string(std::string_view s) {
  if (s == "fedavg_uniform") return Aggregation::fedavg_uniform;
  if (s == "fedavg_sized") return Aggregation::fedavg_sized;
  if (s == "weighted_k") return Aggregation::weighted_k;
  throw ConfigError("aggregation", "unknown rule '" + std::string(s) + "'");
}

struct FederationConfig {
  std::size_t rounds = 1;
  Aggregation aggregation = Aggregation::weighted_k;
  std::vector<ClientConfig> clients;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // A forward solve counts as non-converged when its final residual exceeds
  // this; local training itself runs fixed-count.
  double report_tol = 1e-3;
  // Iteration budget for evaluating the global model on the test set.
  std::size_t eval_iters = 10;
  // Off keeps the CSV wall_ms column at 0 so output is byte-reproducible.
  bool record_wall_time = false;

  std::size_t client_count() const noexcept { return clients.size(); }

  void validate() const {
    if (rounds < 1) throw ConfigError("rounds", "must be >= 1");
    if (clients.empty()) throw ConfigError("clients", "need at least one client");
    for (const auto& c : clients) c.validate();
    if (threads < 1) throw ConfigError("threads", "must be >= 1");
    if (!(report_tol > 0.0)) throw ConfigError("report_tol", "must be > 0");
    if (eval_iters < 1) throw ConfigError("eval_iters", "must be >= 1");
  }
};

struct RoundMetrics {
  std::size_t round = 0;  // 1-based
  double global_test_accuracy = 0.0;
  double mean_client_train_loss = 0.0;
  std::size_t params_transmitted = 0;
  std::size_t nonconverged_solves = 0;
  std::vector<std::size_t> per_client_k;
  double wall_ms = 0.0;
};

struct LocalStats {
  double mean_loss = 0.0;  // mean minibatch loss over all local steps
  std::size_t forward_solves = 0;
  std::size_t nonconverged_solves = 0;
  std::size_t steps = 0;
};

struct LocalUpdate {
  DeqClassifier model;
  LocalStats stats;
};

// E epochs of minibatch SGD on the client's shard, starting from `global`.
// The solver runs exactly k_n iterations (tol = 0) in both passes. Batch
// order is reshuffled every epoch from a stream keyed on (round_seed, id).
inline LocalUpdate local_update(const DeqClassifier& global, std::span<const Example> shard, const ClientConfig& cfg,
                                std::uint64_t round_seed, double report_tol = 1e-3) {
  if (shard.empty()) throw Error("local_update: client " + std::to_string(cfg.id) + " has an empty shard");
  cfg.validate();
  DeqClassifier model = global;
  model.solver.max_iters = cfg.k_n;
  model.solver.tol = 0.0;

  Rng rng(round_seed, StreamPurpose::batching, cfg.id);
  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Example> batch;
  LocalStats stats;
  double loss_sum = 0.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(shard[order[i]]);
      LossAndGrad lg;
      try {
        lg = loss_and_grad(model, batch);
      } catch (const DivergenceError& e) {
        throw DivergenceError(e.iteration(), "client " + std::to_string(cfg.id) + ": " + e.what());
      }
      sgd_step(model, lg.grad, cfg.lr);
      loss_sum += lg.loss.value;
      ++stats.steps;
      stats.forward_solves += lg.forward_residuals.size();
      stats.nonconverged_solves += static_cast<std::size_t>(std::count_if(
          lg.forward_residuals.begin(), lg.forward_residuals.end(), [report_tol](double r) { return r > report_tol; }));
    }
  }
  stats.mean_loss = loss_sum / static_cast<double>(stats.steps);
  model.solver = global.solver;
  return {std::move(model), stats};
}

namespace detail {

// sum_n w_n theta_n with w normalized. Terms are added in a canonical order
// (by weight, then parameter values) so the result does not depend on how
// the updates were listed. Each component is clamped to the hull of its
// inputs, which rounding can otherwise leave by an ulp.
inline ParamVector convex_combination(std::span<const ParamVector> updates, std::span<const double> weights) {
  if (updates.empty()) throw Error("aggregate: no updates");
  if (updates.size() != weights.size()) throw DimensionError("aggregate: weight count != update count");
  const std::size_t dim = updates.front().size();
  for (const auto& u : updates)
    if (u.size() != dim) throw DimensionError("aggregate: update shapes differ");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error("aggregate: weights must be finite and non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw Error("aggregate: all weights are zero");

  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (weights[a] != weights[b]) return weights[a] < weights[b];
    return updates[a] < updates[b];
  });

  ParamVector out(dim, 0.0);
  for (std::size_t n : order) {
    const double w = weights[n] / total;
    const auto& u = updates[n];
    for (std::size_t i = 0; i < dim; ++i) out[i] += w * u[i];
  }
  for (std::size_t i = 0; i < dim; ++i) {
    double lo = updates.front()[i], hi = lo;
    for (const auto& u : updates) {
      lo = std::min(lo, u[i]);
      hi = std::max(hi, u[i]);
    }
    out[i] = std::clamp(out[i], lo, hi);
  }
  return out;
}

}  // namespace detail

// Weighted FedAvg; weights are normalized internally.
inline ParamVector aggregate_fedavg(std::span<const ParamVector> updates, std::span<const double> weights) {
  return detail::convex_combination(updates, weights);
}

inline ParamVector aggregate_fedavg_uniform(std::span<const ParamVector> updates) {
  const std::vector<double> w(updates.size(), 1.0);
  return detail::convex_combination(updates, w);
}

// theta_g = sum_n k_n theta_n / sum_n k_n
inline ParamVector aggregate_weighted_k(std::span<const ParamVector> updates, std::span<const std::size_t> k) {
  if (k.size() != updates.size()) throw DimensionError("aggregate_weighted_k: k count != update count");
  std::vector<double> w(k.size());
  for (std::size_t n = 0; n < k.size(); ++n) {
    if (k[n] < 1) throw Error("aggregate_weighted_k: k_n must be >= 1");
    w[n] = static_cast<double>(k[n]);
  }
  return detail::convex_combination(updates, w);
}

struct CommCost {
  std::size_t params = 0;
  std::size_t bytes = 0;  // 8 bytes per parameter, uncompressed
};

// One downlink and one uplink per client per round.
inline CommCost comm_cost(const ParamCount& model, std::size_t clients, std::size_t rounds) {
  const std::size_t params = 2 * clients * rounds * model.total();
  return {params, 8 * params};
}

struct FederatedRun {
  std::vector<RoundMetrics> rounds;
  DeqClassifier final_model;
};

inline std::uint64_t round_seed(std::uint64_t seed, std::size_t round) {
  return derive_seed(seed, StreamPurpose::batching, round);
}

// Full-participation rounds: broadcast, local_update on every client (in
// parallel when threads > 1), barrier, fusion, test evaluation. Client
// results are stored by client index, so output is independent of thread
// count and scheduling.
inline FederatedRun run_federated(const FederationConfig& cfg, const Dataset& train, const Partition& partition,
                                  const Dataset& test, const DeqClassifier& model0,
                                  const std::function<void(const RoundMetrics&)>& on_round = {}) {
  cfg.validate();
  model0.validate();
  const std::size_t n_clients = cfg.client_count();
  if (partition.clients() != n_clients)
    throw ConfigError("clients", "partition has " + std::to_string(partition.clients()) + " shards for " +
                                     std::to_string(n_clients) + " clients");
  partition.validate(train.size());

  std::vector<std::vector<Example>> shards(n_clients);
  for (std::size_t c = 0; c < n_clients; ++c) shards[c] = train.examples(partition.assignments[c]);
  const std::vector<Example> test_set = test.examples();
  std::vector<double> sizes(n_clients);
  for (std::size_t c = 0; c < n_clients; ++c) sizes[c] = static_cast<double>(shards[c].size());
  std::vector<std::size_t> ks(n_clients);
  for (std::size_t c = 0; c < n_clients; ++c) ks[c] = cfg.clients[c].k_n;

  const std::size_t per_round = comm_cost(count_params(model0), n_clients, 1).params;
  FederatedRun run{{}, model0};
  DeqClassifier& global = run.final_model;

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    const auto started = std::chrono::steady_clock::now();
    const std::uint64_t rseed = round_seed(cfg.seed, t);
    std::vector<std::optional<LocalUpdate>> results(n_clients);
    std::vector<std::exception_ptr> errors(n_clients);

    auto work = [&](std::size_t c) {
      try {
        results[c] = local_update(global, shards[c], cfg.clients[c], rseed, cfg.report_tol);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    };
    const std::size_t workers = std::min(cfg.threads, n_clients);
    if (workers <= 1) {
      for (std::size_t c = 0; c < n_clients; ++c) work(c);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
          for (std::size_t c = next.fetch_add(1); c < n_clients; c = next.fetch_add(1)) work(c);
        });
    }
    for (std::size_t c = 0; c < n_clients; ++c) {
      if (!errors[c]) continue;
      try {
        std::rethrow_exception(errors[c]);
      } catch (const DivergenceError& e) {
        throw DivergenceError(e.iteration(), "round " + std::to_string(t) + ": " + e.what());
      } catch (const std::exception& e) {
        throw Error("round " + std::to_string(t) + ", client " + std::to_string(c) + ": " + e.what());
      }
    }

    std::vector<ParamVector> updates(n_clients);
    RoundMetrics m;
    m.round = t;
    m.per_client_k = ks;
    double loss_sum = 0.0;
    for (std::size_t c = 0; c < n_clients; ++c) {
      updates[c] = flatten(results[c]->model);
      loss_sum += results[c]->stats.mean_loss;
      m.nonconverged_solves += results[c]->stats.nonconverged_solves;
    }
    ParamVector fused;
    switch (cfg.aggregation) {
      case Aggregation::fedavg_uniform: fused = aggregate_fedavg_uniform(updates); break;
      case Aggregation::fedavg_sized: fused = aggregate_fedavg(updates, sizes); break;
      case Aggregation::weighted_k: fused = aggregate_weighted_k(updates, ks); break;
    }
    unflatten_into(global, fused);

    DeqClassifier evaluator = global;
    evaluator.solver.max_iters = cfg.eval_iters;
    evaluator.solver.tol = 0.0;
    m.global_test_accuracy = accuracy(evaluator, test_set);
    m.mean_client_train_loss = loss_sum / static_cast<double>(n_clients);
    m.params_transmitted = per_round;
    if (cfg.record_wall_time)
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    if (on_round) on_round(m);
    run.rounds.push_back(std::move(m));
  }
  return run;
}

}  // namespace deqfl
