// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "deqfl/config.hpp"
#include "deqfl/deqfl.hpp"
#include "deqfl/metrics_io.hpp"
#include "oracles.hpp"

using namespace deqfl;
namespace t = deqfl::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  GradCheckOptions opt;  // d_z 8, d_x 4, C 3, clip 0.9, tol 1e-10, 20 seeds, 100-step unroll
  const GradCheckReport r = run_gradcheck(opt);
  const double secs = seconds_since(t0);
  const bool ok = r.cases.size() >= 20 && r.max_fd_rel_error <= 1e-4 && r.max_unrolled_rel_error <= 1e-3 && secs < 10;
  return {ok, fmt("instances=%zu max_fd=%.2e max_unrolled=%.2e time=%.2fs", r.cases.size(), r.max_fd_rel_error,
                  r.max_unrolled_rel_error, secs)};
}

Outcome solver_correctness() {
  const auto t0 = Clock::now();
  const double tol = 1e-8;
  SolverConfig picard{100000, tol, 5, 1.0, 1e-8, SolverMethod::picard};
  SolverConfig anderson = picard;
  anderson.method = SolverMethod::anderson;
  std::size_t within = 0, anderson_no_worse = 0;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s, StreamPurpose::test, 2);
    const std::size_t d_z = 4 + rng.below(13), d_x = 1 + rng.below(6);
    const double norm = rng.uniform(0.1, 0.9);
    const DeqParams p = t::random_params(1000 + s, d_z, d_x, Activation::identity, norm);
    const Vector x = t::random_vector(rng, d_x);
    const Vector expected = t::closed_form_linear_fixed_point(p, x);
    const auto a = solve_forward(p, x, picard);
    const auto b = solve_forward(p, x, anderson);
    const double ea = max_abs_diff(a.z_star, expected), eb = max_abs_diff(b.z_star, expected);
    worst = std::max({worst, ea, eb});
    within += a.converged && b.converged && norm2(a.z_star - expected) <= 10 * tol && norm2(b.z_star - expected) <= 10 * tol;
    anderson_no_worse += b.iters_used <= a.iters_used;
  }
  const double secs = seconds_since(t0);
  return {within == 100 && anderson_no_worse >= 90 && secs < 5,
          fmt("within_10tol=%zu/100 anderson<=picard=%zu/100 worst_abs_err=%.2e time=%.2fs", within, anderson_no_worse,
              worst, secs)};
}

Outcome anderson_degenerates() {
  double worst = 0.0;
  bool lengths_match = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const DeqParams p = t::random_params(2000 + s, 6 + s % 5, 3, s % 2 ? Activation::tanh : Activation::identity, 0.8);
    Rng rng(s, StreamPurpose::test, 3);
    const Vector x = t::random_vector(rng, p.d_x());
    SolverConfig cfg{60, 1e-12, 1, 1.0, 1e-8, SolverMethod::anderson};
    IterateTrace ta, tp;
    solve_anderson(p, x, Vector(p.d_z()), cfg, &ta);
    solve_picard(p, x, Vector(p.d_z()), cfg, &tp);
    lengths_match = lengths_match && ta.size() == tp.size();
    for (std::size_t i = 0; i < std::min(ta.size(), tp.size()); ++i) worst = std::max(worst, max_abs_diff(ta[i], tp[i]));
  }
  return {lengths_match && worst <= 1e-14, fmt("instances=20 max_iterate_diff=%.2e", worst)};
}

Outcome fusion_algebra() {
  double eq_uniform = 0.0;
  bool scaling = true, perm = true;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s, StreamPurpose::test, 4);
    const std::size_t n = 2 + rng.below(14), dim = 1 + rng.below(60);
    std::vector<ParamVector> ups(n, ParamVector(dim));
    for (auto& u : ups)
      for (double& v : u) v = rng.normal() * 3.0;
    std::vector<std::size_t> k(n);
    for (auto& v : k) v = 1 + rng.below(20);

    const std::vector<std::size_t> equal(n, 1 + rng.below(20));
    const auto a = aggregate_weighted_k(ups, equal), b = aggregate_fedavg_uniform(ups);
    for (std::size_t i = 0; i < dim; ++i) eq_uniform = std::max(eq_uniform, std::abs(a[i] - b[i]));

    const auto base = aggregate_weighted_k(ups, k);
    std::vector<std::size_t> k3(k);
    for (auto& v : k3) v *= 3;
    scaling = scaling && aggregate_weighted_k(ups, k3) == base;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<ParamVector> pu;
    std::vector<std::size_t> pk;
    for (auto i : order) {
      pu.push_back(ups[i]);
      pk.push_back(k[i]);
    }
    perm = perm && aggregate_weighted_k(pu, pk) == base;
  }
  return {eq_uniform <= 1e-15 && scaling && perm,
          fmt("equal_k_vs_uniform=%.2e scaling_exact=%d permutation_exact=%d", eq_uniform, scaling, perm)};
}

Outcome communication_accounting() {
  bool ratio = true, grows = true;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(s, StreamPurpose::test, 5);
    const std::size_t d_z = 1 + rng.below(64), d_x = 1 + rng.below(800), C = 2 + rng.below(9);
    const std::size_t K = 2 + rng.below(20);
    const ParamCount pc = count_params(d_z, d_x, C);
    // Independent counts: M = d_z^2 + d_z d_x + d_z, H = C d_z + C.
    const std::size_t M = d_z * d_z + d_z * d_x + d_z, H = C * d_z + C;
    ratio = ratio && pc.transform == M && pc.head == H && pc.total() == M + H && pc.untied(K) == K * M + H &&
            pc.ratio_vs_untied(K) == static_cast<double>(M + H) / static_cast<double>(K * M + H);
    for (std::size_t k = 1; k < 30; ++k) grows = grows && pc.reduction_vs_untied(k + 1) > pc.reduction_vs_untied(k);
  }
  return {ratio && grows, fmt("ratio_exact=%d reduction_increasing_in_K=%d", ratio, grows)};
}

ExperimentConfig bundled(const char* name) { return load_config(std::string(DEQFL_SOURCE_DIR) + "/configs/" + name); }

struct RunResult {
  double accuracy;
  std::size_t rows;
  std::string csv;
  double seconds;
  std::size_t train, test;
};

RunResult run(const ExperimentConfig& cfg) {
  const auto t0 = Clock::now();
  const Experiment e = prepare_experiment(cfg);
  const FederatedRun r = run_federated(e.federation, e.train, e.partition, e.test, e.model0);
  const double secs = seconds_since(t0);
  std::ostringstream csv;
  write_metrics_csv(csv, r.rounds);
  return {r.rounds.back().global_test_accuracy, r.rounds.size(), csv.str(), secs, e.train.size(), e.test.size()};
}

bool matches_iid_setup(const ExperimentConfig& c) {
  return c.clients == 15 && c.rounds == 90 && c.epochs == 5 && c.batch_size == 32 && c.blobs && c.blobs->classes == 3 &&
         c.partition.scheme == PartitionScheme::iid;
}

RunResult iid_run;  // shared with the determinism criterion

Outcome iid_experiment() {
  const ExperimentConfig cfg = bundled("iid_blobs.json");
  const bool fixed_k = std::all_of(cfg.k.begin(), cfg.k.end(), [](std::size_t k) { return k == 10; });
  iid_run = run(cfg);
  const auto csv_rows = std::count(iid_run.csv.begin(), iid_run.csv.end(), '\n') - 1;
  const bool ok = matches_iid_setup(cfg) && fixed_k && iid_run.train == 600 && iid_run.test == 150 &&
                  iid_run.accuracy >= 0.90 && iid_run.seconds < 120 && csv_rows == 90;
  return {ok, fmt("train=%zu test=%zu final_accuracy=%.4f csv_rows=%td time=%.2fs", iid_run.train, iid_run.test,
                  iid_run.accuracy, csv_rows, iid_run.seconds)};
}

Outcome heterogeneity() {
  const ExperimentConfig homo = bundled("iid_blobs.json");
  ExperimentConfig hetero = bundled("heterogeneous_blobs.json");
  const auto slow = std::count(hetero.k.begin(), hetero.k.end(), std::size_t{3});
  const bool setup = matches_iid_setup(hetero) && hetero.aggregation == Aggregation::weighted_k && slow == 6 &&
                     hetero.k.size() == 15;
  double sum_homo = 0.0, sum_hetero = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    ExperimentConfig a = homo, b = hetero;
    a.seed = b.seed = homo.seed + s;
    sum_homo += run(a).accuracy;
    sum_hetero += run(b).accuracy;
  }
  const double gap = std::abs(sum_homo - sum_hetero) / 5.0;
  return {setup && gap <= 0.02,
          fmt("seeds=5 mean_homogeneous=%.4f mean_heterogeneous=%.4f gap=%.4f", sum_homo / 5, sum_hetero / 5, gap)};
}

Outcome non_iid_partitioner() {
  const ExperimentConfig cfg = bundled("dirichlet_blobs.json");
  std::size_t strictly_higher = 0, valid = 0;
  double tv_low = 0.0, tv_high = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Dataset d = gen_blobs(cfg.blobs->classes, cfg.blobs->per_class, cfg.blobs->dim, cfg.blobs->spread, 500 + s);
    const Partition skewed = partition_dirichlet(d, cfg.clients, 0.25, 700 + s);
    const Partition flat = partition_dirichlet(d, cfg.clients, 100.0, 700 + s);
    bool ok = true;
    for (const Partition* p : {&skewed, &flat}) {
      // Each index assigned exactly once, no empty client.
      std::vector<int> seen(d.size(), 0);
      for (const auto& a : p->assignments) {
        ok = ok && !a.empty();
        for (auto i : a) ok = ok && i < d.size() && ++seen[i] == 1;
      }
      ok = ok && std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; }) && p->clients() == cfg.clients;
    }
    valid += ok;
    const double a = mean_client_tv(d, skewed), b = mean_client_tv(d, flat);
    tv_low += a;
    tv_high += b;
    strictly_higher += a > b;
  }
  return {strictly_higher == 20 && valid == 20,
          fmt("draws=20 tv(0.25)>tv(100)=%zu/20 invariants=%zu/20 mean_tv(0.25)=%.4f mean_tv(100)=%.4f",
              strictly_higher, valid, tv_low / 20, tv_high / 20)};
}

Outcome determinism() {
  ExperimentConfig cfg = bundled("iid_blobs.json");
  cfg.threads = 1;
  const RunResult serial = run(cfg);
  cfg.threads = 4;
  const RunResult parallel = run(cfg);
  const bool same = !serial.csv.empty() && serial.csv == parallel.csv && (iid_run.csv.empty() || iid_run.csv == serial.csv);
  return {same, fmt("threads1_vs_threads4_identical=%d bytes=%zu", same, serial.csv.size())};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"implicit gradient correctness", gradient_correctness},
      {"solver correctness", solver_correctness},
      {"anderson m=1 degenerates to picard", anderson_degenerates},
      {"fusion rule algebra", fusion_algebra},
      {"communication accounting", communication_accounting},
      {"iid blobs experiment", iid_experiment},
      {"heterogeneity resilience", heterogeneity},
      {"non-iid partitioner", non_iid_partitioner},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o{false, ""};
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %zu. %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed ? 1 : 0;
}
