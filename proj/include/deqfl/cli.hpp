#pragma once

// Command-line driver. Subcommands:
//
//   run <config>        federated training; writes CSV metrics + JSON summary
//   gradcheck           implicit gradient vs finite differences and unrolled backprop
//   partition <config>  per-client sizes and label histograms
//   params <config>     parameter counts vs untied K-layer networks
//
// Global option --out-dir resolves relative output paths.
// Exit codes: 0 ok, 1 check failed, 2 config/usage error, 3 runtime/numeric error.
// Errors are reported as one line on stderr:
//   error: config: <field>: <message>
//   error: runtime: <message>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "deqfl/checkpoint.hpp"
#include "deqfl/config.hpp"
#include "deqfl/data.hpp"
#include "deqfl/errors.hpp"
#include "deqfl/federation.hpp"
#include "deqfl/gradcheck.hpp"
#include "deqfl/metrics_io.hpp"
#include "deqfl/model.hpp"

namespace deqfl::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kRuntimeError = 3 };

namespace detail {

inline std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::filesystem::path resolve(const std::string& out_dir, const std::string& p) {
  const std::filesystem::path path(p);
  if (path.is_absolute() || out_dir.empty()) return path;
  return std::filesystem::path(out_dir) / path;
}

inline void ensure_parent(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

inline int cmd_run(const std::string& config_path, const std::string& out_dir, std::ostream& out) {
  const ExperimentConfig cfg = load_config(config_path);
  const Experiment exp = prepare_experiment(cfg);
  const FederatedRun run = run_federated(exp.federation, exp.train, exp.partition, exp.test, exp.model0);

  const auto csv_path = resolve(out_dir, cfg.output.csv);
  ensure_parent(csv_path);
  {
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw Error("cannot open '" + csv_path.string() + "' for writing");
    write_metrics_csv(csv, run.rounds);
  }

  const ParamCount pc = count_params(run.final_model);
  const CommCost cost = comm_cost(pc, cfg.clients, cfg.rounds);
  const RoundMetrics& last = run.rounds.back();
  nlohmann::json summary;
  summary["config"] = to_json(cfg);
  summary["param_count"] = {{"transform", pc.transform}, {"head", pc.head}, {"total", pc.total()}};
  summary["final"] = {{"round", last.round},
                      {"accuracy", last.global_test_accuracy},
                      {"mean_loss", last.mean_client_train_loss},
                      {"params_transmitted_total", cost.params},
                      {"bytes_transmitted_total", cost.bytes}};
  summary["rounds"] = nlohmann::json::array();
  for (const auto& m : run.rounds) summary["rounds"].push_back(to_json(m));

  const auto summary_path = resolve(out_dir, cfg.output.summary);
  ensure_parent(summary_path);
  {
    std::ofstream js(summary_path, std::ios::trunc);
    if (!js) throw Error("cannot open '" + summary_path.string() + "' for writing");
    js << summary.dump(2) << '\n';
  }
  if (cfg.output.checkpoint) {
    const auto ck = resolve(out_dir, *cfg.output.checkpoint);
    ensure_parent(ck);
    save_checkpoint(run.final_model, ck.string());
  }
  out << "final_accuracy=" << fixed(last.global_test_accuracy, 4) << " rounds=" << last.round
      << " params_transmitted=" << cost.params << '\n';
  return kOk;
}

inline int cmd_gradcheck(const GradCheckOptions& opt, std::ostream& out) {
  if (opt.d_z < 1 || opt.d_x < 1 || opt.classes < 2 || opt.seeds < 1)
    throw ConfigError("gradcheck", "need dz >= 1, dx >= 1, classes >= 2, seeds >= 1");
  const GradCheckReport r = run_gradcheck(opt);
  for (const auto& c : r.cases) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "seed=%llu fd_rel_error=%.3e unrolled_rel_error=%.3e converged=%d",
                  static_cast<unsigned long long>(c.seed), c.fd_rel_error, c.unrolled_rel_error,
                  c.forward_converged ? 1 : 0);
    out << buf << '\n';
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "max_fd_rel_error=%.3e (threshold %.0e) max_unrolled_rel_error=%.3e (threshold %.0e) %s",
                r.max_fd_rel_error, opt.fd_threshold, r.max_unrolled_rel_error, opt.unrolled_threshold,
                r.passed ? "PASS" : "FAIL");
  out << buf << '\n';
  return r.passed ? kOk : kCheckFailed;
}

inline int cmd_partition(const std::string& config_path, std::ostream& out) {
  const ExperimentConfig cfg = load_config(config_path);
  Dataset all = load_dataset(cfg);
  all.validate();
  const TrainTest split = stratified_split(all, cfg.test_fraction, cfg.seed);
  Partition p;
  try {
    p = make_partition(cfg, split.train);
    p.validate(split.train.size());
  } catch (const PartitionError& e) {
    out << "partition invalid: " << e.what() << '\n';
    return kCheckFailed;
  }
  out << "scheme=" << (cfg.partition.scheme == PartitionScheme::iid ? "iid" : "dirichlet");
  if (cfg.partition.scheme == PartitionScheme::dirichlet) out << " alpha=" << cfg.partition.alpha;
  out << " samples=" << split.train.size() << " clients=" << p.clients() << '\n';
  out << "client,size,histogram\n";
  for (std::size_t c = 0; c < p.clients(); ++c) {
    out << c << ',' << p.assignments[c].size() << ',';
    const auto h = label_histogram(split.train, p.assignments[c]);
    for (std::size_t i = 0; i < h.size(); ++i) out << (i ? " " : "") << h[i];
    out << '\n';
  }
  out << "mean_client_tv=" << fixed(mean_client_tv(split.train, p), 6) << '\n';
  out << "invariants=ok\n";
  return kOk;
}

inline int cmd_params(const std::string& config_path, std::ostream& out) {
  const ExperimentConfig cfg = load_config(config_path);
  const ModelDims d = cfg.model_dims();
  const ParamCount pc = count_params(d.d_z, d.d_x, d.classes);
  out << "deq_params=" << pc.total() << " transform=" << pc.transform << " head=" << pc.head << '\n';
  for (std::size_t k : {2, 5, 10}) {
    out << "untied_K=" << k << " params=" << pc.untied(k)
        << " reduction=" << fixed(100.0 * pc.reduction_vs_untied(k), 1) << "%\n";
  }
  const CommCost cost = comm_cost(pc, cfg.clients, cfg.rounds);
  out << "run_params_transmitted=" << cost.params << " run_bytes=" << cost.bytes << '\n';
  return kOk;
}

}  // namespace detail

// args excludes the program name.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated deep-equilibrium training simulator", "deqfl"};
  app.require_subcommand(1);
  std::string out_dir;
  app.add_option("--out-dir", out_dir, "Directory for relative output paths");

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run a federated experiment");
  run->add_option("config", config_path, "Experiment JSON")->required();
  auto* part = app.add_subcommand("partition", "Report a partition's per-client label histograms");
  part->add_option("config", config_path, "Experiment JSON")->required();
  auto* params = app.add_subcommand("params", "Report parameter counts and reductions");
  params->add_option("config", config_path, "Experiment JSON")->required();

  GradCheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Check the implicit gradient");
  grad->add_option("--dz", gc.d_z, "Equilibrium state size");
  grad->add_option("--dx", gc.d_x, "Input size");
  grad->add_option("--classes", gc.classes, "Class count");
  grad->add_option("--seeds", gc.seeds, "Number of random instances");
  grad->add_option("--seed", gc.base_seed, "First seed");
  grad->add_option("--corrupt-dw", gc.corrupt_dw_scale, "Scale dW before comparing (harness self-test)")
      ->group("");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: config: <args>: " << detail::one_line(e.what()) << '\n';
    return kConfigError;
  }

  try {
    if (*run) return detail::cmd_run(config_path, out_dir, out);
    if (*grad) return detail::cmd_gradcheck(gc, out);
    if (*part) return detail::cmd_partition(config_path, out);
    if (*params) return detail::cmd_params(config_path, out);
  } catch (const ConfigError& e) {
    err << "error: config: " << detail::one_line(e.what()) << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: runtime: " << detail::one_line(e.what()) << '\n';
    return kRuntimeError;
  }
  return kConfigError;
}

}  // namespace deqfl::cli
