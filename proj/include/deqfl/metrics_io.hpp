#pragma once

// Metrics output.
//
// CSV, one row per round after a fixed header:
//   round,accuracy,mean_loss,params_transmitted,nonconverged_solves,wall_ms
// accuracy and mean_loss use %.17g (round-trip exact); wall_ms uses %.3f.

#include <cstdio>
#include <ostream>
#include <span>
#include <string>

#include "json.hpp"

#include "deqfl/federation.hpp"

namespace deqfl {

inline constexpr const char* kMetricsCsvHeader =
    "round,accuracy,mean_loss,params_transmitted,nonconverged_solves,wall_ms";

inline std::string format_csv_row(const RoundMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%zu,%zu,%.3f", m.round, m.global_test_accuracy,
                m.mean_client_train_loss, m.params_transmitted, m.nonconverged_solves, m.wall_ms);
  return buf;
}

inline void write_metrics_csv(std::ostream& out, std::span<const RoundMetrics> rounds) {
  out << kMetricsCsvHeader << '\n';
  for (const auto& m : rounds) out << format_csv_row(m) << '\n';
}

inline nlohmann::json to_json(const RoundMetrics& m) {
  return {{"round", m.round},
          {"accuracy", m.global_test_accuracy},
          {"mean_loss", m.mean_client_train_loss},
          {"params_transmitted", m.params_transmitted},
          {"nonconverged_solves", m.nonconverged_solves},
          {"per_client_k", m.per_client_k},
          {"wall_ms", m.wall_ms}};
}

}  // namespace deqfl
