// SPDX-License-Identifier: Apache-2.0
//
// Serialisation of run metrics (JSON), per-step stats (CSV) and mode
// comparisons. Output is deterministic for a given run.

#pragma once

#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "freekv/engine.hpp"

namespace freekv {

inline nlohmann::ordered_json to_json(const TransferStats& s) {
  nlohmann::ordered_json j;
  j["copy_op_count"] = s.copy_op_count;
  j["bytes_moved"] = s.bytes_moved;
  j["pages_fetched"] = s.pages_fetched;
  j["pages_reused"] = s.pages_reused;
  return j;
}

inline nlohmann::ordered_json to_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  j["schema_version"] = m.schema_version;
  j["trace_hash"] = m.trace_hash;
  j["config"] = {{"mode", m.config_mode}, {"pooling", m.pooling}, {"host_layout", m.host_layout}, {"tau", m.tau}};
  j["steps"] = m.steps;
  j["layers"] = m.layers;
  j["corrections"] = m.corrections;
  j["decisions"] = m.decisions;
  j["correction_rate"] = m.correction_rate;
  j["oracle_checked"] = m.oracle_checked;
  j["selection_jaccard"] = m.selection_jaccard;
  j["max_abs_error_vs_oracle"] = m.max_abs_error_vs_oracle;
  j["exact_checked"] = m.exact_checked;
  j["max_abs_error_vs_exact"] = m.max_abs_error_vs_exact;
  j["output_digest"] = m.output_digest;
  j["sync_transfer"] = to_json(m.sync_transfer);
  j["background_transfer"] = to_json(m.background_transfer);
  j["sim"] = {{"sync_recall_time_s", m.sync_recall_time},
              {"exposed_recall_time_s", m.exposed_recall_time},
              {"makespan_s", m.simulated_makespan}};
  j["invariant_violations"] = m.invariant_violations;
  return j;
}

inline void write_stats_csv(std::ostream& out, const std::vector<StepRecord>& transcript) {
  out << "step,layer,corrected_kv_heads,sync_pages,background_pages,sync_copy_ops,sync_bytes,step_time_us,exposed_us\n";
  for (const auto& rec : transcript) {
    for (std::size_t l = 0; l < rec.layers.size(); ++l) {
      const auto& lr = rec.layers[l];
      out << rec.step << ',' << l << ',' << (lr.exempt ? 0 : lr.decisions.count()) << ',' << lr.sync_pages << ','
          << lr.background_pages << ',' << lr.sync_transfer.copy_op_count << ',' << lr.sync_transfer.bytes_moved << ','
          << lr.step_time * 1e6 << ',' << lr.exposed * 1e6 << '\n';
    }
  }
}

/// Writes metrics.json, timeline.csv and stats.csv into `dir`.
inline void write_run_outputs(const std::string& dir, const RunResult& r) {
  std::ofstream(dir + "/metrics.json") << to_json(r.metrics).dump(2) << '\n';
  std::ofstream tl(dir + "/timeline.csv");
  r.timeline.write_csv(tl);
  std::ofstream st(dir + "/stats.csv");
  write_stats_csv(st, r.transcript);
}

struct NamedConfig {
  std::string name;
  RunConfig config;
};

struct ComparisonReport {
  std::string trace_hash;
  std::vector<std::pair<std::string, RunResult>> runs;
};

inline ComparisonReport compare_modes(const Trace& trace, const std::vector<NamedConfig>& configs,
                                      const EngineOptions& opt = {}) {
  if (configs.size() < 2) throw Error(ErrorCode::ConfigError, "compare needs at least two configs");
  ComparisonReport report;
  report.trace_hash = hex64(fnv1a64(encode_trace(trace)));
  for (const auto& nc : configs) report.runs.emplace_back(nc.name, run_engine(trace, nc.config, opt));
  return report;
}

inline void write_comparison_csv(std::ostream& out, const ComparisonReport& r) {
  out << "name,mode,pooling,host_layout,tau,trace_hash,correction_rate,selection_jaccard,max_abs_error_vs_oracle,"
         "copy_op_count,bytes_moved,sync_recall_time_s,exposed_recall_time_s,makespan_s\n";
  for (const auto& [name, run] : r.runs) {
    const auto& m = run.metrics;
    TransferStats all = m.sync_transfer;
    all += m.background_transfer;
    out << name << ',' << m.config_mode << ',' << m.pooling << ',' << m.host_layout << ',' << m.tau << ','
        << m.trace_hash << ',' << m.correction_rate << ',' << m.selection_jaccard << ','
        << m.max_abs_error_vs_oracle << ',' << all.copy_op_count << ',' << all.bytes_moved << ','
        << m.sync_recall_time << ',' << m.exposed_recall_time << ',' << m.simulated_makespan << '\n';
  }
}

inline nlohmann::ordered_json to_json(const ComparisonReport& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = kMetricsSchemaVersion;
  j["trace_hash"] = r.trace_hash;
  j["runs"] = nlohmann::ordered_json::array();
  for (const auto& [name, run] : r.runs) {
    auto entry = to_json(run.metrics);
    entry["name"] = name;
    j["runs"].push_back(std::move(entry));
  }
  return j;
}

}  // namespace freekv
