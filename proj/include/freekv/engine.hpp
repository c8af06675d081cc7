// SPDX-License-Identifier: Apache-2.0
//
// End-to-end decode driver: prefill offload, then per step and layer the
// speculative plan, synchronous and background recall, sparse attention and
// the latency model. Optionally checks every step against the oracle.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <future>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "freekv/attention.hpp"
#include "freekv/config_file.hpp"
#include "freekv/core.hpp"
#include "freekv/latency_sim.hpp"
#include "freekv/oracle.hpp"
#include "freekv/selection.hpp"
#include "freekv/speculation.hpp"
#include "freekv/tiered_store.hpp"
#include "freekv/trace.hpp"

namespace freekv {

inline constexpr int kMetricsSchemaVersion = 1;

struct EngineOptions {
  bool compare_oracle = true;  ///< synchronous reference at every step
  bool compare_exact = false;  ///< full attention at every step
  bool keep_transcript = true;
  bool keep_timeline = true;
};

struct LayerStepRecord {
  bool exempt = false;
  CorrectionDecision decisions;
  SelectionResult fresh;
  SelectionResult used;
  std::size_t sync_pages = 0;
  std::size_t background_pages = 0;
  TransferStats sync_transfer;
  double step_time = 0.0;
  double exposed = 0.0;
};

struct StepRecord {
  std::size_t step = 0;
  std::vector<LayerStepRecord> layers;
  std::vector<std::vector<float>> outputs;  ///< per layer, n_qo x d
};

struct MetricsReport {
  int schema_version = kMetricsSchemaVersion;
  std::string trace_hash;
  std::string config_mode;
  std::string pooling;
  std::string host_layout;
  double tau = 0.0;
  std::size_t steps = 0;
  std::size_t layers = 0;

  std::size_t corrections = 0;
  std::size_t decisions = 0;
  double correction_rate = 0.0;

  bool oracle_checked = false;
  double selection_jaccard = 1.0;
  double max_abs_error_vs_oracle = 0.0;
  bool exact_checked = false;
  double max_abs_error_vs_exact = 0.0;
  std::string output_digest;

  TransferStats sync_transfer;
  TransferStats background_transfer;
  double sync_recall_time = 0.0;
  double exposed_recall_time = 0.0;
  double simulated_makespan = 0.0;

  std::vector<std::string> invariant_violations;
};

struct RunResult {
  MetricsReport metrics;
  Timeline timeline;
  std::vector<StepRecord> transcript;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline double jaccard(std::span<const PageId> a, std::span<const PageId> b) {
  if (a.empty() && b.empty()) return 1.0;
  std::vector<PageId> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  const double inter = static_cast<double>(both.size());
  return inter / (static_cast<double>(a.size() + b.size()) - inter);
}

namespace detail {

struct LayerRuntime {
  bool exempt = false;
  std::unique_ptr<DeviceCache> cache;
  std::unique_ptr<HostPool> host;
  std::vector<PageSummary> summaries;
  StepState state;
  std::vector<float> full_k;
  std::vector<float> full_v;
  std::optional<DecodePlan> last_plan;
  std::vector<float> last_query;
  std::future<TransferStats> pending;
};

inline void ingest_token(LayerRuntime& rt, std::span<const float> k, std::span<const float> v) {
  if (rt.exempt) {
    rt.full_k.insert(rt.full_k.end(), k.begin(), k.end());
    rt.full_v.insert(rt.full_v.end(), v.begin(), v.end());
    return;
  }
  if (auto off = rt.cache->append_token(k, v)) {
    const PageId id = offload_full_page(*rt.host, off->k, off->v);
    if (id != off->page) throw Error(ErrorCode::MissingHostPage, "host page ids out of order");
    rt.summaries.push_back(summarize_page(off->k));
  }
}

/// Waits for the layer's background recall and moves its state forward.
inline void settle(LayerRuntime& rt, TransferStats& background) {
  if (rt.pending.valid()) {
    rt.pending.wait();
    const auto barrier = RecallBarrier::from(rt.pending);
    background += rt.pending.get();
    rt.state = advance(rt.state, rt.last_query, *rt.last_plan, barrier);
  } else if (rt.last_plan) {
    rt.state = advance(rt.state, rt.last_query, *rt.last_plan, RecallBarrier(true));
  }
}

}  // namespace detail

inline RunResult run_engine(const Trace& trace, const RunConfig& rc, const EngineOptions& opt = {}) {
  const auto& th = trace.header();
  const EngineConfig cfg = rc.engine_config(th.n_qo, th.n_kv, th.head_dim);
  const auto& dims = cfg.dims;
  const std::size_t d = dims.head_dim;

  RunResult result;
  auto& m = result.metrics;
  m.trace_hash = hex64(fnv1a64(encode_trace(trace)));
  m.config_mode = std::string(to_string(cfg.spec.mode));
  m.pooling = std::string(to_string(cfg.spec.pooling));
  m.host_layout = std::string(to_string(rc.host_layout));
  m.tau = cfg.spec.tau;
  m.steps = trace.steps();
  m.layers = trace.layers();
  m.oracle_checked = opt.compare_oracle;
  m.exact_checked = opt.compare_exact;

  std::vector<detail::LayerRuntime> layers(trace.layers());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& rt = layers[l];
    rt.exempt = cfg.spec.first_layer_exempt && l == 0;
    rt.cache = std::make_unique<DeviceCache>(cfg);
    rt.host = std::make_unique<HostPool>(dims, rc.host_layout);
    const std::size_t row = dims.n_kv * d;
    const auto pk = trace.prefill_keys(l);
    const auto pv = trace.prefill_values(l);
    for (std::size_t pos = 0; pos < trace.prefill_len(); ++pos) {
      detail::ingest_token(rt, pk.subspan(pos * row, row), pv.subspan(pos * row, row));
    }
  }

  TransferAgent agent;
  std::vector<float> all_outputs;
  double jaccard_sum = 0.0;
  std::size_t jaccard_n = 0;
  double clock = 0.0;

  for (std::size_t s = 0; s < trace.steps(); ++s) {
    StepRecord rec;
    rec.step = s;
    std::optional<oracle::StepResult> ref;
    if (opt.compare_oracle) ref = oracle::synchronous_engine_step(trace, cfg, s);
    std::vector<std::vector<float>> exact;
    if (opt.compare_exact) exact = oracle::full_attention_step(trace, s);

    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& rt = layers[l];
      const auto q = trace.query(s, l);
      LayerStepRecord lr;
      lr.exempt = rt.exempt;
      AttentionOutput out;
      DecodeStepLoad load;

      detail::settle(rt, m.background_transfer);
      detail::ingest_token(rt, trace.key(s, l), trace.value(s, l));

      if (rt.exempt) {
        out = exact_attention_gqa(q, rt.full_k, rt.full_v, dims);
        load.dense = true;
      } else {
        lr.decisions = decide_corrections(rt.state, q, cfg);
        const SelectionContext ctx{cfg, rt.summaries, static_cast<PageId>(cfg.sink_pages), *rt.cache, rc.host_layout};
        rt.last_plan = plan_step(rt.state, q, lr.decisions, ctx);
        const auto& plan = *rt.last_plan;
        lr.decisions = plan.decisions;
        if (s > 0) {
          m.corrections += lr.decisions.count();
          m.decisions += dims.n_kv;
        }
        lr.fresh = plan.fresh;
        lr.used = plan.selection_used;
        lr.sync_pages = plan.synchronous.pages_to_fetch();
        lr.background_pages = plan.background.pages_to_fetch();

        lr.sync_transfer = execute_recall(plan.synchronous, *rt.host, *rt.cache, rc.streamed);
        m.sync_transfer += lr.sync_transfer;
        out = sparse_attention(q, *rt.cache, plan.selection_used);

        rt.last_query.assign(q.begin(), q.end());
        DeviceCache* cache = rt.cache.get();
        HostPool* host = rt.host.get();
        const TransferPlan* bg = &plan.background;
        const bool streamed = rc.streamed;
        rt.pending = agent.submit([=] { return execute_recall(*bg, *host, *cache, streamed); });

        load = decode_step_load(lr.sync_pages, lr.background_pages, plan.selection_on_critical_path, dims,
                                rc.host_layout, rc.link, rc.compute, rc.streamed);
        if (!rt.cache->consistent()) m.invariant_violations.push_back("device cache inconsistent at step " + std::to_string(s));
      }

      const auto sim = simulate_decode_step(load, rc.compute, rc.overlap);
      lr.step_time = sim.step_time;
      lr.exposed = sim.exposed;
      m.sync_recall_time += sim.sync_time;
      m.exposed_recall_time += sim.exposed;
      if (opt.keep_timeline) {
        result.timeline.append(sim.timeline, clock, "s" + std::to_string(s) + ".l" + std::to_string(l) + ".");
      }
      clock += sim.step_time;

      if (ref) {
        const auto& rl = ref->layers[l];
        for (std::size_t i = 0; i < out.values.size(); ++i) {
          m.max_abs_error_vs_oracle =
              std::max(m.max_abs_error_vs_oracle, static_cast<double>(std::abs(out.values[i] - rl.output[i])));
        }
        if (!rt.exempt) {
          for (std::size_t h = 0; h < dims.n_kv; ++h) {
            jaccard_sum += jaccard(lr.used.pages(h), rl.selection[h]);
            ++jaccard_n;
          }
        }
      }
      if (!exact.empty()) {
        for (std::size_t i = 0; i < out.values.size(); ++i) {
          m.max_abs_error_vs_exact =
              std::max(m.max_abs_error_vs_exact, static_cast<double>(std::abs(out.values[i] - exact[l][i])));
        }
      }

      all_outputs.insert(all_outputs.end(), out.values.begin(), out.values.end());
      if (opt.keep_transcript) {
        rec.layers.push_back(std::move(lr));
        rec.outputs.push_back(std::move(out.values));
      }
    }
    if (opt.keep_transcript) result.transcript.push_back(std::move(rec));
  }
  for (auto& rt : layers) detail::settle(rt, m.background_transfer);

  m.simulated_makespan = clock;
  m.correction_rate = m.decisions == 0 ? 0.0 : static_cast<double>(m.corrections) / static_cast<double>(m.decisions);
  m.selection_jaccard = jaccard_n == 0 ? 1.0 : jaccard_sum / static_cast<double>(jaccard_n);
  m.output_digest = hex64(fnv1a64(std::span<const float>(all_outputs)));

  if (!(m.correction_rate >= 0.0 && m.correction_rate <= 1.0)) {
    m.invariant_violations.push_back("correction rate outside [0, 1]");
  }
  if (opt.compare_oracle && cfg.spec.mode == SpecMode::AlwaysCorrect && m.max_abs_error_vs_oracle != 0.0) {
    m.invariant_violations.push_back("always_correct output differs from the synchronous reference");
  }
  return result;
}

}  // namespace freekv
