// SPDX-License-Identifier: Apache-2.0
//
// Discrete-event latency model for recall and decode steps. Times are seconds.
// Output is a model of a PCIe-attached accelerator, not a measurement.

#pragma once

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "freekv/core.hpp"
#include "freekv/layout.hpp"
#include "freekv/tiered_store.hpp"

namespace freekv {

struct LinkModel {
  double bandwidth = 25e9;        ///< bytes/second
  double per_op_latency = 2e-6;   ///< seconds per copy operation
};

struct ComputeModel {
  double attention_time = 50e-6;
  double ffn_time = 150e-6;
  double qkv_proj_time = 40e-6;
  double selection_time = 20e-6;
  double conversion_throughput = 1.5e12;  ///< bytes/second
};

inline std::vector<std::string> model_violations(const LinkModel& link, const ComputeModel& compute) {
  std::vector<std::string> out;
  if (!(link.bandwidth > 0.0)) out.emplace_back("bandwidth > 0");
  if (!(link.per_op_latency >= 0.0)) out.emplace_back("per_op_latency >= 0");
  if (!(compute.attention_time >= 0.0) || !(compute.ffn_time >= 0.0) || !(compute.qkv_proj_time >= 0.0) ||
      !(compute.selection_time >= 0.0)) {
    out.emplace_back("compute times >= 0");
  }
  if (!(compute.conversion_throughput > 0.0)) out.emplace_back("conversion_throughput > 0");
  return out;
}

enum class Lane { Compute, Transfer, Convert };

inline std::string_view to_string(Lane lane) {
  switch (lane) {
    case Lane::Compute: return "compute";
    case Lane::Transfer: return "transfer";
    case Lane::Convert: return "convert";
  }
  return "?";
}

struct TimelineEvent {
  double start = 0.0;
  double end = 0.0;
  Lane lane = Lane::Compute;
  std::string label;
};

class Timeline {
 public:
  void add(double start, double end, Lane lane, std::string label) {
    events_.push_back({start, end, lane, std::move(label)});
  }

  /// Appends `other` shifted by `offset`, prefixing labels.
  void append(const Timeline& other, double offset, const std::string& prefix = {}) {
    for (const auto& e : other.events_) events_.push_back({e.start + offset, e.end + offset, e.lane, prefix + e.label});
  }

  const std::vector<TimelineEvent>& events() const { return events_; }

  double makespan() const {
    double m = 0.0;
    for (const auto& e : events_) m = std::max(m, e.end);
    return m;
  }

  double busy(Lane lane) const {
    double t = 0.0;
    for (const auto& e : events_) {
      if (e.lane == lane) t += e.end - e.start;
    }
    return t;
  }

  /// Events sharing a lane never overlap.
  bool lanes_disjoint() const {
    for (Lane lane : {Lane::Compute, Lane::Transfer, Lane::Convert}) {
      std::vector<std::pair<double, double>> spans;
      for (const auto& e : events_) {
        if (e.lane == lane) spans.emplace_back(e.start, e.end);
      }
      std::sort(spans.begin(), spans.end());
      for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].first < spans[i - 1].second) return false;
      }
    }
    return true;
  }

  void write_csv(std::ostream& out, bool header = true) const {
    if (header) out << "lane,label,start_us,end_us\n";
    for (const auto& e : events_) {
      out << to_string(e.lane) << ',' << e.label << ',' << std::fixed << std::setprecision(3) << e.start * 1e6 << ','
          << e.end * 1e6 << '\n';
    }
    out << std::defaultfloat;
  }

 private:
  std::vector<TimelineEvent> events_;
};

/// Per-page stage times of a recall: host-to-device copy and on-device layout
/// conversion.
struct PageCost {
  double transfer = 0.0;
  double convert = 0.0;
  std::size_t ops = 0;
  std::size_t bytes = 0;
};

inline PageCost page_cost(std::size_t page_bytes, std::size_t ops, const LinkModel& link,
                          const ComputeModel& compute) {
  PageCost c;
  c.bytes = page_bytes;
  c.ops = ops;
  c.transfer = static_cast<double>(page_bytes) / link.bandwidth + link.per_op_latency * static_cast<double>(ops);
  c.convert = static_cast<double>(page_bytes) / compute.conversion_throughput;
  return c;
}

/// Cost of recalling one KV head's page (K and V) from a host pool in `layout`.
inline PageCost recall_page_cost(const ModelDims& dims, HostLayout layout, const LinkModel& link,
                                 const ComputeModel& compute) {
  const auto runs = contiguous_runs(host_block_layout(layout), dims, 0);
  return page_cost(dims.head_page_elems() * dims.elem_bytes, runs.size(), link, compute);
}

/// Recall of n pages with per-page copy time t_x and conversion time t_c.
/// Streamed mode overlaps copy of page j+1 with conversion of page j through
/// two staging buffers.
inline Timeline simulate_recall(std::size_t n, double t_x, double t_c, bool streamed) {
  Timeline tl;
  double copy_free = 0.0;
  double convert_free = 0.0;
  double buffer_free[2] = {0.0, 0.0};
  for (std::size_t j = 0; j < n; ++j) {
    const double xs = streamed ? std::max(copy_free, buffer_free[j % 2]) : std::max(copy_free, convert_free);
    const double xe = xs + t_x;
    tl.add(xs, xe, Lane::Transfer, "copy" + std::to_string(j));
    const double cs = std::max(xe, convert_free);
    const double ce = cs + t_c;
    tl.add(cs, ce, Lane::Convert, "convert" + std::to_string(j));
    copy_free = xe;
    convert_free = ce;
    buffer_free[j % 2] = ce;
  }
  return tl;
}

inline Timeline simulate_recall(std::size_t n, const PageCost& cost, bool streamed) {
  return simulate_recall(n, cost.transfer, cost.convert, streamed);
}

inline Timeline simulate_recall(std::size_t n, const ModelDims& dims, HostLayout layout, const LinkModel& link,
                                const ComputeModel& compute, bool streamed) {
  return simulate_recall(n, recall_page_cost(dims, layout, link, compute), streamed);
}

/// Closed-form makespans used to cross-check the event simulation.
inline double sequential_recall_makespan(std::size_t n, double t_x, double t_c) {
  return static_cast<double>(n) * (t_x + t_c);
}

inline double streamed_recall_makespan(std::size_t n, double t_x, double t_c) {
  if (n == 0) return 0.0;
  return t_x + static_cast<double>(n - 1) * std::max(t_x, t_c) + t_c;
}

/// What one layer's decode step asks of the link and the compute stream.
struct DecodeStepLoad {
  std::size_t sync_pages = 0;        ///< recalled on the critical path
  std::size_t background_pages = 0;  ///< recalled behind attention/FFN/QKV
  bool selection_on_critical_path = false;
  PageCost page;
  bool streamed = true;
  bool dense = false;  ///< full-attention layer: no selection, no recall
};

inline DecodeStepLoad decode_step_load(std::size_t sync_pages, std::size_t background_pages,
                                       bool selection_on_critical_path, const ModelDims& dims, HostLayout layout,
                                       const LinkModel& link, const ComputeModel& compute, bool streamed) {
  return {sync_pages, background_pages, selection_on_critical_path, recall_page_cost(dims, layout, link, compute),
          streamed, false};
}

struct DecodeStepReport {
  Timeline timeline;
  double sync_time = 0.0;        ///< selection + recall before attention
  double compute_time = 0.0;     ///< attention + FFN + next QKV
  double window = 0.0;           ///< overlap window for background work
  double background_time = 0.0;  ///< background selection + recall
  double exposed = 0.0;          ///< background time not hidden by the window
  double step_time = 0.0;
};

/// One layer: [sync selection, sync recall] -> attention -> FFN -> next QKV,
/// with background selection and recall starting alongside attention.
inline DecodeStepReport simulate_decode_step(const DecodeStepLoad& load, const ComputeModel& compute,
                                             bool overlap_enabled) {
  DecodeStepReport r;
  auto& tl = r.timeline;
  double t = 0.0;

  if (load.selection_on_critical_path && !load.dense) {
    tl.add(t, t + compute.selection_time, Lane::Compute, "selection");
    t += compute.selection_time;
  }
  if (load.sync_pages > 0) {
    const auto rec = simulate_recall(load.sync_pages, load.page, load.streamed);
    tl.append(rec, t, "sync_");
    t += rec.makespan();
  }
  r.sync_time = t;

  const double attn_start = t;
  r.window = compute.attention_time + compute.ffn_time + compute.qkv_proj_time;
  r.compute_time = r.window;

  Timeline bg;
  double b = 0.0;
  if (!load.selection_on_critical_path && !load.dense) {
    bg.add(0.0, compute.selection_time, Lane::Convert, "bg_selection");
    b += compute.selection_time;
  }
  if (load.background_pages > 0) {
    const auto rec = simulate_recall(load.background_pages, load.page, load.streamed);
    bg.append(rec, b, "bg_");
    b += rec.makespan();
  }
  r.background_time = b;
  r.exposed = overlap_enabled ? std::max(0.0, r.background_time - r.window) : r.background_time;

  if (overlap_enabled) {
    tl.add(t, t + compute.attention_time, Lane::Compute, "attention");
    t += compute.attention_time;
    tl.add(t, t + compute.ffn_time, Lane::Compute, "ffn");
    t += compute.ffn_time;
    tl.add(t, t + compute.qkv_proj_time, Lane::Compute, "qkv_next");
    t += compute.qkv_proj_time;
    tl.append(bg, attn_start);
    if (r.exposed > 0.0) tl.add(t, t + r.exposed, Lane::Compute, "stall");
  } else {
    tl.append(bg, attn_start);
    t += r.background_time;
    tl.add(t, t + compute.attention_time, Lane::Compute, "attention");
    t += compute.attention_time;
    tl.add(t, t + compute.ffn_time, Lane::Compute, "ffn");
    t += compute.ffn_time;
    tl.add(t, t + compute.qkv_proj_time, Lane::Compute, "qkv_next");
  }
  r.step_time = r.sync_time + r.compute_time + r.exposed;
  return r;
}

}  // namespace freekv
