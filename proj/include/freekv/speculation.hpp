// SPDX-License-Identifier: Apache-2.0
//
// Speculative retrieval state machine. Step i attends over the pages recalled
// for step i-1's query unless a KV head's pooled query similarity drops below
// tau, in which case that head is corrected synchronously. Selection runs once
// per step for all KV heads and also feeds the background recall for step i+1.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <span>
#include <vector>

#include "freekv/core.hpp"
#include "freekv/selection.hpp"
#include "freekv/tiered_store.hpp"

namespace freekv {

/// Cosine of the angle between adjacent-step queries. A zero vector yields 0,
/// which forces a correction at any positive tau.
inline double cosine_similarity(std::span<const float> q_i, std::span<const float> q_prev) {
  if (q_i.size() != q_prev.size()) throw Error(ErrorCode::DimMismatch, "query dims differ");
  double dot = 0.0;
  double n1 = 0.0;
  double n2 = 0.0;
  for (std::size_t c = 0; c < q_i.size(); ++c) {
    dot += static_cast<double>(q_i[c]) * q_prev[c];
    n1 += static_cast<double>(q_i[c]) * q_i[c];
    n2 += static_cast<double>(q_prev[c]) * q_prev[c];
  }
  if (n1 == 0.0 || n2 == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(n1) * std::sqrt(n2)), -1.0, 1.0);
}

/// C_i for each of the n_qo heads.
inline std::vector<double> head_similarities(std::span<const float> q_i, std::span<const float> q_prev,
                                             const ModelDims& dims) {
  const std::size_t d = dims.head_dim;
  if (q_i.size() != dims.n_qo * d || q_prev.size() != dims.n_qo * d) {
    throw Error(ErrorCode::DimMismatch, "queries must be n_qo x d");
  }
  std::vector<double> out(dims.n_qo);
  for (std::size_t h = 0; h < dims.n_qo; ++h) out[h] = cosine_similarity(q_i.subspan(h * d, d), q_prev.subspan(h * d, d));
  return out;
}

inline double pool_similarity(std::span<const double> group, SimilarityPooling pooling = SimilarityPooling::Mean) {
  if (group.empty()) throw Error(ErrorCode::GroupSizeMismatch, "empty group");
  if (pooling == SimilarityPooling::Max) return *std::max_element(group.begin(), group.end());
  double sum = 0.0;
  for (double c : group) sum += c;
  return sum / static_cast<double>(group.size());
}

/// One pooled similarity per KV head.
inline std::vector<double> pool_similarities(std::span<const double> per_head, const ModelDims& dims,
                                             SimilarityPooling pooling) {
  const std::size_t g = dims.group_size();
  std::vector<double> out(dims.n_kv);
  for (std::size_t m = 0; m < dims.n_kv; ++m) out[m] = pool_similarity(per_head.subspan(m * g, g), pooling);
  return out;
}

struct CorrectionDecision {
  std::vector<std::uint8_t> corrected;       ///< one flag per KV head
  std::vector<double> pooled_similarity;     ///< one value per KV head

  std::size_t count() const { return static_cast<std::size_t>(std::count(corrected.begin(), corrected.end(), 1)); }
  bool any() const { return count() > 0; }
  bool for_attention_head(std::size_t head, std::size_t group_size) const { return corrected[head / group_size] != 0; }
};

inline CorrectionDecision identify_corrections(std::span<const double> pooled, const SpecConfig& spec) {
  CorrectionDecision out;
  out.pooled_similarity.assign(pooled.begin(), pooled.end());
  out.corrected.resize(pooled.size());
  for (std::size_t m = 0; m < pooled.size(); ++m) {
    bool fire = false;
    switch (spec.mode) {
      case SpecMode::AlwaysCorrect: fire = true; break;
      case SpecMode::NeverCorrect: fire = false; break;
      case SpecMode::Speculative:
        if (spec.tau <= 0.0) {
          fire = false;
        } else if (spec.tau >= 1.0) {
          fire = true;
        } else {
          fire = pooled[m] < spec.tau;
        }
        break;
    }
    out.corrected[m] = fire ? 1 : 0;
  }
  return out;
}

/// Everything carried from step i-1 into step i for one layer.
struct StepState {
  std::size_t step_index = 0;
  std::vector<float> prev_queries;  ///< n_qo x d, empty at step 0
  SelectionResult prev_selection;
  std::vector<std::uint8_t> selection_resident;  ///< per KV head

  bool bootstrap() const { return prev_queries.empty(); }
};

/// Step 0 corrects every head; afterwards pooled similarity decides.
inline CorrectionDecision decide_corrections(const StepState& state, std::span<const float> q_i,
                                             const EngineConfig& cfg) {
  if (state.bootstrap()) {
    CorrectionDecision all;
    all.corrected.assign(cfg.dims.n_kv, 1);
    all.pooled_similarity.assign(cfg.dims.n_kv, 0.0);
    return all;
  }
  const auto c = head_similarities(q_i, state.prev_queries, cfg.dims);
  const auto pooled = pool_similarities(c, cfg.dims, cfg.spec.similarity_pooling);
  return identify_corrections(pooled, cfg.spec);
}

struct SelectionContext {
  const EngineConfig& config;
  std::span<const PageSummary> summaries;
  PageId first_candidate = 0;
  const DeviceCache& cache;
  HostLayout host_layout = HostLayout::Hnd;
};

struct DecodePlan {
  CorrectionDecision decisions;
  SelectionResult fresh;           ///< selection computed from q_i this step
  SelectionResult selection_used;  ///< what this step's attention consumes
  TransferPlan synchronous;        ///< corrected heads, must finish before attention
  TransferPlan background;         ///< non-corrected heads, feeds step i+1
  bool selection_on_critical_path = false;
};

inline DecodePlan plan_step(const StepState& state, std::span<const float> q_i, const CorrectionDecision& decisions,
                            const SelectionContext& ctx) {
  const auto& dims = ctx.config.dims;
  DecodePlan plan;
  plan.decisions = decisions;
  if (state.bootstrap()) plan.decisions.corrected.assign(dims.n_kv, 1);
  if (plan.decisions.corrected.size() != dims.n_kv) throw Error(ErrorCode::DimMismatch, "one decision per KV head");

  plan.fresh = select_pages(q_i, ctx.summaries, ctx.first_candidate, ctx.config);
  plan.selection_on_critical_path = plan.decisions.any();

  std::vector<std::size_t> corrected;
  std::vector<std::size_t> deferred;
  plan.selection_used = SelectionResult(dims.n_kv);
  for (std::size_t m = 0; m < dims.n_kv; ++m) {
    if (plan.decisions.corrected[m]) {
      corrected.push_back(m);
      plan.selection_used.set(m, std::vector<PageId>(plan.fresh.pages(m).begin(), plan.fresh.pages(m).end()));
    } else {
      deferred.push_back(m);
      const auto prev = state.prev_selection.pages(m);
      plan.selection_used.set(m, std::vector<PageId>(prev.begin(), prev.end()));
    }
  }
  plan.synchronous = plan_recall(plan.fresh, ctx.cache, ctx.host_layout, corrected);
  plan.background = plan_recall(plan.fresh, ctx.cache, ctx.host_layout, deferred);
  return plan;
}

/// Completion token for a step's background recall.
class RecallBarrier {
 public:
  RecallBarrier() = default;
  explicit RecallBarrier(bool reached) : reached_(reached) {}

  /// Ready once the future holds a value; does not block.
  template <class T>
  static RecallBarrier from(const std::future<T>& f) {
    return RecallBarrier(!f.valid() || f.wait_for(std::chrono::seconds(0)) == std::future_status::ready);
  }

  bool reached() const { return reached_; }

 private:
  bool reached_ = false;
};

inline StepState advance(const StepState& state, std::span<const float> q_i, const DecodePlan& plan,
                         const RecallBarrier& barrier) {
  if (!barrier.reached()) throw Error(ErrorCode::BarrierNotReached, "background recall still in flight");
  StepState next;
  next.step_index = state.step_index + 1;
  next.prev_queries.assign(q_i.begin(), q_i.end());
  next.prev_selection = plan.fresh;
  next.selection_resident.assign(plan.fresh.heads(), 1);
  return next;
}

}  // namespace freekv
