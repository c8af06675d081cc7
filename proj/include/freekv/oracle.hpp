// SPDX-License-Identifier: Apache-2.0
//
// Brute-force references for the property and equivalence tests. Nothing here
// calls into the code it checks, except page_bound_audit which exists to
// exercise page_score. Everything is naive and meant for small contexts.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "freekv/core.hpp"
#include "freekv/layout.hpp"
#include "freekv/selection.hpp"
#include "freekv/trace.hpp"

namespace freekv::oracle {

/// Top-k by full sort; same ordering rule as the selector.
inline std::vector<PageId> brute_topk(std::span<const double> scores, std::size_t k, PageId first_page = 0) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] > scores[b]) return true;
    if (scores[a] < scores[b]) return false;
    return a < b;
  });
  idx.resize(std::min(k, idx.size()));
  std::vector<PageId> out;
  for (auto i : idx) out.push_back(first_page + static_cast<PageId>(i));
  std::sort(out.begin(), out.end());
  return out;
}

/// Attention of one head restricted to `indices`. K and V hold rows of q.size().
inline std::vector<float> masked_exact_attention(std::span<const float> q, std::span<const float> keys,
                                                 std::span<const float> values, std::vector<std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorCode::EmptySet, "empty index set");
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  const std::size_t d = q.size();
  if (indices.back() * d + d > keys.size() || keys.size() != values.size()) {
    throw Error(ErrorCode::DimMismatch, "index outside K/V");
  }

  std::vector<double> w(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(q[c]) * static_cast<double>(keys[indices[i] * d + c]);
    w[i] = dot / std::sqrt(static_cast<double>(d));
  }
  double top = w[0];
  for (double x : w) top = std::max(top, x);
  double z = 0.0;
  for (auto& x : w) {
    x = std::exp(x - top);
    z += x;
  }
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    for (std::size_t c = 0; c < d; ++c) acc[c] += w[i] * static_cast<double>(values[indices[i] * d + c]);
  }
  std::vector<float> out(d);
  for (std::size_t c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c] / z);
  return out;
}

/// True iff the summary score of `kv_head` bounds every key of the page.
inline bool page_bound_audit(std::span<const float> q, const HndCombinedPage<float>& page, std::size_t kv_head,
                             const PageSummary& summary) {
  const double bound = page_score(q, summary, kv_head);
  for (std::size_t t = 0; t < page.tokens(); ++t) {
    double dot = 0.0;
    for (std::size_t c = 0; c < page.dim(); ++c) dot += static_cast<double>(q[c]) * page.at(kv_head, 0, t, c);
    if (dot / std::sqrt(static_cast<double>(page.dim())) > bound) return false;
  }
  return true;
}

struct LayerResult {
  bool exempt = false;
  std::size_t first_candidate = 0;  ///< page id
  std::size_t end_candidate = 0;    ///< one past the last offloaded page id
  std::vector<std::vector<PageId>> selection;  ///< per KV head
  std::vector<float> output;                   ///< n_qo x d
};

struct StepResult {
  std::size_t step = 0;
  std::size_t context = 0;
  std::vector<LayerResult> layers;
};

/// Offloaded non-sink page count for `context` tokens under the window rule.
inline std::size_t offloaded_beyond_sink(std::size_t context, const BudgetConfig& b, std::size_t p) {
  if (context <= b.sink_tokens) return 0;
  const std::size_t rest = context - b.sink_tokens;
  if (rest <= b.window_tokens) return 0;
  const std::size_t need = (rest - b.window_tokens + p - 1) / p;
  return std::min(need, rest / p);
}

namespace detail {

inline std::vector<double> stable_softmax(const std::vector<double>& x) {
  std::vector<double> e(x.size());
  if (x.empty()) return e;
  double top = x[0];
  for (double v : x) top = std::max(top, v);
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::exp(x[i] - top);
    z += e[i];
  }
  for (auto& v : e) v /= z;
  return e;
}

inline double box_score(std::span<const float> q, const std::vector<float>& lo, const std::vector<float>& hi) {
  double acc = 0.0;
  for (std::size_t c = 0; c < q.size(); ++c) {
    const double a = static_cast<double>(q[c]) * lo[c];
    const double b = static_cast<double>(q[c]) * hi[c];
    acc += std::max(a, b);
  }
  return acc / std::sqrt(static_cast<double>(q.size()));
}

inline std::vector<double> group_ranking(const Trace& trace, std::size_t layer, std::span<const float> queries,
                                         std::size_t kv_head, std::size_t first, std::size_t end, std::size_t p,
                                         GroupPooling pooling) {
  const std::size_t d = trace.header().head_dim;
  const std::size_t g = trace.header().n_qo / trace.header().n_kv;

  std::vector<std::vector<float>> lo(end - first), hi(end - first);
  for (std::size_t id = first; id < end; ++id) {
    auto& mn = lo[id - first];
    auto& mx = hi[id - first];
    mn.assign(d, std::numeric_limits<float>::infinity());
    mx.assign(d, -std::numeric_limits<float>::infinity());
    for (std::size_t pos = id * p; pos < (id + 1) * p; ++pos) {
      const auto k = trace.token_key(layer, pos, kv_head);
      for (std::size_t c = 0; c < d; ++c) {
        mn[c] = std::min(mn[c], k[c]);
        mx[c] = std::max(mx[c], k[c]);
      }
    }
  }
  auto scores_for = [&](std::span<const float> q) {
    std::vector<double> s;
    for (std::size_t j = 0; j < lo.size(); ++j) s.push_back(box_score(q, lo[j], hi[j]));
    return s;
  };
  auto head_query = [&](std::size_t j) { return queries.subspan((kv_head * g + j) * d, d); };

  if (pooling == GroupPooling::MeanQ || pooling == GroupPooling::MaxQ) {
    std::vector<float> pooled(d);
    for (std::size_t c = 0; c < d; ++c) {
      float v = pooling == GroupPooling::MeanQ ? 0.0f : -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j < g; ++j) v = pooling == GroupPooling::MeanQ ? v + head_query(j)[c] : std::max(v, head_query(j)[c]);
      pooled[c] = pooling == GroupPooling::MeanQ ? v / static_cast<float>(g) : v;
    }
    return scores_for(pooled);
  }

  const bool soft = pooling == GroupPooling::MeanS || pooling == GroupPooling::MaxS;
  const bool mean = pooling == GroupPooling::MeanS || pooling == GroupPooling::MeanQK;
  std::vector<double> out(lo.size(), mean ? 0.0 : -std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < g; ++j) {
    auto s = scores_for(head_query(j));
    if (soft) s = stable_softmax(s);
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = mean ? out[i] + s[i] : std::max(out[i], s[i]);
  }
  if (mean) {
    for (auto& v : out) v /= static_cast<double>(g);
  }
  return out;
}

/// Attention of one query head over the listed positions (ascending).
inline void attend_positions(const Trace& trace, std::size_t layer, std::size_t kv_head, std::span<const float> q,
                             const std::vector<std::size_t>& positions, std::span<float> out) {
  const std::size_t d = q.size();
  std::vector<double> w(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto k = trace.token_key(layer, positions[i], kv_head);
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(q[c]) * static_cast<double>(k[c]);
    w[i] = dot / std::sqrt(static_cast<double>(d));
  }
  double top = w[0];
  for (double x : w) top = std::max(top, x);
  double z = 0.0;
  for (auto& x : w) {
    x = std::exp(x - top);
    z += x;
  }
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto v = trace.token_value(layer, positions[i], kv_head);
    for (std::size_t c = 0; c < d; ++c) acc[c] += w[i] * static_cast<double>(v[c]);
  }
  for (std::size_t c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c] / z);
}

}  // namespace detail

/// Non-speculative retrieval at decode step `step`: selection from the
/// current query, recall assumed complete, then sparse attention.
inline StepResult synchronous_engine_step(const Trace& trace, const EngineConfig& cfg, std::size_t step) {
  const auto& h = trace.header();
  const std::size_t d = h.head_dim;
  const std::size_t g = h.n_qo / h.n_kv;
  const std::size_t p = cfg.dims.page_size;
  const auto& b = cfg.budget;

  StepResult res;
  res.step = step;
  res.context = trace.context_at(step);
  const std::size_t sink_end = std::min(res.context, b.sink_tokens);
  const std::size_t first = b.sink_tokens / p;
  const std::size_t end = first + offloaded_beyond_sink(res.context, b, p);
  const std::size_t window_start = end * p;

  for (std::size_t layer = 0; layer < trace.layers(); ++layer) {
    LayerResult lr;
    lr.exempt = cfg.spec.first_layer_exempt && layer == 0;
    lr.first_candidate = first;
    lr.end_candidate = end;
    lr.output.resize(h.n_qo * d);
    lr.selection.resize(h.n_kv);
    const auto queries = trace.query(step, layer);

    for (std::size_t m = 0; m < h.n_kv; ++m) {
      std::vector<std::size_t> positions;
      if (lr.exempt) {
        positions.resize(res.context);
        std::iota(positions.begin(), positions.end(), std::size_t{0});
      } else {
        if (end > first) {
          const auto rank = detail::group_ranking(trace, layer, queries, m, first, end, p, cfg.spec.pooling);
          lr.selection[m] = brute_topk(rank, cfg.selectable_pages, static_cast<PageId>(first));
        }
        for (std::size_t pos = 0; pos < sink_end; ++pos) positions.push_back(pos);
        for (auto page : lr.selection[m]) {
          for (std::size_t t = 0; t < p; ++t) positions.push_back(page * p + t);
        }
        for (std::size_t pos = window_start; pos < res.context; ++pos) positions.push_back(pos);
        std::sort(positions.begin(), positions.end());
      }
      for (std::size_t j = 0; j < g; ++j) {
        const std::size_t head = m * g + j;
        detail::attend_positions(trace, layer, m, queries.subspan(head * d, d), positions,
                                 std::span<float>(lr.output).subspan(head * d, d));
      }
    }
    res.layers.push_back(std::move(lr));
  }
  return res;
}

/// Exact attention over the full context at `step`, per layer (n_qo x d each).
inline std::vector<std::vector<float>> full_attention_step(const Trace& trace, std::size_t step) {
  const auto& h = trace.header();
  const std::size_t d = h.head_dim;
  const std::size_t g = h.n_qo / h.n_kv;
  std::vector<std::size_t> all(trace.context_at(step));
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::vector<float>> out;
  for (std::size_t layer = 0; layer < trace.layers(); ++layer) {
    std::vector<float> o(h.n_qo * d);
    for (std::size_t head = 0; head < h.n_qo; ++head) {
      detail::attend_positions(trace, layer, head / g, trace.query(step, layer).subspan(head * d, d), all,
                               std::span<float>(o).subspan(head * d, d));
    }
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace freekv::oracle
