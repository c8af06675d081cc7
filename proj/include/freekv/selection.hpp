// SPDX-License-Identifier: Apache-2.0
//
// Page summaries, per-head page scoring, group-consistent pooling and top-k
// page selection.

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

namespace freekv {

/// Channelwise min and max of a page's keys, per KV head.
class PageSummary {
 public:
  PageSummary() = default;
  PageSummary(std::size_t n_kv, std::size_t dim)
      : n_kv_(n_kv), dim_(dim),
        min_(n_kv * dim, std::numeric_limits<float>::infinity()),
        max_(n_kv * dim, -std::numeric_limits<float>::infinity()) {}

  std::size_t heads() const { return n_kv_; }
  std::size_t dim() const { return dim_; }

  std::span<const float> min_key(std::size_t h) const { return std::span<const float>(min_).subspan(h * dim_, dim_); }
  std::span<const float> max_key(std::size_t h) const { return std::span<const float>(max_).subspan(h * dim_, dim_); }
  std::span<float> min_key(std::size_t h) { return std::span<float>(min_).subspan(h * dim_, dim_); }
  std::span<float> max_key(std::size_t h) { return std::span<float>(max_).subspan(h * dim_, dim_); }

  bool operator==(const PageSummary&) const = default;

 private:
  std::size_t n_kv_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> min_;
  std::vector<float> max_;
};

inline PageSummary summarize_page(const NhdPage<float>& keys) {
  PageSummary s(keys.heads(), keys.dim());
  for (std::size_t h = 0; h < keys.heads(); ++h) {
    auto lo = s.min_key(h);
    auto hi = s.max_key(h);
    for (std::size_t t = 0; t < keys.tokens(); ++t) {
      for (std::size_t c = 0; c < keys.dim(); ++c) {
        const float k = keys.at(t, h, c);
        lo[c] = std::min(lo[c], k);
        hi[c] = std::max(hi[c], k);
      }
    }
  }
  return s;
}

/// Upper bound of q.k / sqrt(d) over every key inside the min/max box.
inline double page_score(std::span<const float> q, std::span<const float> min_key, std::span<const float> max_key) {
  if (q.size() != min_key.size() || q.size() != max_key.size()) {
    throw Error(ErrorCode::DimMismatch, "query and summary dims differ");
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < q.size(); ++c) {
    const double qc = q[c];
    acc += std::max(qc * static_cast<double>(min_key[c]), qc * static_cast<double>(max_key[c]));
  }
  return acc / std::sqrt(static_cast<double>(q.size()));
}

inline double page_score(std::span<const float> q, const PageSummary& summary, std::size_t kv_head) {
  return page_score(q, summary.min_key(kv_head), summary.max_key(kv_head));
}

inline std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> out(x.size());
  if (x.empty()) return out;
  const double m = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - m);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

/// Raw per-head page scores P^h over the candidate pages, one row per head.
using PageScores = std::vector<std::vector<double>>;

/// Pools one group's G per-head score vectors into the KV head's ranking
/// vector. The Q variants pool queries before scoring and are handled by
/// score_group instead.
inline std::vector<double> pool_group_scores(std::span<const std::vector<double>> scores, GroupPooling method,
                                             std::size_t group_size) {
  if (scores.size() != group_size || group_size == 0) {
    throw Error(ErrorCode::GroupSizeMismatch, "expected exactly G head score vectors");
  }
  const std::size_t n = scores.front().size();
  for (const auto& row : scores) {
    if (row.size() != n) throw Error(ErrorCode::GroupSizeMismatch, "ragged head score vectors");
  }

  std::vector<double> pooled(n, 0.0);
  switch (method) {
    case GroupPooling::MeanS: {
      for (const auto& row : scores) {
        const auto s = softmax(row);
        for (std::size_t j = 0; j < n; ++j) pooled[j] += s[j];
      }
      for (auto& v : pooled) v /= static_cast<double>(group_size);
      break;
    }
    case GroupPooling::MaxS: {
      std::fill(pooled.begin(), pooled.end(), -std::numeric_limits<double>::infinity());
      for (const auto& row : scores) {
        const auto s = softmax(row);
        for (std::size_t j = 0; j < n; ++j) pooled[j] = std::max(pooled[j], s[j]);
      }
      break;
    }
    case GroupPooling::MeanQK: {
      for (const auto& row : scores) {
        for (std::size_t j = 0; j < n; ++j) pooled[j] += row[j];
      }
      for (auto& v : pooled) v /= static_cast<double>(group_size);
      break;
    }
    case GroupPooling::MaxQK: {
      std::fill(pooled.begin(), pooled.end(), -std::numeric_limits<double>::infinity());
      for (const auto& row : scores) {
        for (std::size_t j = 0; j < n; ++j) pooled[j] = std::max(pooled[j], row[j]);
      }
      break;
    }
    case GroupPooling::MeanQ:
    case GroupPooling::MaxQ:
      throw Error(ErrorCode::GroupSizeMismatch, "query pooling must go through score_group");
  }
  return pooled;
}

/// Per-KV-head lists of selected page ids, sorted ascending. The G attention
/// heads of a group all read their KV head's list.
class SelectionResult {
 public:
  SelectionResult() = default;
  explicit SelectionResult(std::size_t n_kv) : pages_(n_kv) {}
  explicit SelectionResult(std::vector<std::vector<PageId>> pages) : pages_(std::move(pages)) {
    for (auto& list : pages_) std::sort(list.begin(), list.end());
  }

  std::size_t heads() const { return pages_.size(); }
  std::span<const PageId> pages(std::size_t kv_head) const { return pages_[kv_head]; }
  void set(std::size_t kv_head, std::vector<PageId> list) {
    std::sort(list.begin(), list.end());
    pages_[kv_head] = std::move(list);
  }

  /// The list attention head `head` consumes.
  std::span<const PageId> for_attention_head(std::size_t head, std::size_t group_size) const {
    return pages_[head / group_size];
  }

  bool operator==(const SelectionResult&) const = default;

 private:
  std::vector<std::vector<PageId>> pages_;
};

/// Top-k page ids from one score vector: highest score first, ties to the
/// lower page id; returned sorted by page id.
inline std::vector<PageId> select_topk(std::span<const double> scores, std::size_t k, PageId first_page = 0) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(k, order.size());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), better);
  std::vector<PageId> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(first_page + static_cast<PageId>(order[i]));
  std::sort(out.begin(), out.end());
  return out;
}

inline SelectionResult select_topk(std::span<const std::vector<double>> pooled, std::size_t k, PageId first_page = 0) {
  SelectionResult out(pooled.size());
  for (std::size_t h = 0; h < pooled.size(); ++h) out.set(h, select_topk(pooled[h], k, first_page));
  return out;
}

/// Raw scores of one query against candidate summaries [first, summaries.size()).
inline std::vector<double> score_pages(std::span<const float> q, std::span<const PageSummary> summaries,
                                       PageId first_candidate, std::size_t kv_head) {
  std::vector<double> out;
  for (std::size_t id = first_candidate; id < summaries.size(); ++id) {
    out.push_back(page_score(q, summaries[id], kv_head));
  }
  return out;
}

/// Ranking vector for KV head `kv_head` given all n_qo queries (n_qo x d).
inline std::vector<double> score_group(std::span<const float> queries, std::span<const PageSummary> summaries,
                                       PageId first_candidate, std::size_t kv_head, const ModelDims& dims,
                                       GroupPooling method) {
  const std::size_t g = dims.group_size();
  const std::size_t d = dims.head_dim;
  if (queries.size() != dims.n_qo * d) throw Error(ErrorCode::DimMismatch, "queries must be n_qo x d");

  if (method == GroupPooling::MeanQ || method == GroupPooling::MaxQ) {
    std::vector<float> pooled_q(d, method == GroupPooling::MaxQ ? -std::numeric_limits<float>::infinity() : 0.0f);
    for (std::size_t j = 0; j < g; ++j) {
      const auto q = queries.subspan((kv_head * g + j) * d, d);
      for (std::size_t c = 0; c < d; ++c) {
        pooled_q[c] = method == GroupPooling::MaxQ ? std::max(pooled_q[c], q[c]) : pooled_q[c] + q[c];
      }
    }
    if (method == GroupPooling::MeanQ) {
      for (auto& v : pooled_q) v /= static_cast<float>(g);
    }
    return score_pages(pooled_q, summaries, first_candidate, kv_head);
  }

  PageScores per_head;
  per_head.reserve(g);
  for (std::size_t j = 0; j < g; ++j) {
    per_head.push_back(score_pages(queries.subspan((kv_head * g + j) * d, d), summaries, first_candidate, kv_head));
  }
  return pool_group_scores(per_head, method, g);
}

/// Full group-consistent selection over candidate pages [first, summaries.size()).
inline SelectionResult select_pages(std::span<const float> queries, std::span<const PageSummary> summaries,
                                    PageId first_candidate, const EngineConfig& cfg) {
  SelectionResult out(cfg.dims.n_kv);
  if (first_candidate >= summaries.size()) return out;
  for (std::size_t h = 0; h < cfg.dims.n_kv; ++h) {
    const auto pooled = score_group(queries, summaries, first_candidate, h, cfg.dims, cfg.spec.pooling);
    out.set(h, select_topk(pooled, cfg.selectable_pages, first_candidate));
  }
  return out;
}

}  // namespace freekv
