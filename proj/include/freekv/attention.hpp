// SPDX-License-Identifier: Apache-2.0
//
// Decoding attention under GQA: exact attention over a full context and
// sparse attention over the tokens the device cache holds for a selection.
// Logits, softmax and the weighted sum accumulate in double, tokens in
// ascending position order.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "freekv/core.hpp"
#include "freekv/selection.hpp"
#include "freekv/tiered_store.hpp"

namespace freekv {

struct AttentionOutput {
  std::size_t n_heads = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  AttentionOutput() = default;
  AttentionOutput(std::size_t heads, std::size_t d) : n_heads(heads), dim(d), values(heads * d) {}

  std::span<const float> head(std::size_t h) const { return std::span<const float>(values).subspan(h * dim, dim); }
  std::span<float> head(std::size_t h) { return std::span<float>(values).subspan(h * dim, dim); }
};

/// One attended token: its absolute position and its key/value vectors.
struct TokenRef {
  std::size_t pos = 0;
  const float* key = nullptr;
  const float* value = nullptr;
};

/// softmax(q K^T / sqrt(d)) V over `tokens`, in the order given. When
/// `weights` is non-null it receives the softmax weights.
inline void attend(std::span<const float> q, std::span<const TokenRef> tokens, std::span<float> out,
                   std::vector<double>* weights = nullptr) {
  if (tokens.empty()) throw Error(ErrorCode::EmptyContext, "attention over zero tokens");
  const std::size_t d = q.size();
  const double scale = std::sqrt(static_cast<double>(d));

  std::vector<double> logits(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(q[c]) * static_cast<double>(tokens[i].key[c]);
    logits[i] = acc / scale;
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - m);
    sum += l;
  }

  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const double w = logits[i];
    for (std::size_t c = 0; c < d; ++c) acc[c] += w * static_cast<double>(tokens[i].value[c]);
  }
  for (std::size_t c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c] / sum);

  if (weights) {
    weights->resize(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) (*weights)[i] = logits[i] / sum;
  }
}

/// Exact attention for one head. K and V are L rows of `dim` elements each,
/// consecutive rows `stride` elements apart.
inline std::vector<float> exact_attention(std::span<const float> q, const float* keys, const float* values,
                                          std::size_t length, std::size_t stride) {
  if (length == 0) throw Error(ErrorCode::EmptyContext, "exact attention needs L >= 1");
  std::vector<TokenRef> refs(length);
  for (std::size_t t = 0; t < length; ++t) refs[t] = {t, keys + t * stride, values + t * stride};
  std::vector<float> out(q.size());
  attend(q, refs, out);
  return out;
}

/// Exact GQA attention: q is n_qo x d, K and V are NHD (L, n_kv, d).
inline AttentionOutput exact_attention_gqa(std::span<const float> queries, std::span<const float> keys,
                                           std::span<const float> values, const ModelDims& dims) {
  const std::size_t row = dims.n_kv * dims.head_dim;
  if (keys.size() != values.size() || keys.size() % row != 0) throw Error(ErrorCode::DimMismatch, "K/V shape");
  const std::size_t length = keys.size() / row;
  AttentionOutput out(dims.n_qo, dims.head_dim);
  for (std::size_t h = 0; h < dims.n_qo; ++h) {
    const std::size_t kvh = dims.kv_head_of(h);
    auto o = exact_attention(queries.subspan(h * dims.head_dim, dims.head_dim), keys.data() + kvh * dims.head_dim,
                             values.data() + kvh * dims.head_dim, length, row);
    std::copy(o.begin(), o.end(), out.head(h).begin());
  }
  return out;
}

/// Sink tokens, selected pages and window tokens held by the cache for one KV
/// head, deduplicated by position and sorted ascending.
inline std::vector<TokenRef> gather_tokens(const DeviceCache& cache, std::span<const PageId> pages,
                                           std::size_t kv_head) {
  const std::size_t p = cache.dims().page_size;
  std::vector<TokenRef> refs;
  for (std::size_t pos = 0; pos < cache.sink_length(); ++pos) {
    refs.push_back({pos, cache.sink_key(pos, kv_head), cache.sink_value(pos, kv_head)});
  }
  for (auto page : pages) {
    const auto slot = cache.slot_of(kv_head, page);
    if (!slot) {
      throw Error(ErrorCode::PageNotResident,
                  "page " + std::to_string(page) + " for KV head " + std::to_string(kv_head));
    }
    for (std::size_t t = 0; t < p; ++t) {
      refs.push_back({page * p + t, cache.slot_key(*slot, t, kv_head), cache.slot_value(*slot, t, kv_head)});
    }
  }
  for (std::size_t pos = cache.window_begin(); pos < cache.context_length(); ++pos) {
    refs.push_back({pos, cache.window_key(pos, kv_head), cache.window_value(pos, kv_head)});
  }
  std::stable_sort(refs.begin(), refs.end(), [](const TokenRef& a, const TokenRef& b) { return a.pos < b.pos; });
  refs.erase(std::unique(refs.begin(), refs.end(), [](const TokenRef& a, const TokenRef& b) { return a.pos == b.pos; }),
             refs.end());
  return refs;
}

inline AttentionOutput sparse_attention(std::span<const float> queries, const DeviceCache& cache,
                                        const SelectionResult& used) {
  const auto& dims = cache.dims();
  if (queries.size() != dims.n_qo * dims.head_dim) throw Error(ErrorCode::DimMismatch, "queries must be n_qo x d");
  AttentionOutput out(dims.n_qo, dims.head_dim);
  for (std::size_t kvh = 0; kvh < dims.n_kv; ++kvh) {
    const auto refs = gather_tokens(cache, used.pages(kvh), kvh);
    for (std::size_t j = 0; j < dims.group_size(); ++j) {
      const std::size_t h = kvh * dims.group_size() + j;
      attend(queries.subspan(h * dims.head_dim, dims.head_dim), refs, out.head(h));
    }
  }
  return out;
}

}  // namespace freekv
