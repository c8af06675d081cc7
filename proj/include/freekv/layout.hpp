// SPDX-License-Identifier: Apache-2.0
//
// Paged KV layouts. Device pages are NHD, shape (p, n_kv, d), token-major.
// Host pages are HND with keys and values combined, shape (n_kv, 2, p, d), so
// one KV head's share of a page is a single contiguous block.
//
// Both layouts are row-major; the channel order within d is the natural one.

#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "freekv/core.hpp"

namespace freekv {

template <class T>
class NhdPage {
 public:
  NhdPage() = default;
  NhdPage(std::size_t tokens, std::size_t n_kv, std::size_t dim)
      : tokens_(tokens), n_kv_(n_kv), dim_(dim), data_(tokens * n_kv * dim) {}
  NhdPage(std::size_t tokens, std::size_t n_kv, std::size_t dim, std::vector<T> data)
      : tokens_(tokens), n_kv_(n_kv), dim_(dim), data_(std::move(data)) {
    if (data_.size() != tokens * n_kv * dim) {
      throw Error(ErrorCode::DimMismatch, "NHD page payload does not match (p, n_kv, d)");
    }
  }

  std::size_t tokens() const { return tokens_; }
  std::size_t heads() const { return n_kv_; }
  std::size_t dim() const { return dim_; }

  T& at(std::size_t t, std::size_t h, std::size_t c) { return data_[(t * n_kv_ + h) * dim_ + c]; }
  const T& at(std::size_t t, std::size_t h, std::size_t c) const { return data_[(t * n_kv_ + h) * dim_ + c]; }

  /// The d-vector of token t for KV head h.
  std::span<const T> vec(std::size_t t, std::size_t h) const { return {&at(t, h, 0), dim_}; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  bool operator==(const NhdPage&) const = default;

 private:
  std::size_t tokens_ = 0;
  std::size_t n_kv_ = 0;
  std::size_t dim_ = 0;
  std::vector<T> data_;
};

template <class T>
class HndCombinedPage {
 public:
  HndCombinedPage() = default;
  HndCombinedPage(std::size_t n_kv, std::size_t tokens, std::size_t dim)
      : n_kv_(n_kv), tokens_(tokens), dim_(dim), data_(n_kv * 2 * tokens * dim) {}
  HndCombinedPage(std::size_t n_kv, std::size_t tokens, std::size_t dim, std::vector<T> data)
      : n_kv_(n_kv), tokens_(tokens), dim_(dim), data_(std::move(data)) {
    if (data_.size() != n_kv * 2 * tokens * dim) {
      throw Error(ErrorCode::DimMismatch, "HND page payload does not match (n_kv, 2, p, d)");
    }
  }

  std::size_t tokens() const { return tokens_; }
  std::size_t heads() const { return n_kv_; }
  std::size_t dim() const { return dim_; }

  /// kv == 0 selects keys, kv == 1 values.
  T& at(std::size_t h, std::size_t kv, std::size_t t, std::size_t c) {
    return data_[((h * 2 + kv) * tokens_ + t) * dim_ + c];
  }
  const T& at(std::size_t h, std::size_t kv, std::size_t t, std::size_t c) const {
    return data_[((h * 2 + kv) * tokens_ + t) * dim_ + c];
  }

  /// The 2*p*d contiguous elements (K then V) of KV head h.
  std::span<const T> head_block(std::size_t h) const {
    return std::span<const T>(data_).subspan(h * 2 * tokens_ * dim_, 2 * tokens_ * dim_);
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  bool operator==(const HndCombinedPage&) const = default;

 private:
  std::size_t n_kv_ = 0;
  std::size_t tokens_ = 0;
  std::size_t dim_ = 0;
  std::vector<T> data_;
};

template <class T>
HndCombinedPage<T> transpose_to_hnd(const NhdPage<T>& k_page, const NhdPage<T>& v_page) {
  if (k_page.tokens() != v_page.tokens() || k_page.heads() != v_page.heads() || k_page.dim() != v_page.dim()) {
    throw Error(ErrorCode::DimMismatch, "K and V pages disagree on (p, n_kv, d)");
  }
  HndCombinedPage<T> out(k_page.heads(), k_page.tokens(), k_page.dim());
  for (std::size_t t = 0; t < k_page.tokens(); ++t) {
    for (std::size_t h = 0; h < k_page.heads(); ++h) {
      for (std::size_t c = 0; c < k_page.dim(); ++c) {
        out.at(h, 0, t, c) = k_page.at(t, h, c);
        out.at(h, 1, t, c) = v_page.at(t, h, c);
      }
    }
  }
  return out;
}

template <class T>
std::pair<NhdPage<T>, NhdPage<T>> transpose_to_nhd(const HndCombinedPage<T>& page) {
  if (page.data().size() != page.heads() * 2 * page.tokens() * page.dim()) {
    throw Error(ErrorCode::DimMismatch, "malformed HND page");
  }
  NhdPage<T> k(page.tokens(), page.heads(), page.dim());
  NhdPage<T> v(page.tokens(), page.heads(), page.dim());
  for (std::size_t h = 0; h < page.heads(); ++h) {
    for (std::size_t t = 0; t < page.tokens(); ++t) {
      for (std::size_t c = 0; c < page.dim(); ++c) {
        k.at(t, h, c) = page.at(h, 0, t, c);
        v.at(t, h, c) = page.at(h, 1, t, c);
      }
    }
  }
  return {std::move(k), std::move(v)};
}

/// Layouts whose per-head transfer units can be analysed.
enum class LayoutKind {
  NhdPage,      ///< one K (or V) page, (p, n_kv, d)
  HndPage,      ///< one K (or V) page, (n_kv, p, d)
  HndCombined,  ///< K and V together, (n_kv, 2, p, d)
  NhdCombined,  ///< a K NHD page followed by a V NHD page, (2, p, n_kv, d)
};

struct ContiguousRun {
  std::size_t byte_offset = 0;
  std::size_t byte_len = 0;

  bool operator==(const ContiguousRun&) const = default;
};

/// Same as ContiguousRun but counted in elements.
struct ElementRun {
  std::size_t offset = 0;
  std::size_t len = 0;
};

/// Minimal sorted list of element ranges holding KV head `kv_head`'s data in
/// one page of the given layout. Adjacent ranges are merged, so with n_kv == 1
/// the NHD layouts collapse to one run per K/V block.
inline std::vector<ElementRun> contiguous_element_runs(LayoutKind kind, const ModelDims& dims, std::size_t kv_head) {
  if (kv_head >= dims.n_kv) throw Error(ErrorCode::DimMismatch, "kv_head out of range");
  const std::size_t p = dims.page_size;
  const std::size_t d = dims.head_dim;
  const std::size_t n = dims.n_kv;

  std::vector<ElementRun> raw;
  switch (kind) {
    case LayoutKind::NhdPage:
      for (std::size_t t = 0; t < p; ++t) raw.push_back({(t * n + kv_head) * d, d});
      break;
    case LayoutKind::HndPage:
      raw.push_back({kv_head * p * d, p * d});
      break;
    case LayoutKind::HndCombined:
      raw.push_back({kv_head * 2 * p * d, 2 * p * d});
      break;
    case LayoutKind::NhdCombined:
      for (std::size_t kv = 0; kv < 2; ++kv) {
        for (std::size_t t = 0; t < p; ++t) raw.push_back({kv * p * n * d + (t * n + kv_head) * d, d});
      }
      break;
  }

  std::vector<ElementRun> merged;
  for (const auto& run : raw) {
    if (run.len == 0) continue;
    if (!merged.empty() && merged.back().offset + merged.back().len == run.offset) {
      merged.back().len += run.len;
    } else {
      merged.push_back(run);
    }
  }
  return merged;
}

inline std::vector<ContiguousRun> contiguous_runs(LayoutKind kind, const ModelDims& dims, std::size_t kv_head) {
  std::vector<ContiguousRun> out;
  for (const auto& run : contiguous_element_runs(kind, dims, kv_head)) {
    out.push_back({run.offset * dims.elem_bytes, run.len * dims.elem_bytes});
  }
  return out;
}

}  // namespace freekv
