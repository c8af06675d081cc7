// SPDX-License-Identifier: Apache-2.0
//
// Two-tier KV storage. The host pool keeps every full page in HND combined
// layout; the device cache keeps pinned sink/window tokens plus a bounded set
// of recalled pages per KV head in NHD arenas. Recall moves the delta between
// a selection and what is already resident.

#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <future>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <thread>
#include <tuple>
#include <vector>

#include "freekv/core.hpp"
#include "freekv/layout.hpp"
#include "freekv/selection.hpp"

namespace freekv {

/// Host page organisation. Nhd exists only to measure fragmented transfers.
enum class HostLayout { Hnd, Nhd };

inline LayoutKind host_block_layout(HostLayout layout) {
  return layout == HostLayout::Hnd ? LayoutKind::HndCombined : LayoutKind::NhdCombined;
}

inline std::string_view to_string(HostLayout layout) { return layout == HostLayout::Hnd ? "hnd" : "nhd"; }

inline std::optional<HostLayout> parse_host_layout(std::string_view text) {
  if (text == "hnd") return HostLayout::Hnd;
  if (text == "nhd") return HostLayout::Nhd;
  return std::nullopt;
}

class HostPool {
 public:
  explicit HostPool(const ModelDims& dims, HostLayout layout = HostLayout::Hnd) : dims_(dims), layout_(layout) {}

  const ModelDims& dims() const { return dims_; }
  HostLayout layout() const { return layout_; }
  std::size_t size() const { return blocks_.size(); }
  bool contains(PageId id) const { return id < blocks_.size(); }

  /// Raw block of one page in the pool's layout.
  std::span<const float> block(PageId id) const {
    if (!contains(id)) throw Error(ErrorCode::MissingHostPage, "page " + std::to_string(id));
    return blocks_[id];
  }

  PageId append(const NhdPage<float>& k_page, const NhdPage<float>& v_page) {
    if (layout_ == HostLayout::Hnd) {
      auto hnd = transpose_to_hnd(k_page, v_page);
      blocks_.emplace_back(hnd.data().begin(), hnd.data().end());
    } else {
      std::vector<float> block(k_page.data().begin(), k_page.data().end());
      block.insert(block.end(), v_page.data().begin(), v_page.data().end());
      blocks_.push_back(std::move(block));
    }
    return static_cast<PageId>(blocks_.size() - 1);
  }

 private:
  ModelDims dims_;
  HostLayout layout_;
  std::vector<std::vector<float>> blocks_;
};

/// Transposes a full device page and appends it to the host pool.
inline PageId offload_full_page(HostPool& host, const NhdPage<float>& k_page, const NhdPage<float>& v_page) {
  const auto& dims = host.dims();
  if (k_page.tokens() != dims.page_size || v_page.tokens() != dims.page_size) {
    throw Error(ErrorCode::DimMismatch, "only full pages are offloaded");
  }
  if (k_page.heads() != dims.n_kv || k_page.dim() != dims.head_dim) {
    throw Error(ErrorCode::DimMismatch, "page dims differ from the pool");
  }
  return host.append(k_page, v_page);
}

/// A page leaving the device's pinned regions, ready to be offloaded.
struct OffloadedPage {
  PageId page = 0;
  NhdPage<float> k;
  NhdPage<float> v;
  bool stays_pinned = false;  ///< sink pages keep their device copy
};

class DeviceCache {
 public:
  static constexpr std::size_t kEmpty = static_cast<std::size_t>(-1);

  explicit DeviceCache(const EngineConfig& cfg)
      : dims_(cfg.dims),
        capacity_(cfg.selectable_pages),
        sink_tokens_(cfg.budget.sink_tokens),
        window_tokens_(cfg.budget.window_tokens),
        ring_tokens_(cfg.budget.window_tokens + cfg.dims.page_size),
        slot_k_(capacity_ * dims_.page_elems()),
        slot_v_(capacity_ * dims_.page_elems()),
        slot_page_(dims_.n_kv, std::vector<std::size_t>(capacity_, kEmpty)),
        last_used_(dims_.n_kv, std::vector<std::uint64_t>(capacity_, 0)),
        sink_k_(sink_tokens_ * dims_.n_kv * dims_.head_dim),
        sink_v_(sink_k_.size()),
        ring_k_(ring_tokens_ * dims_.n_kv * dims_.head_dim),
        ring_v_(ring_k_.size()),
        window_begin_(sink_tokens_) {}

  const ModelDims& dims() const { return dims_; }
  std::size_t capacity() const { return capacity_; }

  // ---- recalled-page slots -------------------------------------------------

  std::optional<std::size_t> slot_of(std::size_t kv_head, PageId page) const {
    const auto& row = slot_page_[kv_head];
    for (std::size_t s = 0; s < row.size(); ++s) {
      if (row[s] == page) return s;
    }
    return std::nullopt;
  }

  std::optional<PageId> page_in(std::size_t kv_head, std::size_t slot) const {
    const auto id = slot_page_[kv_head][slot];
    if (id == kEmpty) return std::nullopt;
    return static_cast<PageId>(id);
  }

  std::vector<PageId> resident(std::size_t kv_head) const {
    std::vector<PageId> out;
    for (auto id : slot_page_[kv_head]) {
      if (id != kEmpty) out.push_back(static_cast<PageId>(id));
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<std::size_t> free_slots(std::size_t kv_head) const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < capacity_; ++s) {
      if (slot_page_[kv_head][s] == kEmpty) out.push_back(s);
    }
    return out;
  }

  std::uint64_t last_used(std::size_t kv_head, std::size_t slot) const { return last_used_[kv_head][slot]; }

  /// Stamps the given resident pages as most recently used.
  void mark_used(std::size_t kv_head, std::span<const PageId> pages) {
    ++clock_;
    for (auto page : pages) {
      if (auto s = slot_of(kv_head, page)) last_used_[kv_head][*s] = clock_;
    }
  }

  void evict(std::size_t kv_head, std::size_t slot) { slot_page_[kv_head][slot] = kEmpty; }

  /// Converts a staged (2, p, d) head block into the NHD slot arenas.
  void install(std::size_t kv_head, std::size_t slot, PageId page, std::span<const float> staged) {
    const std::size_t p = dims_.page_size;
    const std::size_t d = dims_.head_dim;
    if (staged.size() != 2 * p * d) throw Error(ErrorCode::DimMismatch, "staged block must be 2 x p x d");
    if (slot >= capacity_) throw Error(ErrorCode::CapacityExceeded, "slot out of range");
    float* k = slot_k_.data() + slot * dims_.page_elems();
    float* v = slot_v_.data() + slot * dims_.page_elems();
    for (std::size_t t = 0; t < p; ++t) {
      std::memcpy(k + (t * dims_.n_kv + kv_head) * d, staged.data() + t * d, d * sizeof(float));
      std::memcpy(v + (t * dims_.n_kv + kv_head) * d, staged.data() + (p + t) * d, d * sizeof(float));
    }
    slot_page_[kv_head][slot] = page;
  }

  const float* slot_key(std::size_t slot, std::size_t t, std::size_t kv_head) const {
    return slot_k_.data() + slot * dims_.page_elems() + (t * dims_.n_kv + kv_head) * dims_.head_dim;
  }
  const float* slot_value(std::size_t slot, std::size_t t, std::size_t kv_head) const {
    return slot_v_.data() + slot * dims_.page_elems() + (t * dims_.n_kv + kv_head) * dims_.head_dim;
  }

  std::span<const float> slot_keys() const { return slot_k_; }
  std::span<const float> slot_values() const { return slot_v_; }

  // ---- pinned sink and window regions ------------------------------------

  std::size_t context_length() const { return length_; }
  std::size_t sink_length() const { return std::min(length_, sink_tokens_); }
  /// First token position held by the window ring.
  std::size_t window_begin() const { return window_begin_; }
  /// Page ids [sink_pages, first_unoffloaded) are the selectable host pages.
  std::size_t offloaded_pages() const { return window_begin_ / dims_.page_size; }

  /// Appends one token's K and V (n_kv x d each). A page that fills the sink,
  /// or the oldest window page once the window exceeds W tokens, is returned
  /// for offloading.
  std::optional<OffloadedPage> append_token(std::span<const float> k, std::span<const float> v) {
    const std::size_t row = dims_.n_kv * dims_.head_dim;
    if (k.size() != row || v.size() != row) throw Error(ErrorCode::DimMismatch, "token K/V must be n_kv x d");
    const std::size_t pos = length_++;
    const std::size_t p = dims_.page_size;

    if (pos < sink_tokens_) {
      std::copy(k.begin(), k.end(), sink_k_.begin() + static_cast<std::ptrdiff_t>(pos * row));
      std::copy(v.begin(), v.end(), sink_v_.begin() + static_cast<std::ptrdiff_t>(pos * row));
      if ((pos + 1) % p != 0) return std::nullopt;
      const std::size_t first = pos + 1 - p;
      OffloadedPage out{static_cast<PageId>(first / p), copy_page(sink_k_, first * row),
                        copy_page(sink_v_, first * row), true};
      return out;
    }

    const std::size_t ring_pos = (pos - sink_tokens_) % ring_tokens_;
    std::copy(k.begin(), k.end(), ring_k_.begin() + static_cast<std::ptrdiff_t>(ring_pos * row));
    std::copy(v.begin(), v.end(), ring_v_.begin() + static_cast<std::ptrdiff_t>(ring_pos * row));

    const std::size_t in_window = length_ - window_begin_;
    if (in_window <= window_tokens_ || in_window < p) return std::nullopt;
    const std::size_t ring_first = (window_begin_ - sink_tokens_) % ring_tokens_;
    OffloadedPage out{static_cast<PageId>(window_begin_ / p), copy_page(ring_k_, ring_first * row),
                      copy_page(ring_v_, ring_first * row), false};
    window_begin_ += p;
    return out;
  }

  const float* sink_key(std::size_t pos, std::size_t kv_head) const {
    return sink_k_.data() + (pos * dims_.n_kv + kv_head) * dims_.head_dim;
  }
  const float* sink_value(std::size_t pos, std::size_t kv_head) const {
    return sink_v_.data() + (pos * dims_.n_kv + kv_head) * dims_.head_dim;
  }
  const float* window_key(std::size_t pos, std::size_t kv_head) const {
    return ring_k_.data() + (ring_index(pos) * dims_.n_kv + kv_head) * dims_.head_dim;
  }
  const float* window_value(std::size_t pos, std::size_t kv_head) const {
    return ring_v_.data() + (ring_index(pos) * dims_.n_kv + kv_head) * dims_.head_dim;
  }

  /// Residency bookkeeping is self-consistent: no page appears twice for a
  /// head and no head holds more than capacity pages.
  bool consistent() const {
    for (const auto& row : slot_page_) {
      std::vector<std::size_t> ids;
      for (auto id : row) {
        if (id != kEmpty) ids.push_back(id);
      }
      if (ids.size() > capacity_) return false;
      std::sort(ids.begin(), ids.end());
      if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) return false;
    }
    return window_begin_ >= sink_tokens_ && window_begin_ <= std::max(length_, sink_tokens_);
  }

 private:
  std::size_t ring_index(std::size_t pos) const { return (pos - sink_tokens_) % ring_tokens_; }

  NhdPage<float> copy_page(const std::vector<float>& src, std::size_t offset) const {
    const auto n = dims_.page_elems();
    std::vector<float> data(src.begin() + static_cast<std::ptrdiff_t>(offset),
                            src.begin() + static_cast<std::ptrdiff_t>(offset + n));
    return NhdPage<float>(dims_.page_size, dims_.n_kv, dims_.head_dim, std::move(data));
  }

  ModelDims dims_;
  std::size_t capacity_;
  std::size_t sink_tokens_;
  std::size_t window_tokens_;
  std::size_t ring_tokens_;

  std::vector<float> slot_k_;
  std::vector<float> slot_v_;
  std::vector<std::vector<std::size_t>> slot_page_;
  std::vector<std::vector<std::uint64_t>> last_used_;
  std::uint64_t clock_ = 0;

  std::vector<float> sink_k_;
  std::vector<float> sink_v_;
  std::vector<float> ring_k_;
  std::vector<float> ring_v_;
  std::size_t length_ = 0;
  std::size_t window_begin_;
};

struct PageFetch {
  PageId page = 0;
  std::size_t slot = 0;
  bool operator==(const PageFetch&) const = default;
};

struct PageEviction {
  PageId page = 0;
  std::size_t slot = 0;
  bool operator==(const PageEviction&) const = default;
};

struct HeadRecallPlan {
  std::size_t kv_head = 0;
  std::vector<PageFetch> fetch;
  std::vector<PageEviction> evict;
  std::vector<PageId> reuse;
  /// Runs of this head's data inside one host block.
  std::vector<ContiguousRun> source_runs;
};

struct TransferPlan {
  HostLayout host_layout = HostLayout::Hnd;
  std::vector<HeadRecallPlan> heads;

  std::size_t pages_to_fetch() const {
    std::size_t n = 0;
    for (const auto& h : heads) n += h.fetch.size();
    return n;
  }
  bool empty() const { return pages_to_fetch() == 0; }
};

struct TransferStats {
  std::size_t copy_op_count = 0;
  std::size_t bytes_moved = 0;
  std::size_t pages_fetched = 0;
  std::size_t pages_reused = 0;

  TransferStats& operator+=(const TransferStats& o) {
    copy_op_count += o.copy_op_count;
    bytes_moved += o.bytes_moved;
    pages_fetched += o.pages_fetched;
    pages_reused += o.pages_reused;
    return *this;
  }
  bool operator==(const TransferStats&) const = default;
};

/// Delta recall plan for the listed KV heads: fetch selected pages that are
/// not resident, reuse the rest, and evict unselected residents only when the
/// free slots run out (least recently used first, ties to the lower page id).
inline TransferPlan plan_recall(const SelectionResult& selection, const DeviceCache& cache, HostLayout host_layout,
                                std::span<const std::size_t> kv_heads) {
  TransferPlan plan;
  plan.host_layout = host_layout;
  for (auto h : kv_heads) {
    const auto wanted = selection.pages(h);
    if (wanted.size() > cache.capacity()) {
      throw Error(ErrorCode::CapacityExceeded, "selection of " + std::to_string(wanted.size()) +
                                                   " pages exceeds " + std::to_string(cache.capacity()) + " slots");
    }
    HeadRecallPlan head;
    head.kv_head = h;
    head.source_runs = contiguous_runs(host_block_layout(host_layout), cache.dims(), h);

    std::vector<PageId> missing;
    for (auto page : wanted) {
      if (cache.slot_of(h, page)) {
        head.reuse.push_back(page);
      } else {
        missing.push_back(page);
      }
    }

    auto slots = cache.free_slots(h);
    if (slots.size() < missing.size()) {
      std::vector<std::tuple<std::uint64_t, PageId, std::size_t>> victims;
      for (std::size_t s = 0; s < cache.capacity(); ++s) {
        auto page = cache.page_in(h, s);
        if (page && !std::binary_search(wanted.begin(), wanted.end(), *page)) {
          victims.emplace_back(cache.last_used(h, s), *page, s);
        }
      }
      std::sort(victims.begin(), victims.end());
      const std::size_t need = missing.size() - slots.size();
      for (std::size_t i = 0; i < need; ++i) {
        head.evict.push_back({std::get<1>(victims[i]), std::get<2>(victims[i])});
        slots.push_back(std::get<2>(victims[i]));
      }
    }
    for (std::size_t i = 0; i < missing.size(); ++i) head.fetch.push_back({missing[i], slots[i]});
    plan.heads.push_back(std::move(head));
  }
  return plan;
}

inline TransferPlan plan_recall(const SelectionResult& selection, const DeviceCache& cache,
                                HostLayout host_layout = HostLayout::Hnd) {
  std::vector<std::size_t> all(selection.heads());
  for (std::size_t h = 0; h < all.size(); ++h) all[h] = h;
  return plan_recall(selection, cache, host_layout, all);
}

namespace detail {

struct RecallItem {
  std::size_t kv_head;
  PageFetch fetch;
  const std::vector<ContiguousRun>* runs;
};

inline std::vector<RecallItem> prepare_recall(const TransferPlan& plan, const HostPool& host, DeviceCache& cache,
                                              TransferStats& stats) {
  if (plan.host_layout != host.layout()) throw Error(ErrorCode::DimMismatch, "plan and host pool layouts differ");
  std::vector<RecallItem> items;
  for (const auto& head : plan.heads) {
    for (const auto& f : head.fetch) {
      if (!host.contains(f.page)) throw Error(ErrorCode::MissingHostPage, "page " + std::to_string(f.page));
      items.push_back({head.kv_head, f, &head.source_runs});
    }
  }
  for (const auto& head : plan.heads) {
    for (const auto& e : head.evict) cache.evict(head.kv_head, e.slot);
    stats.pages_reused += head.reuse.size();
  }
  return items;
}

/// Host-to-staging copy of one head's page; each run is one copy operation.
inline void stage_page(const HostPool& host, const RecallItem& item, std::span<float> staging, TransferStats& stats) {
  const auto src = host.block(item.fetch.page);
  const std::size_t eb = host.dims().elem_bytes;
  std::size_t dst = 0;
  for (const auto& run : *item.runs) {
    const std::size_t off = run.byte_offset / eb;
    const std::size_t len = run.byte_len / eb;
    std::memcpy(staging.data() + dst, src.data() + off, len * sizeof(float));
    dst += len;
    stats.copy_op_count += 1;
    stats.bytes_moved += run.byte_len;
  }
  stats.pages_fetched += 1;
}

inline void finish_recall(const TransferPlan& plan, DeviceCache& cache) {
  for (const auto& head : plan.heads) {
    std::vector<PageId> used = head.reuse;
    for (const auto& f : head.fetch) used.push_back(f.page);
    cache.mark_used(head.kv_head, used);
  }
}

}  // namespace detail

/// Copy then convert each fetched page, strictly one after another.
inline TransferStats execute_recall_sequential(const TransferPlan& plan, const HostPool& host, DeviceCache& cache) {
  TransferStats stats;
  const auto items = detail::prepare_recall(plan, host, cache, stats);
  std::vector<float> staging(host.dims().head_page_elems());
  for (const auto& item : items) {
    detail::stage_page(host, item, staging, stats);
    cache.install(item.kv_head, item.fetch.slot, item.fetch.page, staging);
  }
  detail::finish_recall(plan, cache);
  return stats;
}

/// Double-buffered recall: a mover thread fills one staging buffer while the
/// caller converts the other into the device arenas.
inline TransferStats execute_recall_streamed(const TransferPlan& plan, const HostPool& host, DeviceCache& cache) {
  TransferStats stats;
  const auto items = detail::prepare_recall(plan, host, cache, stats);
  if (items.size() <= 1) {
    std::vector<float> staging(host.dims().head_page_elems());
    for (const auto& item : items) {
      detail::stage_page(host, item, staging, stats);
      cache.install(item.kv_head, item.fetch.slot, item.fetch.page, staging);
    }
    detail::finish_recall(plan, cache);
    return stats;
  }

  std::vector<float> buffers[2] = {std::vector<float>(host.dims().head_page_elems()),
                                   std::vector<float>(host.dims().head_page_elems())};
  std::counting_semaphore<2> free_buffers(2);
  std::counting_semaphore<2> filled(0);
  TransferStats mover_stats;
  {
    std::jthread mover([&] {
      for (std::size_t n = 0; n < items.size(); ++n) {
        free_buffers.acquire();
        detail::stage_page(host, items[n], buffers[n % 2], mover_stats);
        filled.release();
      }
    });
    for (std::size_t n = 0; n < items.size(); ++n) {
      filled.acquire();
      cache.install(items[n].kv_head, items[n].fetch.slot, items[n].fetch.page, buffers[n % 2]);
      free_buffers.release();
    }
  }
  stats += mover_stats;
  detail::finish_recall(plan, cache);
  return stats;
}

inline TransferStats execute_recall(const TransferPlan& plan, const HostPool& host, DeviceCache& cache, bool streamed) {
  return streamed ? execute_recall_streamed(plan, host, cache) : execute_recall_sequential(plan, host, cache);
}

/// Single worker thread that runs recall jobs in submission order.
class TransferAgent {
 public:
  TransferAgent() : worker_([this](std::stop_token st) { run(st); }) {}
  ~TransferAgent() {
    {
      std::lock_guard lock(mu_);
      worker_.request_stop();
    }
    cv_.notify_all();
  }
  TransferAgent(const TransferAgent&) = delete;
  TransferAgent& operator=(const TransferAgent&) = delete;

  std::future<TransferStats> submit(std::function<TransferStats()> job) {
    std::packaged_task<TransferStats()> task(std::move(job));
    auto fut = task.get_future();
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(task));
    }
    cv_.notify_one();
    return fut;
  }

 private:
  void run(std::stop_token st) {
    for (;;) {
      std::packaged_task<TransferStats()> task;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return st.stop_requested() || !queue_.empty(); });
        if (queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop_front();
      }
      task();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::packaged_task<TransferStats()>> queue_;
  std::jthread worker_;
};

}  // namespace freekv
