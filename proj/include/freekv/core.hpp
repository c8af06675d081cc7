// SPDX-License-Identifier: Apache-2.0
//
// Configuration, dimension bookkeeping and the error type shared by every
// freekv module.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace freekv {

using PageId = std::uint32_t;

enum class ErrorCode {
  InvalidConfig,
  DimMismatch,
  CapacityExceeded,
  MissingHostPage,
  GroupSizeMismatch,
  PageNotResident,
  EmptyContext,
  EmptySet,
  BarrierNotReached,
  TraceCorrupt,
  InvalidSchedule,
  ConfigError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::CapacityExceeded: return "CapacityExceeded";
    case ErrorCode::MissingHostPage: return "MissingHostPage";
    case ErrorCode::GroupSizeMismatch: return "GroupSizeMismatch";
    case ErrorCode::PageNotResident: return "PageNotResident";
    case ErrorCode::EmptyContext: return "EmptyContext";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::BarrierNotReached: return "BarrierNotReached";
    case ErrorCode::TraceCorrupt: return "TraceCorrupt";
    case ErrorCode::InvalidSchedule: return "InvalidSchedule";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Thrown by validate_config; carries every violated constraint by name.
class InvalidConfig : public Error {
 public:
  explicit InvalidConfig(std::vector<std::string> violations)
      : Error(ErrorCode::InvalidConfig, join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& item : items) {
      if (!out.empty()) out += "; ";
      out += item;
    }
    return out;
  }

  std::vector<std::string> violations_;
};

struct ModelDims {
  std::size_t n_qo = 0;
  std::size_t n_kv = 0;
  std::size_t head_dim = 0;
  std::size_t page_size = 0;
  std::size_t elem_bytes = 4;

  std::size_t group_size() const { return n_kv == 0 ? 0 : n_qo / n_kv; }
  /// KV head read by attention head `head` under GQA.
  std::size_t kv_head_of(std::size_t head) const { return head / group_size(); }
  /// Elements of one K (or V) page covering all KV heads.
  std::size_t page_elems() const { return page_size * n_kv * head_dim; }
  /// Elements one KV head owns in one page, keys and values together.
  std::size_t head_page_elems() const { return 2 * page_size * head_dim; }

  bool operator==(const ModelDims&) const = default;
};

struct BudgetConfig {
  std::size_t budget_tokens = 0;
  std::size_t sink_tokens = 0;
  std::size_t window_tokens = 0;
};

enum class SpecMode { Speculative, AlwaysCorrect, NeverCorrect };
enum class GroupPooling { MeanS, MaxS, MeanQ, MaxQ, MeanQK, MaxQK };
enum class SimilarityPooling { Mean, Max };

struct SpecConfig {
  double tau = 0.8;
  SpecMode mode = SpecMode::Speculative;
  GroupPooling pooling = GroupPooling::MeanS;
  SimilarityPooling similarity_pooling = SimilarityPooling::Mean;
  bool first_layer_exempt = true;
};

struct EngineConfig {
  ModelDims dims;
  BudgetConfig budget;
  SpecConfig spec;

  std::size_t selectable_pages = 0;
  std::size_t sink_pages = 0;
  /// Bytes of one K (or V) page across all KV heads.
  std::size_t page_bytes = 0;
  /// Bytes of one combined host page, shape (n_kv, 2, p, d).
  std::size_t combined_page_bytes = 0;
  /// Bytes recalled per (KV head, page): 2 * p * d elements.
  std::size_t head_transfer_bytes = 0;
};

inline std::string_view to_string(SpecMode mode) {
  switch (mode) {
    case SpecMode::Speculative: return "speculative";
    case SpecMode::AlwaysCorrect: return "always_correct";
    case SpecMode::NeverCorrect: return "never_correct";
  }
  return "?";
}

inline std::string_view to_string(GroupPooling pooling) {
  switch (pooling) {
    case GroupPooling::MeanS: return "MeanS";
    case GroupPooling::MaxS: return "MaxS";
    case GroupPooling::MeanQ: return "MeanQ";
    case GroupPooling::MaxQ: return "MaxQ";
    case GroupPooling::MeanQK: return "MeanQK";
    case GroupPooling::MaxQK: return "MaxQK";
  }
  return "?";
}

inline std::string_view to_string(SimilarityPooling pooling) {
  return pooling == SimilarityPooling::Mean ? "mean" : "max";
}

inline std::optional<SpecMode> parse_spec_mode(std::string_view text) {
  if (text == "speculative") return SpecMode::Speculative;
  if (text == "always_correct") return SpecMode::AlwaysCorrect;
  if (text == "never_correct") return SpecMode::NeverCorrect;
  return std::nullopt;
}

inline std::optional<GroupPooling> parse_group_pooling(std::string_view text) {
  for (auto p : {GroupPooling::MeanS, GroupPooling::MaxS, GroupPooling::MeanQ, GroupPooling::MaxQ,
                 GroupPooling::MeanQK, GroupPooling::MaxQK}) {
    if (text == to_string(p)) return p;
  }
  return std::nullopt;
}

inline std::optional<SimilarityPooling> parse_similarity_pooling(std::string_view text) {
  if (text == "mean") return SimilarityPooling::Mean;
  if (text == "max") return SimilarityPooling::Max;
  return std::nullopt;
}

/// Every violated constraint, empty when the configuration is usable.
inline std::vector<std::string> config_violations(const ModelDims& dims, const BudgetConfig& budget,
                                                  const SpecConfig& spec) {
  std::vector<std::string> out;
  if (dims.n_kv == 0) out.emplace_back("n_kv > 0");
  if (dims.n_qo == 0) out.emplace_back("n_qo > 0");
  if (dims.n_kv != 0 && dims.n_qo % dims.n_kv != 0) out.emplace_back("group divisibility: n_qo mod n_kv == 0");
  if (dims.head_dim == 0) out.emplace_back("d > 0");
  if (dims.page_size == 0) out.emplace_back("p > 0");
  if (dims.elem_bytes != 2 && dims.elem_bytes != 4) out.emplace_back("elem_bytes in {2, 4}");

  const auto& b = budget;
  if (b.budget_tokens < b.sink_tokens + b.window_tokens) {
    out.emplace_back("B >= S + W");
  } else if (dims.page_size != 0 && (b.budget_tokens - b.sink_tokens - b.window_tokens) % dims.page_size != 0) {
    out.emplace_back("(B - S - W) mod p == 0");
  }
  if (dims.page_size != 0 && b.sink_tokens % dims.page_size != 0) out.emplace_back("S mod p == 0");
  if (dims.page_size != 0 && b.window_tokens % dims.page_size != 0) out.emplace_back("W mod p == 0");

  if (!std::isfinite(spec.tau) || spec.tau < 0.0 || spec.tau > 1.0) out.emplace_back("tau in [0, 1]");
  return out;
}

inline EngineConfig validate_config(const ModelDims& dims, const BudgetConfig& budget, const SpecConfig& spec) {
  auto violations = config_violations(dims, budget, spec);
  if (!violations.empty()) throw InvalidConfig(std::move(violations));

  EngineConfig cfg;
  cfg.dims = dims;
  cfg.budget = budget;
  cfg.spec = spec;
  cfg.selectable_pages = (budget.budget_tokens - budget.sink_tokens - budget.window_tokens) / dims.page_size;
  cfg.sink_pages = budget.sink_tokens / dims.page_size;
  cfg.page_bytes = dims.page_elems() * dims.elem_bytes;
  cfg.combined_page_bytes = 2 * cfg.page_bytes;
  cfg.head_transfer_bytes = dims.head_page_elems() * dims.elem_bytes;
  return cfg;
}

}  // namespace freekv
